use criterion::{black_box, criterion_group, criterion_main, Criterion, Throughput};
use pvmdiff_bench::corpus;
use pvmdiff_core::evaluator::{detect, minimize};
use pvmdiff_core::harness::{Harness, TargetId};
use pvmdiff_core::hashing::payload_seed;
use pvmdiff_core::{disassemble, generate, load, GenLimits};

const INTERNAL: [TargetId; 2] = [TargetId::InternalPvm, TargetId::InternalDisasm];

fn stages(c: &mut Criterion) {
    let payloads = corpus(1000);
    let mut g = c.benchmark_group("stages");
    g.throughput(Throughput::Elements(payloads.len() as u64));
    g.bench_function("generate", |b| {
        let limits = GenLimits::default();
        b.iter(|| (0..1000).map(|i| generate(payload_seed(42, i), &limits).pickle_bytes.len()).sum::<usize>())
    });
    g.bench_function("pvm_load", |b| b.iter(|| payloads.iter().filter(|p| load(p).is_ok()).count()));
    g.bench_function("disassemble", |b| b.iter(|| payloads.iter().filter(|p| disassemble(p).is_ok()).count()));
    g.bench_function("execute_detect", |b| {
        let mut h = Harness::internal(&INTERNAL);
        b.iter(|| payloads.iter().filter(|p| detect(&h.execute(p).unwrap()).is_some()).count())
    });
    g.finish();
}

fn minimization(c: &mut Criterion) {
    let mut h = Harness::internal(&INTERNAL);
    let hits: Vec<_> = corpus(5000)
        .into_iter()
        .filter_map(|p| detect(&h.execute(&p).unwrap()).map(|v| (p, v)))
        .take(50)
        .collect();
    c.bench_function("minimize_50_hits", |b| {
        b.iter(|| {
            hits.iter().map(|(p, v)| minimize(black_box(p), &mut h, v).pickle_bytes.len()).sum::<usize>()
        })
    });
}

criterion_group!(benches, stages, minimization);
criterion_main!(benches);
