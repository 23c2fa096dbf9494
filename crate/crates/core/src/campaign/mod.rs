//! The fuzzing loop: generate, execute, detect, then minimize, deduplicate
//! and persist.
//!
//! Iterations are cut into fixed-size chunks. Worker `w` of `n` runs chunks
//! `w, w + n, ...` and the sink consumes chunks in index order, so with one
//! worker and an iteration cap the persisted corpus depends only on the
//! configuration.

mod replay;
mod store;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{BridgeError, CampaignError, ConfigError};
use crate::evaluator::{self, dedup, detect, DedupResult, Discrepancy, DiscrepancyKind, Verdict};
use crate::generator::{generate, GenLimits, Payload};
use crate::harness::{validate_targets, Budget, ExecutionRecord, Harness, TargetId};
use crate::hashing::payload_seed;

pub use replay::{load_payload_file, replay, ReplayReport};
pub use store::{FindingMeta, RawHit, Store, RAW_RING_SIZE};

/// Iterations per unit of work handed to a worker.
pub const CHUNK: u64 = 512;
/// Interval between stats.json rewrites.
pub const STATS_INTERVAL: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub duration: Option<Duration>,
    pub max_iterations: Option<u64>,
    pub seed: u64,
    pub workers: usize,
    pub limits: GenLimits,
    pub targets: Vec<TargetId>,
    pub out_dir: PathBuf,
    pub budget: Budget,
    pub bridge_cmd: Option<PathBuf>,
}

impl CampaignConfig {
    /// Single worker over the internal targets with default limits.
    pub fn new(out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        CampaignConfig {
            duration: None,
            max_iterations: None,
            seed,
            workers: 1,
            limits: GenLimits::default(),
            targets: vec![TargetId::InternalPvm, TargetId::InternalDisasm],
            out_dir: out_dir.into(),
            budget: Budget::default(),
            bridge_cmd: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (self.duration, self.max_iterations) {
            (None, None) => return Err(ConfigError::Invalid("a duration or an iteration count is required".into())),
            (Some(d), _) if d.is_zero() => return Err(ConfigError::Invalid("duration must be positive".into())),
            (_, Some(0)) => return Err(ConfigError::Invalid("iteration count must be positive".into())),
            _ => {}
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("at least one worker is required".into()));
        }
        if self.budget.wall.is_zero() || self.budget.memory_bytes == 0 {
            return Err(ConfigError::Invalid("budgets must be positive".into()));
        }
        self.limits.validate()?;
        validate_targets(&self.targets)?;
        if self.targets.iter().any(|t| t.is_external()) && self.bridge_cmd.is_none() {
            return Err(ConfigError::Invalid("external targets need a bridge command".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub payloads_executed: u64,
    pub error_discrepancy_hits: u64,
    pub storage_discrepancy_hits: u64,
    pub unique_signatures: u64,
    /// Payloads abandoned because the bridge could not be kept alive.
    pub bridge_failures: u64,
    pub per_target_errors: BTreeMap<TargetId, u64>,
    pub per_target_budget_exceeded: BTreeMap<TargetId, u64>,
    pub per_worker_executed: Vec<u64>,
    pub elapsed_secs: f64,
    /// Payloads per second.
    pub throughput: f64,
}

impl CampaignStats {
    pub fn error_rate(&self, target: TargetId) -> f64 {
        if self.payloads_executed == 0 {
            return 0.0;
        }
        *self.per_target_errors.get(&target).unwrap_or(&0) as f64 / self.payloads_executed as f64
    }
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub stats: CampaignStats,
    /// Kept findings in discovery order.
    pub findings: Vec<Discrepancy>,
}

struct Hit {
    iteration: u64,
    payload: Payload,
    verdict: Verdict,
}

#[derive(Default)]
struct ChunkReport {
    executed: u64,
    bridge_failures: u64,
    errors: BTreeMap<TargetId, u64>,
    budget: BTreeMap<TargetId, u64>,
    hits: Vec<Hit>,
}

impl ChunkReport {
    fn count(&mut self, records: &[ExecutionRecord]) {
        self.executed += 1;
        for r in records {
            if !r.is_comparable() {
                *self.budget.entry(r.target).or_default() += 1;
            } else if !r.is_ok() {
                *self.errors.entry(r.target).or_default() += 1;
            }
        }
    }
}

fn worker(
    index: usize,
    workers: usize,
    cfg: &CampaignConfig,
    mut harness: Harness,
    deadline: Option<Instant>,
    tx: SyncSender<ChunkReport>,
) {
    let limit = cfg.max_iterations.unwrap_or(u64::MAX);
    let mut chunk = index as u64;
    loop {
        let start = chunk.saturating_mul(CHUNK);
        if start >= limit {
            return;
        }
        let end = start.saturating_add(CHUNK).min(limit);
        let mut report = ChunkReport::default();
        let mut expired = false;
        for iteration in start..end {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                expired = true;
                break;
            }
            let payload = generate(payload_seed(cfg.seed, iteration), &cfg.limits);
            match harness.execute(&payload) {
                Ok(records) => {
                    report.count(&records);
                    if let Some(verdict) = detect(&records) {
                        report.hits.push(Hit { iteration, payload, verdict });
                    }
                }
                Err(_) => report.bridge_failures += 1,
            }
        }
        if tx.send(report).is_err() || expired {
            return;
        }
        chunk += workers as u64;
    }
}

struct Sink<'a> {
    cfg: &'a CampaignConfig,
    harness: Harness,
    store: Store,
    seen: HashSet<evaluator::Signature>,
    stats: CampaignStats,
    findings: Vec<Discrepancy>,
    started: Instant,
    last_stats: Instant,
}

impl Sink<'_> {
    fn absorb(&mut self, worker: usize, report: ChunkReport) -> Result<(), CampaignError> {
        self.stats.payloads_executed += report.executed;
        self.stats.per_worker_executed[worker] += report.executed;
        self.stats.bridge_failures += report.bridge_failures;
        for (t, n) in report.errors {
            *self.stats.per_target_errors.entry(t).or_default() += n;
        }
        for (t, n) in report.budget {
            *self.stats.per_target_budget_exceeded.entry(t).or_default() += n;
        }
        for hit in report.hits {
            self.hit(hit)?;
        }
        if self.last_stats.elapsed() >= STATS_INTERVAL {
            self.refresh_timing();
            self.store.write_stats(&self.stats)?;
            self.last_stats = Instant::now();
        }
        Ok(())
    }

    fn hit(&mut self, hit: Hit) -> Result<(), CampaignError> {
        let counter = match hit.verdict.kind {
            DiscrepancyKind::Error => &mut self.stats.error_discrepancy_hits,
            DiscrepancyKind::Storage => &mut self.stats.storage_discrepancy_hits,
        };
        *counter += 1;
        let hit_index = self.stats.error_discrepancy_hits + self.stats.storage_discrepancy_hits - 1;
        self.store.write_raw(&RawHit {
            hit_index,
            iteration: hit.iteration,
            payload: hit.payload.clone(),
            verdict: hit.verdict.clone(),
        })?;
        let Some(finding) = evaluator::evaluate_hit(&hit.payload, &hit.verdict, &mut self.harness) else {
            self.stats.bridge_failures += 1;
            return Ok(());
        };
        if dedup(&finding, &mut self.seen) == DedupResult::Kept {
            self.stats.unique_signatures += 1;
            let meta = FindingMeta::new(&finding, self.cfg, hit.iteration);
            self.store.write_finding(&finding, &meta)?;
            self.findings.push(finding);
        }
        Ok(())
    }

    fn refresh_timing(&mut self) {
        let secs = self.started.elapsed().as_secs_f64();
        self.stats.elapsed_secs = secs;
        self.stats.throughput = if secs > 0.0 { self.stats.payloads_executed as f64 / secs } else { 0.0 };
    }
}

fn make_harness(cfg: &CampaignConfig) -> Result<Harness, BridgeError> {
    Harness::new(&cfg.targets, cfg.budget, cfg.limits.buffers_item_count, cfg.bridge_cmd.clone())
}

/// Runs a campaign to its deadline or iteration cap.
pub fn run(cfg: &CampaignConfig) -> Result<CampaignResult, CampaignError> {
    cfg.validate()?;
    let store = Store::open(&cfg.out_dir)?;
    let harnesses = (0..cfg.workers).map(|_| make_harness(cfg)).collect::<Result<Vec<_>, _>>()?;
    let sink_harness = make_harness(cfg)?;
    let started = Instant::now();
    let deadline = cfg.duration.map(|d| started + d);

    let mut sink = Sink {
        cfg,
        harness: sink_harness,
        store,
        seen: HashSet::new(),
        stats: CampaignStats { per_worker_executed: vec![0; cfg.workers], ..Default::default() },
        findings: Vec::new(),
        started,
        last_stats: started,
    };

    let outcome = thread::scope(|scope| -> Result<(), CampaignError> {
        let mut receivers: Vec<Receiver<ChunkReport>> = Vec::with_capacity(cfg.workers);
        for (index, harness) in harnesses.into_iter().enumerate() {
            let (tx, rx) = mpsc::sync_channel(2);
            receivers.push(rx);
            scope.spawn(move || worker(index, cfg.workers, cfg, harness, deadline, tx));
        }
        // Chunks in index order, then whatever is left once a worker stops.
        let mut chunk = 0usize;
        while let Ok(report) = receivers[chunk % cfg.workers].recv() {
            sink.absorb(chunk % cfg.workers, report)?;
            chunk += 1;
        }
        for (w, rx) in receivers.iter().enumerate() {
            while let Ok(report) = rx.recv() {
                sink.absorb(w, report)?;
            }
        }
        Ok(())
    });
    outcome?;

    sink.refresh_timing();
    sink.store.write_stats(&sink.stats)?;
    sink.store.write_report(cfg, &sink.stats, &sink.findings)?;
    Ok(CampaignResult { stats: sink.stats, findings: sink.findings })
}
