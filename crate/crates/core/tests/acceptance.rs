//! Acceptance checks. Runs as a plain binary so the PASS/FAIL lines always
//! reach the terminal; exits non-zero when any check fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use pvmdiff_core::campaign::{self, CampaignConfig};
use pvmdiff_core::evaluator::{classify, detect, is_one_minimal, minimize, Quirk};
use pvmdiff_core::harness::{Budget, Harness, TargetId};
use pvmdiff_core::hashing::payload_seed;
use pvmdiff_core::opcodes::parse_all;
use pvmdiff_core::{generate, load, DiscrepancyKind, GenLimits, Payload};

const INTERNAL: [TargetId; 2] = [TargetId::InternalPvm, TargetId::InternalDisasm];
/// Campaign seed for the rediscovery run.
const CAMPAIGN_SEED: u64 = 20_240_501;

struct Check {
    name: &'static str,
    limit: Duration,
    run: fn() -> Result<String, String>,
}

fn replay_fixtures() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cases: [(&[u8], bool); 5] = [
        (b"I0x1337\n.", true),
        (b"N].", true),
        (b"]q\x00]q\x00.", true),
        (b"N.", false),
        (b"].", false),
    ];
    for (i, (bytes, expect_hit)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("{i}.pkl"));
        std::fs::write(&path, bytes).map_err(|e| e.to_string())?;
        let report = campaign::replay(&path, &INTERNAL, Budget::default(), 3, None).map_err(|e| e.to_string())?;
        match (&report.verdict, expect_hit) {
            (None, false) => {}
            (Some(v), true) => {
                let want = "(internal-pvm: ok, internal-disasm: error)";
                if v.kind != DiscrepancyKind::Error || v.outcome_vector.to_string() != want {
                    return Err(format!("{bytes:?}: got {} {}", v.kind, v.outcome_vector));
                }
            }
            (got, _) => return Err(format!("{bytes:?}: unexpected verdict {got:?}")),
        }
    }
    Ok("5 directed payloads".into())
}

fn fuzz_rediscovery() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = CampaignConfig { max_iterations: Some(2_000_000), ..CampaignConfig::new(dir.path(), CAMPAIGN_SEED) };
    let result = campaign::run(&cfg).map_err(|e| e.to_string())?;
    let quirks: BTreeSet<Quirk> = result.findings.iter().filter_map(|f| classify(&f.payload)).collect();
    let names: Vec<_> = quirks.iter().map(|q| q.as_str()).collect();
    let summary = format!(
        "{} unique signatures, quirk classes [{}]",
        result.stats.unique_signatures,
        names.join(", ")
    );
    if quirks.len() >= 2 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn oracle_equivalence() -> Result<String, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/plain_data.json");
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let fixtures: Vec<serde_json::Value> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let mut protocols = BTreeSet::new();
    for (i, f) in fixtures.iter().enumerate() {
        let bytes = STANDARD.decode(f["pickle_b64"].as_str().unwrap_or_default()).map_err(|e| e.to_string())?;
        let got = load(&Payload::from_bytes(bytes)).result_repr();
        if got.as_deref() != f["canonical"].as_str() {
            return Err(format!("fixture {i}: got {got:?}, want {}", f["canonical"]));
        }
        protocols.insert(f["protocol"].as_u64().unwrap_or(99));
    }
    if fixtures.len() < 200 || protocols != (0..=5).collect() {
        return Err(format!("{} fixtures over protocols {protocols:?}", fixtures.len()));
    }
    Ok(format!("{} fixtures, protocols 0-5", fixtures.len()))
}

fn grammar_validity() -> Result<String, String> {
    let limits = GenLimits::default();
    for i in 0..10_000u64 {
        let seed = payload_seed(99, i);
        let p = generate(seed, &limits);
        parse_all(&p.pickle_bytes).map_err(|e| format!("seed {seed}: {e}"))?;
        if generate(seed, &limits) != p {
            return Err(format!("seed {seed}: generation not reproducible"));
        }
    }
    Ok("10000 payloads".into())
}

fn minimizer_soundness() -> Result<String, String> {
    let mut harness = Harness::internal(&INTERNAL);
    let limits = GenLimits::default();
    let mut checked = 0;
    let mut iteration = 0u64;
    while checked < 100 {
        let payload = generate(payload_seed(7, iteration), &limits);
        iteration += 1;
        let Some(verdict) = detect(&harness.execute(&payload).map_err(|e| e.to_string())?) else {
            continue;
        };
        let small = minimize(&payload, &mut harness, &verdict);
        let mut oracle = |p: &Payload| harness.execute(p).ok().and_then(|r| detect(&r)).as_ref() == Some(&verdict);
        if !oracle(&small) {
            return Err(format!("iteration {}: minimized payload lost its verdict", iteration - 1));
        }
        if !is_one_minimal(&small, &mut oracle) {
            return Err(format!("iteration {}: minimized payload is not 1-minimal", iteration - 1));
        }
        checked += 1;
    }
    Ok(format!("100 discrepancies from {iteration} payloads"))
}

fn main() -> ExitCode {
    let checks = [
        Check { name: "regression fixtures replay", limit: Duration::from_secs(1), run: replay_fixtures },
        Check { name: "fuzz rediscovery", limit: Duration::from_secs(15 * 60), run: fuzz_rediscovery },
        Check { name: "pvm oracle equivalence", limit: Duration::from_secs(10), run: oracle_equivalence },
        Check { name: "grammar validity", limit: Duration::from_secs(30), run: grammar_validity },
        Check { name: "minimizer soundness", limit: Duration::from_secs(120), run: minimizer_soundness },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for check in checks {
        if !filter.is_empty() && !filter.iter().any(|f| check.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = (check.run)();
        let took = start.elapsed();
        let (status, detail) = match result {
            Ok(d) if took <= check.limit => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {:?} limit", check.limit)),
            Err(e) => ("FAIL", e),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} {} ({:.2?}): {detail}", check.name, took);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
