//! On-disk corpus layout.
//!
//! ```text
//! out_dir/findings/<signature-hash>/{payload.pkl, meta.json, records.json}
//! out_dir/raw/<slot>.json     ring of the most recent pre-dedup hits
//! out_dir/stats.json
//! out_dir/report.txt
//! ```
//!
//! Every file and finding directory is written under a temporary name and
//! renamed into place, so a killed campaign never leaves a partial record.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CampaignConfig, CampaignStats};
use crate::disasm;
use crate::error::CampaignError;
use crate::evaluator::{classify, Discrepancy, DiscrepancyKind, OutcomeVector, Quirk, Verdict};
use crate::generator::{BuffersMenu, Encoding, GenLimits, Payload};
use crate::harness::TargetId;

pub const RAW_RING_SIZE: u64 = 10_000;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to regenerate or replay a finding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingMeta {
    pub signature_hash: String,
    pub kind: DiscrepancyKind,
    pub outcome_vector: OutcomeVector,
    pub opcode_profile: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quirk: Option<Quirk>,
    /// Generation seed of the original payload; also seeds the buffers.
    pub seed: u64,
    pub campaign_seed: u64,
    pub iteration: u64,
    pub encoding: Encoding,
    pub buffers_choice: BuffersMenu,
    pub limits: GenLimits,
    pub targets: Vec<TargetId>,
    pub tool_version: String,
    /// Unminimized pickle, base64.
    pub original_pickle_b64: String,
}

impl FindingMeta {
    pub fn new(finding: &Discrepancy, cfg: &CampaignConfig, iteration: u64) -> Self {
        let original = serde_json::to_value(&finding.original_payload).expect("payload serializes");
        FindingMeta {
            signature_hash: finding.signature.hash_hex(),
            kind: finding.kind,
            outcome_vector: finding.signature.outcome_vector.clone(),
            opcode_profile: finding.signature.opcode_profile.iter().cloned().collect(),
            quirk: (finding.kind == DiscrepancyKind::Error).then(|| classify(&finding.payload)).flatten(),
            seed: finding.payload.seed,
            campaign_seed: cfg.seed,
            iteration,
            encoding: finding.payload.encoding,
            buffers_choice: finding.payload.buffers_choice,
            limits: cfg.limits,
            targets: cfg.targets.clone(),
            tool_version: TOOL_VERSION.to_owned(),
            original_pickle_b64: original["pickle_b64"].as_str().unwrap_or_default().to_owned(),
        }
    }
}

/// One pre-dedup hit as kept in the raw ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHit {
    pub hit_index: u64,
    pub iteration: u64,
    pub payload: Payload,
    pub verdict: Verdict,
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CampaignError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CampaignError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CampaignError::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

impl Store {
    pub fn open(root: &Path) -> Result<Self, CampaignError> {
        for sub in ["findings", "raw"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| CampaignError::io(&dir, e))?;
        }
        Ok(Store { root: root.to_owned() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_finding(&self, finding: &Discrepancy, meta: &FindingMeta) -> Result<(), CampaignError> {
        let findings = self.root.join("findings");
        let dest = findings.join(&meta.signature_hash);
        let tmp = findings.join(format!(".tmp-{}", meta.signature_hash));
        let io = |p: &Path| {
            let p = p.to_owned();
            move |e| CampaignError::io(p, e)
        };
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
        }
        fs::create_dir(&tmp).map_err(io(&tmp))?;
        fs::write(tmp.join("payload.pkl"), &finding.payload.pickle_bytes).map_err(io(&tmp))?;
        fs::write(tmp.join("meta.json"), pretty(meta)).map_err(io(&tmp))?;
        fs::write(tmp.join("records.json"), pretty(&finding.records)).map_err(io(&tmp))?;
        if dest.exists() {
            fs::remove_dir_all(&dest).map_err(io(&dest))?;
        }
        fs::rename(&tmp, &dest).map_err(io(&dest))
    }

    pub fn write_raw(&self, hit: &RawHit) -> Result<(), CampaignError> {
        let path = self.root.join("raw").join(format!("{:05}.json", hit.hit_index % RAW_RING_SIZE));
        write_atomic(&path, &serde_json::to_vec(hit).expect("serializable"))
    }

    pub fn write_stats(&self, stats: &CampaignStats) -> Result<(), CampaignError> {
        write_atomic(&self.root.join("stats.json"), &pretty(stats))
    }

    pub fn write_report(
        &self,
        cfg: &CampaignConfig,
        stats: &CampaignStats,
        findings: &[Discrepancy],
    ) -> Result<(), CampaignError> {
        write_atomic(&self.root.join("report.txt"), render_report(cfg, stats, findings).as_bytes())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn render_report(cfg: &CampaignConfig, stats: &CampaignStats, findings: &[Discrepancy]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "pvmdiff campaign report (version {TOOL_VERSION})");
    let targets: Vec<_> = cfg.targets.iter().map(|t| t.as_str()).collect();
    let _ = writeln!(out, "seed {}  workers {}  targets {}", cfg.seed, cfg.workers, targets.join(","));
    let _ = writeln!(
        out,
        "executed {} payloads in {:.1} s ({:.0}/s)",
        stats.payloads_executed, stats.elapsed_secs, stats.throughput
    );
    let _ = writeln!(
        out,
        "hits: {} error, {} storage; {} unique signatures; {} bridge failures",
        stats.error_discrepancy_hits, stats.storage_discrepancy_hits, stats.unique_signatures, stats.bridge_failures
    );
    for t in &cfg.targets {
        let _ = writeln!(out, "  {:<24} error rate {:.4}", t.as_str(), stats.error_rate(*t));
    }

    for (title, kind) in [
        ("Error discrepancies", DiscrepancyKind::Error),
        ("Storage discrepancies (manual review: automatic dedup is coarse)", DiscrepancyKind::Storage),
    ] {
        let group: Vec<_> = findings.iter().filter(|f| f.kind == kind).collect();
        let _ = writeln!(out, "\n== {title}: {}", group.len());
        for f in group {
            let _ = writeln!(out, "\n[{}] {}", f.signature.hash_hex(), f.signature.outcome_vector);
            if let Some(q) = (kind == DiscrepancyKind::Error).then(|| classify(&f.payload)).flatten() {
                let _ = writeln!(out, "  quirk: {}", q.as_str());
            }
            let ops: Vec<_> = f.signature.opcode_profile.iter().map(String::as_str).collect();
            let _ = writeln!(out, "  opcodes: {}", ops.join(" "));
            let _ = writeln!(
                out,
                "  payload: {}  encoding {}  buffers {}",
                hex(&f.payload.pickle_bytes),
                f.payload.encoding,
                f.payload.buffers_choice.id()
            );
            for r in &f.records {
                let label = r.error_label.as_deref().map(|l| format!(" ({l})")).unwrap_or_default();
                let outcome = if r.is_ok() { "ok" } else { "error" };
                let _ = writeln!(out, "    {:<24} {outcome}{label}", r.target.as_str());
            }
            for line in disasm::disassemble(&f.payload).to_string().lines() {
                let _ = writeln!(out, "    | {line}");
            }
        }
    }
    out
}
