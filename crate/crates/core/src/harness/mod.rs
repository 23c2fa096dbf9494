//! Runs one payload on a set of targets and collects one record per target.
//!
//! Internal targets run in-process. External targets run in a bridge
//! subprocess speaking line-delimited JSON (see [`bridge`]).

pub mod bridge;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::disasm;
use crate::error::{BridgeError, ConfigError};
use crate::generator::Payload;
use crate::label::ErrorLabel;
use crate::pvm::{self, CanonicalState, LoadOptions};

pub use bridge::{BridgeRequest, BridgeResponse, BridgeSession};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetId {
    InternalPvm,
    InternalDisasm,
    ExtPureDeserializer,
    ExtCDeserializer,
    ExtDisassembler,
}

impl TargetId {
    pub const ALL: [TargetId; 5] = [
        TargetId::InternalPvm,
        TargetId::InternalDisasm,
        TargetId::ExtPureDeserializer,
        TargetId::ExtCDeserializer,
        TargetId::ExtDisassembler,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetId::InternalPvm => "internal-pvm",
            TargetId::InternalDisasm => "internal-disasm",
            TargetId::ExtPureDeserializer => "ext-pure-deserializer",
            TargetId::ExtCDeserializer => "ext-c-deserializer",
            TargetId::ExtDisassembler => "ext-disassembler",
        }
    }

    pub fn kind(self) -> TargetKind {
        match self {
            TargetId::InternalDisasm | TargetId::ExtDisassembler => TargetKind::Disassembler,
            _ => TargetKind::Deserializer,
        }
    }

    pub fn is_external(self) -> bool {
        matches!(self, TargetId::ExtPureDeserializer | TargetId::ExtCDeserializer | TargetId::ExtDisassembler)
    }

    /// Parses a comma-separated target list.
    pub fn parse_list(csv: &str) -> Result<Vec<TargetId>, ConfigError> {
        csv.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for TargetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetId {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TargetId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown target {s:?}")))
    }
}

/// Checks a target set: at least two targets, no duplicates.
pub fn validate_targets(targets: &[TargetId]) -> Result<(), ConfigError> {
    if targets.len() < 2 {
        return Err(ConfigError::Invalid("at least two targets are required".into()));
    }
    for (i, t) in targets.iter().enumerate() {
        if targets[..i].contains(t) {
            return Err(ConfigError::Invalid(format!("target {t} listed twice")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Deserializer,
    Disassembler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ok,
    Error,
}

/// Canonical storage a target exposed. A field is absent when the target
/// cannot reach that storage area.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExposedState {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metastack: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memo: Option<BTreeMap<String, String>>,
}

impl From<CanonicalState> for ExposedState {
    fn from(s: CanonicalState) -> Self {
        ExposedState { stack: Some(s.stack), metastack: Some(s.metastack), memo: Some(s.memo) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub target: TargetId,
    pub kind: TargetKind,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<ExposedState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_repr: Option<String>,
}

impl ExecutionRecord {
    pub fn is_ok(&self) -> bool {
        self.outcome == Outcome::Ok
    }

    /// False when the target ran out of budget; such records take no part
    /// in discrepancy detection.
    pub fn is_comparable(&self) -> bool {
        self.error_label.as_deref() != Some(ErrorLabel::BudgetExceeded.as_str())
    }

    fn error(target: TargetId, label: impl Into<String>) -> Self {
        ExecutionRecord {
            target,
            kind: target.kind(),
            outcome: Outcome::Error,
            error_label: Some(label.into()),
            state: None,
            result_repr: None,
        }
    }

    pub fn budget_exceeded(target: TargetId) -> Self {
        Self::error(target, ErrorLabel::BudgetExceeded.as_str())
    }
}

/// Per-payload, per-target resource caps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub wall: Duration,
    pub memory_bytes: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { wall: Duration::from_secs(2), memory_bytes: 512 << 20 }
    }
}

pub fn run_internal_pvm(payload: &Payload, opts: &LoadOptions, budget: &Budget) -> ExecutionRecord {
    let target = TargetId::InternalPvm;
    let start = Instant::now();
    let result = pvm::load_with(payload, opts);
    if start.elapsed() > budget.wall {
        return ExecutionRecord::budget_exceeded(target);
    }
    let error_label = result.outcome.as_ref().err().map(|f| f.label.as_str().to_owned());
    ExecutionRecord {
        target,
        kind: target.kind(),
        outcome: if result.is_ok() { Outcome::Ok } else { Outcome::Error },
        error_label,
        result_repr: result.result_repr(),
        state: Some(pvm::canonical_state(&result.final_state).into()),
    }
}

pub fn run_internal_disasm(payload: &Payload, budget: &Budget) -> ExecutionRecord {
    let target = TargetId::InternalDisasm;
    let start = Instant::now();
    let result = disasm::disassemble(payload);
    if start.elapsed() > budget.wall {
        return ExecutionRecord::budget_exceeded(target);
    }
    match result.outcome {
        Ok(()) => ExecutionRecord {
            target,
            kind: target.kind(),
            outcome: Outcome::Ok,
            error_label: None,
            state: None,
            result_repr: None,
        },
        Err(fault) => ExecutionRecord::error(target, fault.label.as_str()),
    }
}

/// Executes payloads on a fixed target set. Owns the bridge session when an
/// external target is configured.
#[derive(Debug)]
pub struct Harness {
    targets: Vec<TargetId>,
    budget: Budget,
    load_options: LoadOptions,
    bridge: Option<BridgeSession>,
}

impl Harness {
    /// Builds a harness; spawns the bridge when any target is external.
    pub fn new(
        targets: &[TargetId],
        budget: Budget,
        buffers_item_count: u32,
        bridge_cmd: Option<PathBuf>,
    ) -> Result<Self, BridgeError> {
        let bridge = if targets.iter().any(|t| t.is_external()) {
            let cmd = bridge_cmd.ok_or(BridgeError::NotConfigured)?;
            Some(BridgeSession::spawn(cmd, budget, buffers_item_count)?)
        } else {
            None
        };
        let load_options = LoadOptions { memory_cap: budget.memory_bytes, buffers_item_count, ..LoadOptions::default() };
        Ok(Harness { targets: targets.to_vec(), budget, load_options, bridge })
    }

    /// A harness over in-process targets only.
    pub fn internal(targets: &[TargetId]) -> Self {
        assert!(targets.iter().all(|t| !t.is_external()), "external target without a bridge");
        Harness::new(targets, Budget::default(), LoadOptions::default().buffers_item_count, None)
            .expect("no bridge needed")
    }

    pub fn targets(&self) -> &[TargetId] {
        &self.targets
    }

    pub fn budget(&self) -> &Budget {
        &self.budget
    }

    /// One record per target, in target order.
    pub fn execute(&mut self, payload: &Payload) -> Result<Vec<ExecutionRecord>, BridgeError> {
        let mut records = Vec::with_capacity(self.targets.len());
        for &target in &self.targets {
            let record = match target {
                TargetId::InternalPvm => run_internal_pvm(payload, &self.load_options, &self.budget),
                TargetId::InternalDisasm => run_internal_disasm(payload, &self.budget),
                ext => self.bridge.as_mut().ok_or(BridgeError::NotConfigured)?.execute(payload, ext)?,
            };
            records.push(record);
        }
        Ok(records)
    }
}

/// Runs `payload` on in-process targets with default options.
pub fn execute_internal(payload: &Payload, targets: &[TargetId]) -> Vec<ExecutionRecord> {
    Harness::internal(targets).execute(payload).expect("internal targets cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;

    const INTERNAL: [TargetId; 2] = [TargetId::InternalPvm, TargetId::InternalDisasm];

    #[test]
    fn target_names_round_trip() {
        for t in TargetId::ALL {
            assert_eq!(t.as_str().parse::<TargetId>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{t}\""));
        }
        assert_eq!(TargetId::parse_list("internal-pvm, internal-disasm").unwrap(), INTERNAL.to_vec());
        assert!(TargetId::parse_list("internal-pvm,nope").is_err());
    }

    #[test]
    fn target_sets() {
        assert!(validate_targets(&INTERNAL).is_ok());
        assert!(validate_targets(&[TargetId::InternalPvm]).is_err());
        assert!(validate_targets(&[TargetId::InternalPvm, TargetId::InternalPvm]).is_err());
    }

    #[test]
    fn none_is_ok_everywhere() {
        let records = execute_internal(&Payload::from_bytes(&b"N."[..]), &INTERNAL);
        assert_eq!(records.len(), 2);
        assert!(records.iter().all(ExecutionRecord::is_ok));
        assert_eq!(records[0].result_repr.as_deref(), Some("None"));
        assert!(records[1].state.is_none() && records[1].result_repr.is_none());
    }

    #[test]
    fn base_prefixed_int_splits_targets() {
        let records = execute_internal(&Payload::from_bytes(&b"I0x1337\n."[..]), &INTERNAL);
        assert!(records[0].is_ok());
        assert_eq!(records[0].result_repr.as_deref(), Some("4919"));
        assert_eq!(records[1].outcome, Outcome::Error);
        assert_eq!(records[1].error_label.as_deref(), Some("decode-failure"));
    }

    #[test]
    fn record_serialization_omits_absent_fields() {
        let records = execute_internal(&Payload::from_bytes(&b"N]."[..]), &INTERNAL);
        let disasm = serde_json::to_value(&records[1]).unwrap();
        assert_eq!(
            disasm,
            serde_json::json!({"target": "internal-disasm", "kind": "disassembler", "outcome": "error",
                               "error_label": "stack-not-empty"})
        );
        let back: ExecutionRecord = serde_json::from_str(&serde_json::to_string(&records[0]).unwrap()).unwrap();
        assert_eq!(back, records[0]);
        assert_eq!(back.state.unwrap().stack.unwrap(), vec!["None".to_string()]);
    }

    #[test]
    fn budget_records_are_not_comparable() {
        let r = ExecutionRecord::budget_exceeded(TargetId::InternalPvm);
        assert!(!r.is_comparable());
        assert!(execute_internal(&Payload::from_bytes(&b"N."[..]), &INTERNAL)[0].is_comparable());
    }

    #[test]
    fn external_target_needs_bridge() {
        let err = Harness::new(&[TargetId::InternalPvm, TargetId::ExtDisassembler], Budget::default(), 3, None);
        assert!(matches!(err, Err(BridgeError::NotConfigured)));
    }
}
