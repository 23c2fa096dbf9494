//! Single-shot re-execution of a stored payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::CampaignError;
use crate::evaluator::{detect, Verdict};
use crate::generator::{BuffersMenu, Encoding, Payload};
use crate::harness::{validate_targets, Budget, ExecutionRecord, Harness, TargetId};

#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub payload: Payload,
    pub records: Vec<ExecutionRecord>,
    pub verdict: Option<Verdict>,
}

/// The loader configuration fields of a meta.json.
#[derive(Deserialize)]
struct LoaderMeta {
    seed: u64,
    encoding: Encoding,
    buffers_choice: BuffersMenu,
}

/// Reads raw pickle bytes from `path`, or `path/payload.pkl` when `path` is a
/// finding directory. A `meta.json` next to the pickle supplies the encoding,
/// buffers choice and seed; without one the payload defaults apply.
pub fn load_payload_file(path: &Path) -> Result<Payload, CampaignError> {
    let file: PathBuf = if path.is_dir() { path.join("payload.pkl") } else { path.to_owned() };
    let bytes = fs::read(&file).map_err(|e| CampaignError::io(&file, e))?;
    let mut payload = Payload::from_bytes(bytes);
    let meta_path = file.with_file_name("meta.json");
    if meta_path.is_file() {
        let text = fs::read_to_string(&meta_path).map_err(|e| CampaignError::io(&meta_path, e))?;
        let meta: LoaderMeta = serde_json::from_str(&text)
            .map_err(|e| CampaignError::Format { path: meta_path.clone(), reason: e.to_string() })?;
        payload.seed = meta.seed;
        payload.encoding = meta.encoding;
        payload.buffers_choice = meta.buffers_choice;
    }
    Ok(payload)
}

pub fn replay(
    path: &Path,
    targets: &[TargetId],
    budget: Budget,
    buffers_item_count: u32,
    bridge_cmd: Option<PathBuf>,
) -> Result<ReplayReport, CampaignError> {
    validate_targets(targets)?;
    let payload = load_payload_file(path)?;
    let mut harness = Harness::new(targets, budget, buffers_item_count, bridge_cmd)?;
    let records = harness.execute(&payload)?;
    let verdict = detect(&records);
    Ok(ReplayReport { payload, records, verdict })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::DiscrepancyKind;

    const INTERNAL: [TargetId; 2] = [TargetId::InternalPvm, TargetId::InternalDisasm];

    fn replay_bytes(bytes: &[u8]) -> ReplayReport {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pkl");
        fs::write(&path, bytes).unwrap();
        replay(&path, &INTERNAL, Budget::default(), 3, None).unwrap()
    }

    #[test]
    fn directed_replays() {
        assert_eq!(replay_bytes(b"I0x1337\n.").verdict.unwrap().kind, DiscrepancyKind::Error);
        assert!(replay_bytes(b"N.").verdict.is_none());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = replay(Path::new("/nonexistent/x.pkl"), &INTERNAL, Budget::default(), 3, None).unwrap_err();
        assert!(matches!(err, CampaignError::Io { .. }));
    }

    #[test]
    fn meta_json_supplies_loader_config() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("payload.pkl"), b"N.").unwrap();
        fs::write(dir.path().join("meta.json"), r#"{"seed": 9, "encoding": "latin-1", "buffers_choice": 4}"#).unwrap();
        let p = load_payload_file(dir.path()).unwrap();
        assert_eq!((p.seed, p.encoding, p.buffers_choice.id()), (9, Encoding::Latin1, 4));
        fs::write(dir.path().join("meta.json"), "{").unwrap();
        assert!(matches!(load_payload_file(dir.path()), Err(CampaignError::Format { .. })));
    }
}
