//! Bridge protocol tests against the reference adapter in fixtures/ and a few
//! deliberately broken stand-ins. Skipped when python3 is not installed.

use std::io::{BufRead, BufReader, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use pvmdiff_core::error::BridgeError;
use pvmdiff_core::harness::{BridgeSession, Budget, Harness, Outcome, TargetId};
use pvmdiff_core::{BuffersMenu, Encoding, Payload};

fn bridge_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pickle_bridge.py")
}

fn have_python() -> bool {
    Command::new("python3")
        .args(["-c", "import pickle, _pickle, pickletools"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

macro_rules! require_python {
    () => {
        if !have_python() {
            eprintln!("python3 not available; skipping");
            return;
        }
    };
}

fn session() -> BridgeSession {
    BridgeSession::spawn(bridge_path(), Budget::default(), 3).expect("bridge starts")
}

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

#[test]
fn none_on_every_external_target() {
    require_python!();
    let mut s = session();
    let p = Payload::from_bytes(&b"N."[..]);
    let pure = s.execute(&p, TargetId::ExtPureDeserializer).unwrap();
    assert_eq!(pure.outcome, Outcome::Ok);
    assert_eq!(pure.result_repr.as_deref(), Some("None"));
    let state = pure.state.unwrap();
    assert_eq!(state.stack, Some(vec![]));
    assert!(state.memo.unwrap().is_empty());
    let c = s.execute(&p, TargetId::ExtCDeserializer).unwrap();
    assert!(c.is_ok());
    assert!(c.state.unwrap().stack.is_none());
    let dis = s.execute(&p, TargetId::ExtDisassembler).unwrap();
    assert!(dis.is_ok() && dis.state.is_none() && dis.result_repr.is_none());
}

#[test]
fn directed_payloads_match_reference_outcomes() {
    require_python!();
    let mut s = session();
    let run = |s: &mut BridgeSession, bytes: &[u8], t| s.execute(&Payload::from_bytes(bytes), t).unwrap();

    let r = run(&mut s, b"I0x1337\n.", TargetId::ExtDisassembler);
    assert_eq!(r.error_label.as_deref(), Some("ValueError"));
    assert_eq!(run(&mut s, b"I0x1337\n.", TargetId::ExtPureDeserializer).result_repr.as_deref(), Some("4919"));

    assert_eq!(run(&mut s, b"I1\x002\n.", TargetId::ExtPureDeserializer).outcome, Outcome::Error);
    assert_eq!(run(&mut s, b"I1\x002\n.", TargetId::ExtCDeserializer).result_repr.as_deref(), Some("1"));

    assert_eq!(run(&mut s, b"F1.0 \n.", TargetId::ExtCDeserializer).outcome, Outcome::Error);
    assert_eq!(run(&mut s, b"N].", TargetId::ExtDisassembler).outcome, Outcome::Error);
    assert_eq!(run(&mut s, b"]q\x00]q\x00.", TargetId::ExtDisassembler).outcome, Outcome::Error);
    assert!(run(&mut s, b"]q\x00]q\x00.", TargetId::ExtCDeserializer).is_ok());
}

#[test]
fn stub_kinds_agree_with_internal_rule() {
    require_python!();
    let mut s = session();
    for (module, name) in [("posix", "system"), ("os", "getcwd"), ("builtins", "eval"), ("a", "b")] {
        let bytes = format!("c{module}\n{name}\n.").into_bytes();
        let r = s.execute(&Payload::from_bytes(bytes), TargetId::ExtPureDeserializer).unwrap();
        let kind = pvmdiff_core::resolve_import(module, name);
        assert_eq!(r.result_repr.unwrap(), format!("stub:{}:{module}.{name}", kind.as_str()));
    }
}

#[test]
fn buffers_and_encoding_reach_the_bridge() {
    require_python!();
    let mut s = session();
    let mut p = Payload::from_bytes(&b"\x80\x05\x97."[..]);
    p.buffers_choice = BuffersMenu::new(2).unwrap();
    p.seed = 1234567;
    let r = s.execute(&p, TargetId::ExtPureDeserializer).unwrap();
    let internal = pvmdiff_core::load(&p).result_repr();
    assert_eq!(r.result_repr, internal);

    let mut p = Payload::from_bytes(&b"U\x02\xc3\xa9."[..]);
    p.encoding = Encoding::Utf8;
    let r = s.execute(&p, TargetId::ExtPureDeserializer).unwrap();
    assert_eq!(r.result_repr.as_deref(), Some("'\\xe9'"));
}

#[test]
fn error_outcomes_recycle_the_process() {
    require_python!();
    let mut s = session();
    s.execute(&Payload::from_bytes(&b"N."[..]), TargetId::ExtPureDeserializer).unwrap();
    assert_eq!(s.restarts(), 0);
    s.execute(&Payload::from_bytes(&b"t."[..]), TargetId::ExtPureDeserializer).unwrap();
    s.execute(&Payload::from_bytes(&b"N."[..]), TargetId::ExtPureDeserializer).unwrap();
    assert_eq!(s.restarts(), 1);
}

#[test]
fn malformed_request_gets_protocol_error() {
    require_python!();
    let mut child = Command::new(bridge_path()).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn().unwrap();
    let mut out = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    out.read_line(&mut line).unwrap();
    assert_eq!(serde_json::from_str::<serde_json::Value>(&line).unwrap(), serde_json::json!({"ready": true}));
    let mut stdin = child.stdin.take().unwrap();
    writeln!(stdin, "{{\"id\": 5, \"target\": \"ext-disassembler\"}}").unwrap();
    writeln!(stdin, "not json").unwrap();
    stdin.flush().unwrap();
    for expected_id in [serde_json::json!(5), serde_json::Value::Null] {
        line.clear();
        out.read_line(&mut line).unwrap();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error_type"], "bridge-protocol");
        assert_eq!(v["outcome"], "error");
        assert_eq!(v["id"], expected_id);
    }
    drop(stdin);
    child.wait().unwrap();
}

#[test]
fn harness_mixes_internal_and_external_targets() {
    require_python!();
    let targets = [TargetId::InternalPvm, TargetId::InternalDisasm, TargetId::ExtPureDeserializer, TargetId::ExtDisassembler];
    let mut h = Harness::new(&targets, Budget::default(), 3, Some(bridge_path())).unwrap();
    let records = h.execute(&Payload::from_bytes(&b"N]."[..])).unwrap();
    assert_eq!(records.iter().map(|r| r.target).collect::<Vec<_>>(), targets);
    let oks: Vec<bool> = records.iter().map(|r| r.is_ok()).collect();
    assert_eq!(oks, vec![true, false, true, false]);
    assert_eq!(records[0].state, records[2].state);
    assert_eq!(records[0].result_repr, records[2].result_repr);
}

#[test]
fn slow_bridge_is_budget_exceeded() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = script(dir.path(), "slow.sh", "#!/bin/sh\necho '{\"ready\": true}'\nread line\nsleep 5\n");
    let budget = Budget { wall: Duration::from_millis(200), ..Budget::default() };
    let mut s = BridgeSession::spawn(cmd, budget, 3).unwrap();
    let r = s.execute(&Payload::from_bytes(&b"N."[..]), TargetId::ExtCDeserializer).unwrap();
    assert_eq!(r.error_label.as_deref(), Some("budget-exceeded"));
    assert!(!r.is_comparable());
}

#[test]
fn dead_bridge_is_unavailable_after_one_retry() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = script(dir.path(), "dies.sh", "#!/bin/sh\necho '{\"ready\": true}'\nexit 0\n");
    let mut s = BridgeSession::spawn(cmd, Budget::default(), 3).unwrap();
    let err = s.execute(&Payload::from_bytes(&b"N."[..]), TargetId::ExtCDeserializer).unwrap_err();
    assert!(matches!(err, BridgeError::Unavailable(_)), "{err}");
    assert_eq!(s.restarts(), 1);
}

#[test]
fn silent_bridge_never_becomes_ready() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = script(dir.path(), "mute.sh", "#!/bin/sh\necho hello\n");
    assert!(matches!(BridgeSession::spawn(cmd, Budget::default(), 3), Err(BridgeError::NotReady(_))));
    let missing = dir.path().join("absent");
    assert!(matches!(BridgeSession::spawn(missing, Budget::default(), 3), Err(BridgeError::Spawn { .. })));
}
