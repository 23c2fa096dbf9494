//! Client side of the bridge wire protocol.
//!
//! The bridge is an executable started with no arguments and piped standard
//! streams. It announces itself with the line `{"ready": true}` and then
//! answers each request line with exactly one response line. Requests and
//! responses are single-line UTF-8 JSON objects; payload bytes travel as
//! padded standard base64.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{Budget, ExecutionRecord, ExposedState, Outcome, TargetId};
use crate::error::BridgeError;
use crate::generator::{BuffersMenu, Encoding, Payload};
use crate::label::ErrorLabel;

/// Requests served before a session is replaced even without errors.
pub const RECYCLE_EVERY: u32 = 1000;
/// Error type the bridge reports for a request it could not parse.
pub const PROTOCOL_ERROR: &str = "bridge-protocol";

const READY_TIMEOUT: Duration = Duration::from_secs(15);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeRequest {
    pub id: u64,
    pub payload_b64: String,
    pub encoding: Encoding,
    pub buffers_choice: BuffersMenu,
    pub seed: u64,
    /// Item count for the mixed buffer menus.
    pub buffers_items: u32,
    pub target: TargetId,
}

impl BridgeRequest {
    pub fn new(id: u64, payload: &Payload, target: TargetId, buffers_items: u32) -> Self {
        BridgeRequest {
            id,
            payload_b64: STANDARD.encode(&payload.pickle_bytes),
            encoding: payload.encoding,
            buffers_choice: payload.buffers_choice,
            seed: payload.seed,
            buffers_items,
            target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeResponse {
    pub id: Option<u64>,
    #[serde(default)]
    pub target: Option<TargetId>,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_repr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metastack: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memo: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl BridgeResponse {
    /// The record for `target`. Disassembler responses never carry state.
    pub fn into_record(self, target: TargetId) -> ExecutionRecord {
        let error_label = match self.outcome {
            Outcome::Ok => None,
            Outcome::Error => Some(match self.error_type.as_deref() {
                Some("MemoryError") => ErrorLabel::BudgetExceeded.as_str().to_owned(),
                Some(t) => t.to_owned(),
                None => "error".to_owned(),
            }),
        };
        let deserializer = target.kind() == super::TargetKind::Deserializer;
        let state = ExposedState { stack: self.stack, metastack: self.metastack, memo: self.memo };
        let has_state = state.stack.is_some() || state.metastack.is_some() || state.memo.is_some();
        ExecutionRecord {
            target,
            kind: target.kind(),
            outcome: self.outcome,
            error_label,
            state: (deserializer && has_state).then_some(state),
            result_repr: if deserializer { self.result_repr } else { None },
        }
    }
}

#[derive(Debug)]
struct Process {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<io::Result<String>>,
}

impl Process {
    fn spawn(cmd: &Path, memory_bytes: u64) -> Result<Self, BridgeError> {
        let mut command = Command::new(cmd);
        command.stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::null());
        limit_memory(&mut command, memory_bytes);
        let mut child = command.spawn().map_err(|source| BridgeError::Spawn { cmd: cmd.to_owned(), source })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut process = Process { child, stdin, lines };
        let ready = match process.lines.recv_timeout(READY_TIMEOUT) {
            Ok(Ok(line)) => serde_json::from_str::<serde_json::Value>(&line)
                .map(|v| v.get("ready") == Some(&serde_json::Value::Bool(true)))
                .unwrap_or(false),
            _ => false,
        };
        if !ready {
            process.kill();
            return Err(BridgeError::NotReady(cmd.to_owned()));
        }
        Ok(process)
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Process {
    fn drop(&mut self) {
        self.kill();
    }
}

#[cfg(unix)]
fn limit_memory(command: &mut Command, bytes: u64) {
    use std::os::unix::process::CommandExt;
    let limit = libc::rlimit { rlim_cur: bytes as libc::rlim_t, rlim_max: bytes as libc::rlim_t };
    // SAFETY: setrlimit is async-signal-safe and touches no parent state.
    unsafe {
        command.pre_exec(move || {
            if libc::setrlimit(libc::RLIMIT_AS, &limit) != 0 {
                return Err(io::Error::last_os_error());
            }
            Ok(())
        });
    }
}

#[cfg(not(unix))]
fn limit_memory(_command: &mut Command, _bytes: u64) {}

enum Exchange {
    Response(BridgeResponse),
    TimedOut,
    /// The process died, closed its streams or answered out of protocol.
    Broken(String),
}

/// One bridge subprocess plus the bookkeeping to restart it.
#[derive(Debug)]
pub struct BridgeSession {
    cmd: PathBuf,
    budget: Budget,
    buffers_items: u32,
    process: Option<Process>,
    next_id: u64,
    served: u32,
    restarts: u64,
}

impl BridgeSession {
    pub fn spawn(cmd: impl Into<PathBuf>, budget: Budget, buffers_items: u32) -> Result<Self, BridgeError> {
        let cmd = cmd.into();
        let process = Process::spawn(&cmd, budget.memory_bytes)?;
        Ok(BridgeSession { cmd, budget, buffers_items, process: Some(process), next_id: 1, served: 0, restarts: 0 })
    }

    pub fn command(&self) -> &Path {
        &self.cmd
    }

    /// Number of processes started after the first.
    pub fn restarts(&self) -> u64 {
        self.restarts
    }

    fn recycle(&mut self) {
        self.process = None;
        self.served = 0;
    }

    fn ensure_process(&mut self) -> Result<&mut Process, BridgeError> {
        if self.process.is_none() {
            self.process = Some(Process::spawn(&self.cmd, self.budget.memory_bytes)?);
            self.restarts += 1;
        }
        Ok(self.process.as_mut().expect("just spawned"))
    }

    fn exchange(&mut self, request: &BridgeRequest) -> Result<Exchange, BridgeError> {
        let wall = self.budget.wall;
        let process = self.ensure_process()?;
        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        if let Err(e) = process.stdin.write_all(line.as_bytes()).and_then(|()| process.stdin.flush()) {
            return Ok(Exchange::Broken(format!("write failed: {e}")));
        }
        let reply = match process.lines.recv_timeout(wall) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Ok(Exchange::Broken(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => return Ok(Exchange::TimedOut),
            Err(RecvTimeoutError::Disconnected) => return Ok(Exchange::Broken("bridge closed its output".into())),
        };
        Ok(match serde_json::from_str::<BridgeResponse>(&reply) {
            Ok(resp) if resp.id == Some(request.id) => Exchange::Response(resp),
            Ok(resp) => Exchange::Broken(format!("response id {:?} for request {}", resp.id, request.id)),
            Err(e) => Exchange::Broken(format!("unparseable response: {e}")),
        })
    }

    /// Runs `payload` on one external target. A dead bridge is restarted and
    /// the request retried once before giving up.
    pub fn execute(&mut self, payload: &Payload, target: TargetId) -> Result<ExecutionRecord, BridgeError> {
        debug_assert!(target.is_external());
        let mut last_problem = String::new();
        for attempt in 0..2 {
            let request = BridgeRequest::new(self.next_id, payload, target, self.buffers_items);
            self.next_id += 1;
            let exchange = match self.exchange(&request) {
                Ok(x) => x,
                Err(e) if attempt == 0 => {
                    last_problem = e.to_string();
                    continue;
                }
                Err(e) => return Err(BridgeError::Unavailable(e.to_string())),
            };
            match exchange {
                Exchange::Response(resp) => {
                    if resp.error_type.as_deref() == Some(PROTOCOL_ERROR) {
                        self.recycle();
                        return Err(BridgeError::Protocol(resp.detail.unwrap_or_default()));
                    }
                    self.served += 1;
                    if resp.outcome == Outcome::Error || self.served >= RECYCLE_EVERY {
                        self.recycle();
                    }
                    return Ok(resp.into_record(target));
                }
                Exchange::TimedOut => {
                    self.recycle();
                    return Ok(ExecutionRecord::budget_exceeded(target));
                }
                Exchange::Broken(why) => {
                    self.recycle();
                    last_problem = why;
                }
            }
        }
        Err(BridgeError::Unavailable(last_problem))
    }
}
