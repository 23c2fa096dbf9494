//! Differential fuzzing of pickle machine implementations.
//!
//! Payloads come from a grammar-based [`generator`], run on the in-process
//! [`pvm`] and [`disasm`] emulations and on external loaders behind a line
//! protocol ([`harness`]), and disagreements are minimized and deduplicated
//! by the [`evaluator`]. [`campaign`] ties the loop together.

pub mod campaign;
pub mod disasm;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod harness;
pub mod hashing;
pub mod label;
pub mod opcodes;
pub mod pvm;

pub use campaign::{run, CampaignConfig, CampaignResult, CampaignStats};
pub use disasm::{disassemble, DisasmResult};
pub use error::{BridgeError, CampaignError, ConfigError};
pub use evaluator::{detect, dedup, minimize, Discrepancy, DiscrepancyKind, Signature, Verdict};
pub use generator::{generate, relaxed_limits, BuffersMenu, Encoding, GenLimits, Payload};
pub use harness::{Budget, ExecutionRecord, Harness, Outcome, TargetId, TargetKind};
pub use label::{ErrorLabel, Fault};
pub use opcodes::{catalog, lookup, read_instruction, ArgCategory, FramingError, OpcodeSpec, ValueCodec};
pub use pvm::{canonical_state, load, resolve_import, CanonicalState, LoadResult, MachineState, StubKind};
