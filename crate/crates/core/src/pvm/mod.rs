//! A pickle machine with the pure reference loader's semantics, instrumented
//! to expose its stack, metastack and memo when it halts.
//!
//! Imports never execute code: every `(module, name)` resolves to an inert
//! stub chosen by [`resolve_import`].

mod buffers;
mod machine;
pub mod pyparse;
mod render;
mod value;

use std::collections::BTreeMap;

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

use crate::generator::{GenLimits, Payload};
use crate::hashing::fnv1a64;
use crate::label::Fault;

pub use buffers::{mixed_items, single_buffer, yielded_values, BufferItem};
pub use render::{float_repr, render, scrub, UNRENDERABLE};
pub use value::{text_from_str, Heap, Obj, ObjId, QualName, StubKind, Text, Value, ViewSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Maximum nesting walked by equality and hashing.
    pub depth_cap: usize,
    /// Largest single allocation the machine will attempt, in bytes.
    pub memory_cap: u64,
    /// Item count for the mixed buffer menus.
    pub buffers_item_count: u32,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            depth_cap: 10_000,
            memory_cap: 512 << 20,
            buffers_item_count: GenLimits::default().buffers_item_count,
        }
    }
}

/// Stack, metastack and memo at halt. Values point into `heap`.
#[derive(Debug, Clone, Default)]
pub struct MachineState {
    pub stack: Vec<Value>,
    /// Saved below-mark stack segments, oldest first.
    pub metastack: Vec<Vec<Value>>,
    pub memo: BTreeMap<BigInt, Value>,
    pub heap: Heap,
}

#[derive(Debug, Clone)]
pub struct LoadResult {
    pub outcome: Result<Value, Fault>,
    pub final_state: MachineState,
}

impl LoadResult {
    pub fn is_ok(&self) -> bool {
        self.outcome.is_ok()
    }

    /// Canonical text of the returned value.
    pub fn result_repr(&self) -> Option<String> {
        self.outcome.as_ref().ok().map(|v| render(v, &self.final_state.heap))
    }
}

/// A [`MachineState`] with every value rendered and scrubbed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalState {
    pub stack: Vec<String>,
    pub metastack: Vec<Vec<String>>,
    /// Decimal memo key to rendered value.
    pub memo: BTreeMap<String, String>,
}

pub fn canonical_state(state: &MachineState) -> CanonicalState {
    let r = |v: &Value| render(v, &state.heap);
    CanonicalState {
        stack: state.stack.iter().map(r).collect(),
        metastack: state.metastack.iter().map(|seg| seg.iter().map(r).collect()).collect(),
        memo: state.memo.iter().map(|(k, v)| (k.to_string(), r(v))).collect(),
    }
}

/// Runs a payload with default options.
pub fn load(payload: &Payload) -> LoadResult {
    load_with(payload, &LoadOptions::default())
}

pub fn load_with(payload: &Payload, opts: &LoadOptions) -> LoadResult {
    machine::run(payload, opts)
}

/// UTF-8 with surrogates passed through, as hashed by the import rule.
fn encode_surrogatepass(cps: &[u32], out: &mut Vec<u8>) {
    for &c in cps {
        match c {
            0..=0x7f => out.push(c as u8),
            0x80..=0x7ff => out.extend([0xc0 | (c >> 6) as u8, 0x80 | (c & 0x3f) as u8]),
            0x800..=0xffff => {
                out.extend([0xe0 | (c >> 12) as u8, 0x80 | ((c >> 6) & 0x3f) as u8, 0x80 | (c & 0x3f) as u8])
            }
            _ => out.extend([
                0xf0 | (c >> 18) as u8,
                0x80 | ((c >> 12) & 0x3f) as u8,
                0x80 | ((c >> 6) & 0x3f) as u8,
                0x80 | (c & 0x3f) as u8,
            ]),
        }
    }
}

pub(crate) fn stub_kind(module: &[u32], name: &[u32]) -> StubKind {
    let mut key = Vec::with_capacity(module.len() + name.len() + 1);
    encode_surrogatepass(module, &mut key);
    key.push(0);
    encode_surrogatepass(name, &mut key);
    match fnv1a64(&key) % 3 {
        0 => StubKind::Function,
        1 => StubKind::Class,
        _ => StubKind::Instance,
    }
}

/// Stub kind an import of `module.name` produces: FNV-1a-64 over
/// `module`, a NUL byte and `name` (UTF-8), modulo 3.
pub fn resolve_import(module: &str, name: &str) -> StubKind {
    stub_kind(&text_from_str(module), &text_from_str(name))
}
