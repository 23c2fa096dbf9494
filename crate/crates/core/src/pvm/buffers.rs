//! The out-of-band buffer menu. Contents derive from the payload seed through
//! SplitMix64 so an external loader can rebuild the same `buffers` argument.
//!
//! Mixed item `i` (menus 2 and 5) uses the `i`-th SplitMix64 output `x`:
//! `i % 3 == 0` is the 8 little-endian bytes of `x`, `1` is `x` as 16
//! lowercase hex digits, `2` is `x` as an unsigned integer. Menus 3 and 4 are
//! the little-endian bytes of the first output, as a bytearray and as bytes.

use std::rc::Rc;

use crate::generator::BuffersMenu;
use crate::hashing::SplitMix64;

use super::value::{text_from_str, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BufferItem {
    Bytes([u8; 8]),
    Text(String),
    Int(u64),
}

impl BufferItem {
    pub fn to_value(&self) -> Value {
        match self {
            BufferItem::Bytes(b) => Value::Bytes(Rc::from(&b[..])),
            BufferItem::Text(t) => Value::Str(text_from_str(t)),
            BufferItem::Int(i) => Value::int(*i),
        }
    }
}

pub fn mixed_items(seed: u64, count: u32) -> Vec<BufferItem> {
    let mut rng = SplitMix64::new(seed);
    (0..count)
        .map(|i| {
            let x = rng.next_u64();
            match i % 3 {
                0 => BufferItem::Bytes(x.to_le_bytes()),
                1 => BufferItem::Text(format!("{x:016x}")),
                _ => BufferItem::Int(x),
            }
        })
        .collect()
}

pub fn single_buffer(seed: u64) -> [u8; 8] {
    SplitMix64::new(seed).next_u64().to_le_bytes()
}

/// The values `iter(buffers)` yields for a menu choice, or `None` when the
/// loader gets no buffers at all.
pub fn yielded_values(menu: BuffersMenu, seed: u64, count: u32) -> Option<Vec<Value>> {
    match menu.id() {
        0 => None,
        1 => Some(Vec::new()),
        2 | 5 => Some(mixed_items(seed, count).iter().map(BufferItem::to_value).collect()),
        // Iterating a byte buffer yields its bytes as integers.
        _ => Some(single_buffer(seed).iter().map(|&b| Value::int(b)).collect()),
    }
}
