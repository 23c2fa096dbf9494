//! Shared inputs for the benchmarks.

use pvmdiff_core::hashing::payload_seed;
use pvmdiff_core::{generate, GenLimits, Payload};

/// A fixed default-limit corpus.
pub fn corpus(n: u64) -> Vec<Payload> {
    let limits = GenLimits::default();
    (0..n).map(|i| generate(payload_seed(42, i), &limits)).collect()
}
