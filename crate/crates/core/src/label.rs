use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Coarse fault classes. Only the presence of a fault feeds discrepancy
/// detection; the class is kept for triage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorLabel {
    StackUnderflow,
    NoMark,
    BadArgument,
    UnknownOpcode,
    DecodeFailure,
    BuffersExhausted,
    FrameViolation,
    MemoMiss,
    NotImplemented,
    /// Disassembler only: a memo key written twice.
    MemoReuse,
    /// Disassembler only: items left below the result at STOP.
    StackNotEmpty,
    /// Harness only: the target ran out of time or memory.
    BudgetExceeded,
}

impl ErrorLabel {
    pub const ALL: [ErrorLabel; 12] = [
        ErrorLabel::StackUnderflow,
        ErrorLabel::NoMark,
        ErrorLabel::BadArgument,
        ErrorLabel::UnknownOpcode,
        ErrorLabel::DecodeFailure,
        ErrorLabel::BuffersExhausted,
        ErrorLabel::FrameViolation,
        ErrorLabel::MemoMiss,
        ErrorLabel::NotImplemented,
        ErrorLabel::MemoReuse,
        ErrorLabel::StackNotEmpty,
        ErrorLabel::BudgetExceeded,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorLabel::StackUnderflow => "stack-underflow",
            ErrorLabel::NoMark => "no-mark",
            ErrorLabel::BadArgument => "bad-argument",
            ErrorLabel::UnknownOpcode => "unknown-opcode",
            ErrorLabel::DecodeFailure => "decode-failure",
            ErrorLabel::BuffersExhausted => "buffers-exhausted",
            ErrorLabel::FrameViolation => "frame-violation",
            ErrorLabel::MemoMiss => "memo-miss",
            ErrorLabel::NotImplemented => "not-implemented",
            ErrorLabel::MemoReuse => "memo-reuse",
            ErrorLabel::StackNotEmpty => "stack-not-empty",
            ErrorLabel::BudgetExceeded => "budget-exceeded",
        }
    }
}

impl fmt::Display for ErrorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorLabel::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| format!("unknown error label {s:?}"))
    }
}

/// A fault with its class and a human-readable reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub label: ErrorLabel,
    pub detail: String,
    /// Byte offset of the faulting opcode, when known.
    pub offset: Option<usize>,
}

impl Fault {
    pub fn new(label: ErrorLabel, detail: impl Into<String>) -> Self {
        Fault { label, detail: detail.into(), offset: None }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset.get_or_insert(offset);
        self
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.offset {
            Some(o) => write!(f, "{} at offset {}: {}", self.label, o, self.detail),
            None => write!(f, "{}: {}", self.label, self.detail),
        }
    }
}

impl std::error::Error for Fault {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for l in ErrorLabel::ALL {
            assert_eq!(l.as_str().parse::<ErrorLabel>().unwrap(), l);
            assert_eq!(serde_json::to_string(&l).unwrap(), format!("\"{l}\""));
        }
    }
}
