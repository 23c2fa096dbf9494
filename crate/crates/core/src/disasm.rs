//! A static pickle checker with the reference disassembler's strictness.
//!
//! Nothing is executed. Instructions are framed through [`opcodes`], their
//! arguments decoded the way the disassembler decodes them (integers in base
//! 10, protocol-0 strings as escaped ASCII whatever the payload encoding), and
//! a symbolic stack of anonymous items and marks is checked against each
//! opcode's declared stack effect. Checking stops at the first STOP.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use num_bigint::BigInt;

use crate::generator::Payload;
use crate::label::{ErrorLabel, Fault};
use crate::opcodes::{self, ArgCategory, FramingError, Instruction, StackSlot, ValueCodec};
use crate::pvm::pyparse;

/// One listed instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListingLine {
    pub offset: usize,
    pub name: &'static str,
    pub arg: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisasmResult {
    pub outcome: Result<(), Fault>,
    /// Instructions before the faulting one, or up to and including STOP.
    pub listing: Vec<ListingLine>,
}

impl DisasmResult {
    pub fn is_ok(&self) -> bool {
        self.outcome.is_ok()
    }
}

impl fmt::Display for DisasmResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for line in &self.listing {
            if line.arg.is_empty() {
                writeln!(f, "{:>5}: {}", line.offset, line.name)?;
            } else {
                writeln!(f, "{:>5}: {} {}", line.offset, line.name, line.arg)?;
            }
        }
        if let Err(fault) = &self.outcome {
            writeln!(f, "error: {fault}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Item,
    Mark,
}

/// Decoded argument, kept only as far as the checks need it.
enum Arg {
    None,
    Int(BigInt),
    Text(String),
}

fn decode_failure(detail: impl Into<String>) -> Fault {
    Fault::new(ErrorLabel::DecodeFailure, detail)
}

fn render_bytes(b: &[u8]) -> String {
    let mut s = String::from("b'");
    for &c in b {
        match c {
            b'\'' => s.push_str("\\'"),
            b'\\' => s.push_str("\\\\"),
            0x20..=0x7e => s.push(c as char),
            _ => {
                let _ = write!(s, "\\x{c:02x}");
            }
        }
    }
    s.push('\'');
    s
}

fn render_text(cps: &[u32]) -> String {
    let mut s = String::from("'");
    for &c in cps {
        match c {
            0x27 => s.push_str("\\'"),
            0x5c => s.push_str("\\\\"),
            0x20..=0x7e => s.push(char::from(c as u8)),
            0..=0xff => {
                let _ = write!(s, "\\x{c:02x}");
            }
            0x100..=0xffff => {
                let _ = write!(s, "\\u{c:04x}");
            }
            _ => {
                let _ = write!(s, "\\U{c:08x}");
            }
        }
    }
    s.push('\'');
    s
}

/// `read_stringnl` with escape decoding: the result must be ASCII.
fn escaped_ascii(raw: &[u8]) -> Result<Vec<u32>, Fault> {
    let decoded = pyparse::escape_decode(raw).ok_or_else(|| decode_failure("invalid escape in string argument"))?;
    pyparse::decode_ascii(&decoded).ok_or_else(|| decode_failure("non-ASCII string argument"))
}

/// Integer line argument; `00` and `01` are the protocol-0 booleans.
fn decimal_short(raw: &[u8]) -> Result<Arg, Fault> {
    match raw {
        b"00" => Ok(Arg::Int(BigInt::from(0))),
        b"01" => Ok(Arg::Int(BigInt::from(1))),
        _ => pyparse::parse_int(raw, 10)
            .map(Arg::Int)
            .ok_or_else(|| decode_failure("invalid literal for int() with base 10")),
    }
}

fn le_uint(b: &[u8]) -> u64 {
    let mut buf = [0u8; 8];
    buf[..b.len()].copy_from_slice(b);
    u64::from_le_bytes(buf)
}

fn le_int(b: &[u8]) -> i64 {
    let shift = 64 - 8 * b.len() as u32;
    ((le_uint(b) << shift) as i64) >> shift
}

fn decode_arg(insn: &Instruction<'_>) -> Result<Arg, Fault> {
    let raw = insn.arg;
    let delimited = matches!(insn.spec.category, ArgCategory::Delimited { .. });
    let arg = match insn.spec.value_codec {
        ValueCodec::None => Arg::None,
        ValueCodec::AsciiInt => decimal_short(raw)?,
        ValueCodec::MemoIndex if delimited => decimal_short(raw)?,
        ValueCodec::MemoIndex => Arg::Int(BigInt::from(le_uint(raw))),
        ValueCodec::AsciiLong => {
            let digits = raw.strip_suffix(b"L").unwrap_or(raw);
            let n = pyparse::parse_int(digits, 10)
                .ok_or_else(|| decode_failure("invalid literal for int() with base 10"))?;
            Arg::Text(format!("{n}L"))
        }
        ValueCodec::AsciiFloat => {
            let x = pyparse::parse_float(raw).ok_or_else(|| decode_failure("could not convert string to float"))?;
            Arg::Text(crate::pvm::float_repr(x))
        }
        ValueCodec::QuotedString => {
            let inner = [b'"', b'\'']
                .into_iter()
                .find(|&q| raw.first() == Some(&q))
                .map(|q| {
                    if raw.last() == Some(&q) {
                        // A lone quote character counts as both ends.
                        Ok(raw.get(1..raw.len().saturating_sub(1)).unwrap_or_default())
                    } else {
                        Err(decode_failure("string quote mismatch"))
                    }
                })
                .unwrap_or_else(|| Err(decode_failure("no string quotes around argument")))?;
            Arg::Text(render_text(&escaped_ascii(inner)?))
        }
        ValueCodec::RawString if delimited => Arg::Text(render_text(&escaped_ascii(raw)?)),
        ValueCodec::RawString => {
            Arg::Text(render_text(&raw.iter().map(|&b| u32::from(b)).collect::<Vec<_>>()))
        }
        ValueCodec::NamePair => {
            let split = raw.iter().position(|&b| b == opcodes::NEWLINE).unwrap_or(raw.len());
            let module = escaped_ascii(&raw[..split])?;
            let name = escaped_ascii(raw.get(split + 1..).unwrap_or_default())?;
            let text = |cps: &[u32]| cps.iter().filter_map(|&c| char::from_u32(c)).collect::<String>();
            Arg::Text(format!("'{} {}'", text(&module), text(&name)))
        }
        ValueCodec::UnicodeEscaped => {
            let cps = pyparse::raw_unicode_escape(raw)
                .ok_or_else(|| decode_failure("truncated or invalid unicode escape"))?;
            Arg::Text(render_text(&cps))
        }
        ValueCodec::Utf8String => {
            let cps = pyparse::decode_utf8(raw, true).ok_or_else(|| decode_failure("invalid utf-8 argument"))?;
            Arg::Text(render_text(&cps))
        }
        ValueCodec::RawBytes => Arg::Text(render_bytes(raw)),
        ValueCodec::LittleEndianInt if !matches!(insn.spec.category, ArgCategory::FixedLen(_)) => {
            Arg::Int(pyparse::decode_long(raw))
        }
        ValueCodec::LittleEndianInt => Arg::Int(BigInt::from(le_int(raw))),
        ValueCodec::LittleEndianUint | ValueCodec::ProtocolByte | ValueCodec::FrameLength => {
            Arg::Int(BigInt::from(le_uint(raw)))
        }
        ValueCodec::Float64BigEndian => {
            let bits: [u8; 8] = raw.try_into().map_err(|_| decode_failure("float8 argument length"))?;
            Arg::Text(crate::pvm::float_repr(f64::from_be_bytes(bits)))
        }
    };
    Ok(arg)
}

struct Checker {
    stack: Vec<Slot>,
    marks: usize,
    memo: BTreeSet<BigInt>,
}

impl Checker {
    fn step(&mut self, insn: &Instruction<'_>, arg: &Arg) -> Result<(), Fault> {
        let spec = insn.spec;
        let before = spec.stack_before;
        let mut to_pop = before.len();
        let pops_mark = before.contains(&StackSlot::Mark)
            || (spec.name == "POP" && self.stack.last() == Some(&Slot::Mark));
        if pops_mark {
            if self.marks == 0 {
                return Err(Fault::new(ErrorLabel::NoMark, "no MARK exists on stack"));
            }
            self.marks -= 1;
            // Marks consumed as ordinary items leave the mark count ahead of
            // the stack; running off the bottom is a failed check too.
            loop {
                match self.stack.pop() {
                    Some(Slot::Mark) => break,
                    Some(Slot::Item) => {}
                    None => return Err(Fault::new(ErrorLabel::NoMark, "mark missing from stack")),
                }
            }
            to_pop = before.iter().position(|s| *s == StackSlot::Mark).unwrap_or(0);
        }

        let mut pushed = None;
        match spec.name {
            "PUT" | "BINPUT" | "LONG_BINPUT" | "MEMOIZE" => {
                let key = match arg {
                    Arg::Int(k) if spec.name != "MEMOIZE" => k.clone(),
                    _ => BigInt::from(self.memo.len()),
                };
                if self.memo.contains(&key) {
                    return Err(Fault::new(ErrorLabel::MemoReuse, format!("memo key {key} already defined")));
                }
                match self.stack.last() {
                    None => {
                        return Err(Fault::new(ErrorLabel::StackUnderflow, "stack is empty, cannot store into memo"))
                    }
                    Some(Slot::Mark) => {
                        return Err(Fault::new(ErrorLabel::BadArgument, "cannot store a mark in the memo"))
                    }
                    Some(Slot::Item) => {
                        self.memo.insert(key);
                    }
                }
            }
            "GET" | "BINGET" | "LONG_BINGET" => {
                let found = matches!(arg, Arg::Int(k) if self.memo.contains(k));
                if !found {
                    return Err(Fault::new(ErrorLabel::MemoMiss, "memo key has never been stored into"));
                }
                pushed = Some(Slot::Item);
            }
            _ => {}
        }

        if self.stack.len() < to_pop {
            return Err(Fault::new(
                ErrorLabel::StackUnderflow,
                format!("tries to pop {} items from stack with only {} items", to_pop, self.stack.len()),
            ));
        }
        self.stack.truncate(self.stack.len() - to_pop);
        if let Some(slot) = pushed {
            self.stack.push(slot);
            return Ok(());
        }
        for slot in spec.stack_after {
            match slot {
                StackSlot::Mark => {
                    self.marks += 1;
                    self.stack.push(Slot::Mark);
                }
                _ => self.stack.push(Slot::Item),
            }
        }
        Ok(())
    }
}

/// Checks the pickle bytes of `payload`. The payload's encoding and buffers
/// are ignored.
pub fn disassemble(payload: &Payload) -> DisasmResult {
    disassemble_bytes(&payload.pickle_bytes)
}

pub fn disassemble_bytes(bytes: &[u8]) -> DisasmResult {
    let mut listing = Vec::new();
    let mut checker = Checker { stack: Vec::new(), marks: 0, memo: BTreeSet::new() };
    let mut pos = 0;
    let outcome = loop {
        if pos >= bytes.len() {
            break Err(decode_failure("pickle exhausted before seeing STOP").at(pos));
        }
        let insn = match opcodes::read_instruction(bytes, pos) {
            Ok((insn, next)) => {
                pos = next;
                insn
            }
            Err(err @ FramingError::UnknownOpcode { .. }) => {
                break Err(Fault::new(ErrorLabel::UnknownOpcode, err.to_string()).at(err.offset()))
            }
            Err(err) => break Err(decode_failure(err.to_string()).at(err.offset())),
        };
        let arg = match decode_arg(&insn) {
            Ok(arg) => arg,
            Err(fault) => break Err(fault.at(insn.offset)),
        };
        if let Err(fault) = checker.step(&insn, &arg) {
            break Err(fault.at(insn.offset));
        }
        let rendered = match &arg {
            Arg::None => String::new(),
            Arg::Int(n) => n.to_string(),
            Arg::Text(t) => t.clone(),
        };
        listing.push(ListingLine { offset: insn.offset, name: insn.spec.name, arg: rendered });
        if insn.spec.is_stop() {
            break if checker.stack.is_empty() {
                Ok(())
            } else {
                Err(Fault::new(
                    ErrorLabel::StackNotEmpty,
                    format!("stack not empty after STOP: {} items", checker.stack.len()),
                )
                .at(insn.offset))
            };
        }
    };
    DisasmResult { outcome, listing }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(bytes: &[u8]) -> Option<ErrorLabel> {
        disassemble_bytes(bytes).outcome.err().map(|f| f.label)
    }

    #[test]
    fn quirk_payloads() {
        assert_eq!(label(b"I0x1337\n."), Some(ErrorLabel::DecodeFailure));
        assert_eq!(label(b"N]."), Some(ErrorLabel::StackNotEmpty));
        assert_eq!(label(b"]q\x00]q\x00."), Some(ErrorLabel::MemoReuse));
        assert_eq!(label(b"N."), None);
        assert_eq!(label(b"]."), None);
    }

    #[test]
    fn listing_of_none() {
        let r = disassemble_bytes(b"N.");
        assert!(r.is_ok());
        let names: Vec<_> = r.listing.iter().map(|l| (l.offset, l.name)).collect();
        assert_eq!(names, vec![(0, "NONE"), (1, "STOP")]);
    }

    #[test]
    fn listing_stops_before_fault() {
        let r = disassemble_bytes(b"NI0x1\n.");
        assert_eq!(r.outcome.as_ref().unwrap_err().offset, Some(1));
        assert_eq!(r.listing.len(), 1);
    }

    #[test]
    fn integer_forms() {
        assert_eq!(label(b"I01\n."), None);
        assert_eq!(label(b"I 12 \n."), None);
        assert_eq!(label(b"I1_0\n."), None);
        assert_eq!(label(b"I1\x002\n."), Some(ErrorLabel::DecodeFailure));
        assert_eq!(label(b"L12L\n."), None);
        assert_eq!(label(b"L0x1L\n."), Some(ErrorLabel::DecodeFailure));
        assert_eq!(label(b"F1.0 \n."), None);
    }

    #[test]
    fn strings_ignore_payload_encoding() {
        assert_eq!(label(b"S'abc'\n."), None);
        assert_eq!(label(b"S'\\xe9'\n."), Some(ErrorLabel::DecodeFailure));
        assert_eq!(label(b"S'abc\n."), Some(ErrorLabel::DecodeFailure));
        assert_eq!(label(b"Sabc\n."), Some(ErrorLabel::DecodeFailure));
        assert_eq!(label(b"S'\n."), None);
        assert_eq!(label(b"U\x01\xe9."), None);
        assert_eq!(label(b"X\x01\x00\x00\x00\xe9."), Some(ErrorLabel::DecodeFailure));
        assert_eq!(label(b"V\\u00e9\n."), None);
        assert_eq!(label(b"V\\u00\n."), Some(ErrorLabel::DecodeFailure));
    }

    #[test]
    fn marks_and_stack() {
        assert_eq!(label(b"(I1\nI2\nt."), None);
        assert_eq!(label(b"t."), Some(ErrorLabel::NoMark));
        assert_eq!(label(b"(0N."), None);
        assert_eq!(label(b"0."), Some(ErrorLabel::StackUnderflow));
        assert_eq!(label(b"."), Some(ErrorLabel::StackUnderflow));
        assert_eq!(label(b"(e."), Some(ErrorLabel::StackUnderflow));
        // TUPLE1 swallows the mark as an item; the later TUPLE finds none.
        assert_eq!(label(b"(\x85t."), Some(ErrorLabel::NoMark));
        // STOP takes the mark as its result.
        assert_eq!(label(b"(."), None);
    }

    #[test]
    fn memo_checks() {
        assert_eq!(label(b"Np0\ng0\n."), Some(ErrorLabel::StackNotEmpty));
        assert_eq!(label(b"Np0\n0g0\n."), None);
        assert_eq!(label(b"g0\n."), Some(ErrorLabel::MemoMiss));
        assert_eq!(label(b"p0\nN."), Some(ErrorLabel::StackUnderflow));
        assert_eq!(label(b"(p0\n."), Some(ErrorLabel::BadArgument));
        // `00` is False, which is the same key as 0.
        assert_eq!(label(b"Np00\np0\n."), Some(ErrorLabel::MemoReuse));
        assert_eq!(label(b"N\x94\x94."), None);
        assert_eq!(label(b"Nq\x01\x94\x94."), Some(ErrorLabel::MemoReuse));
        assert_eq!(label(b"N\x94q\x01."), None);
    }

    #[test]
    fn frames_are_annotations() {
        assert_eq!(label(b"\x95\x01\x00\x00\x00\x00\x00\x00\x00J\x01\x00\x00\x00."), None);
        assert_eq!(label(b"\x80\x09N."), None);
    }

    #[test]
    fn ignores_bytes_after_stop() {
        assert_eq!(label(b"N.\xff"), None);
        assert_eq!(label(b"N"), Some(ErrorLabel::DecodeFailure));
    }

    proptest! {
        #[test]
        fn subsumes_framing(bytes in proptest::collection::vec(any::<u8>(), 0..40)) {
            let r = disassemble_bytes(&bytes);
            let mut pos = 0;
            while pos < bytes.len() {
                match opcodes::read_instruction(&bytes, pos) {
                    Ok((insn, next)) => {
                        if insn.spec.is_stop() {
                            return Ok(());
                        }
                        pos = next;
                    }
                    Err(err) => {
                        let fault = r.outcome.clone().unwrap_err();
                        prop_assert!(fault.offset.unwrap() <= err.offset());
                        return Ok(());
                    }
                }
            }
            prop_assert!(r.outcome.is_err());
        }

        #[test]
        fn listing_offsets_follow_framing(seed in any::<u64>()) {
            let p = crate::generator::generate(seed, &Default::default());
            let r = disassemble(&p);
            let framed = opcodes::parse_all(&p.pickle_bytes).unwrap();
            for (line, insn) in r.listing.iter().zip(&framed) {
                prop_assert_eq!(line.offset, insn.offset);
                prop_assert_eq!(line.name, insn.spec.name);
            }
        }
    }
}
