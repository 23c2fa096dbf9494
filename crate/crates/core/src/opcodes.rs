//! Static catalog of pickle opcodes for protocols 0 through 5, plus the
//! framing logic shared by the generator, the PVM and the disassembler.
//!
//! The table mirrors the reference disassembler's opcode table: one entry per
//! opcode byte, its argument layout, how the argument bytes turn into a value,
//! the protocol that introduced it, and its declared stack effect.

use std::fmt;

use thiserror::Error;

/// How an opcode's argument is laid out in the byte stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArgCategory {
    NoArg,
    /// Exactly `n` bytes follow the opcode; `n` is 1, 2, 4 or 8.
    FixedLen(u8),
    /// A little-endian length prefix of `width` bytes, then that many bytes.
    LenPrefixed { width: u8, signed: bool },
    /// `lines` consecutive arguments, each ended by `terminator`.
    Delimited { terminator: u8, lines: u8 },
}

/// How the raw argument bytes decode into a runtime value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueCodec {
    None,
    AsciiInt,
    AsciiLong,
    AsciiFloat,
    QuotedString,
    /// 8-bit string; the executor picks the text decoding.
    RawString,
    /// `module\nname` pair naming an importable object.
    NamePair,
    UnicodeEscaped,
    Utf8String,
    RawBytes,
    LittleEndianInt,
    LittleEndianUint,
    Float64BigEndian,
    MemoIndex,
    ProtocolByte,
    FrameLength,
}

/// One slot of an opcode's declared stack effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StackSlot {
    Any,
    Mark,
    /// Every item above the topmost mark.
    Slice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OpcodeSpec {
    pub code: u8,
    pub name: &'static str,
    pub category: ArgCategory,
    pub value_codec: ValueCodec,
    pub min_protocol: u8,
    pub stack_before: &'static [StackSlot],
    pub stack_after: &'static [StackSlot],
}

impl OpcodeSpec {
    pub fn is_stop(&self) -> bool {
        self.code == STOP
    }
}

impl fmt::Display for OpcodeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

pub const STOP: u8 = b'.';
pub const NEWLINE: u8 = b'\n';

use ArgCategory::*;
use StackSlot::{Any, Mark, Slice};
use ValueCodec as V;

const NL: ArgCategory = Delimited { terminator: NEWLINE, lines: 1 };
const NL_PAIR: ArgCategory = Delimited { terminator: NEWLINE, lines: 2 };
const U1: ArgCategory = LenPrefixed { width: 1, signed: false };
const U4: ArgCategory = LenPrefixed { width: 4, signed: false };
const S4: ArgCategory = LenPrefixed { width: 4, signed: true };
const U8: ArgCategory = LenPrefixed { width: 8, signed: false };

const fn op(
    code: u8,
    name: &'static str,
    category: ArgCategory,
    value_codec: ValueCodec,
    min_protocol: u8,
    stack_before: &'static [StackSlot],
    stack_after: &'static [StackSlot],
) -> OpcodeSpec {
    OpcodeSpec { code, name, category, value_codec, min_protocol, stack_before, stack_after }
}

// Sorted by code byte; `lookup` relies on it.
static CATALOG: [OpcodeSpec; 68] = [
    op(b'(', "MARK", NoArg, V::None, 0, &[], &[Mark]),
    op(b')', "EMPTY_TUPLE", NoArg, V::None, 1, &[], &[Any]),
    op(b'.', "STOP", NoArg, V::None, 0, &[Any], &[]),
    op(b'0', "POP", NoArg, V::None, 0, &[Any], &[]),
    op(b'1', "POP_MARK", NoArg, V::None, 1, &[Mark, Slice], &[]),
    op(b'2', "DUP", NoArg, V::None, 0, &[Any], &[Any, Any]),
    op(b'B', "BINBYTES", U4, V::RawBytes, 3, &[], &[Any]),
    op(b'C', "SHORT_BINBYTES", U1, V::RawBytes, 3, &[], &[Any]),
    op(b'F', "FLOAT", NL, V::AsciiFloat, 0, &[], &[Any]),
    op(b'G', "BINFLOAT", FixedLen(8), V::Float64BigEndian, 1, &[], &[Any]),
    op(b'I', "INT", NL, V::AsciiInt, 0, &[], &[Any]),
    op(b'J', "BININT", FixedLen(4), V::LittleEndianInt, 1, &[], &[Any]),
    op(b'K', "BININT1", FixedLen(1), V::LittleEndianUint, 1, &[], &[Any]),
    op(b'L', "LONG", NL, V::AsciiLong, 0, &[], &[Any]),
    op(b'M', "BININT2", FixedLen(2), V::LittleEndianUint, 1, &[], &[Any]),
    op(b'N', "NONE", NoArg, V::None, 0, &[], &[Any]),
    op(b'P', "PERSID", NL, V::RawString, 0, &[], &[Any]),
    op(b'Q', "BINPERSID", NoArg, V::None, 1, &[Any], &[Any]),
    op(b'R', "REDUCE", NoArg, V::None, 0, &[Any, Any], &[Any]),
    op(b'S', "STRING", NL, V::QuotedString, 0, &[], &[Any]),
    op(b'T', "BINSTRING", S4, V::RawString, 1, &[], &[Any]),
    op(b'U', "SHORT_BINSTRING", U1, V::RawString, 1, &[], &[Any]),
    op(b'V', "UNICODE", NL, V::UnicodeEscaped, 0, &[], &[Any]),
    op(b'X', "BINUNICODE", U4, V::Utf8String, 1, &[], &[Any]),
    op(b']', "EMPTY_LIST", NoArg, V::None, 1, &[], &[Any]),
    op(b'a', "APPEND", NoArg, V::None, 0, &[Any, Any], &[Any]),
    op(b'b', "BUILD", NoArg, V::None, 0, &[Any, Any], &[Any]),
    op(b'c', "GLOBAL", NL_PAIR, V::NamePair, 0, &[], &[Any]),
    op(b'd', "DICT", NoArg, V::None, 0, &[Mark, Slice], &[Any]),
    op(b'e', "APPENDS", NoArg, V::None, 1, &[Any, Mark, Slice], &[Any]),
    op(b'g', "GET", NL, V::MemoIndex, 0, &[], &[Any]),
    op(b'h', "BINGET", FixedLen(1), V::MemoIndex, 1, &[], &[Any]),
    op(b'i', "INST", NL_PAIR, V::NamePair, 0, &[Mark, Slice], &[Any]),
    op(b'j', "LONG_BINGET", FixedLen(4), V::MemoIndex, 1, &[], &[Any]),
    op(b'l', "LIST", NoArg, V::None, 0, &[Mark, Slice], &[Any]),
    op(b'o', "OBJ", NoArg, V::None, 1, &[Mark, Any, Slice], &[Any]),
    op(b'p', "PUT", NL, V::MemoIndex, 0, &[], &[]),
    op(b'q', "BINPUT", FixedLen(1), V::MemoIndex, 1, &[], &[]),
    op(b'r', "LONG_BINPUT", FixedLen(4), V::MemoIndex, 1, &[], &[]),
    op(b's', "SETITEM", NoArg, V::None, 0, &[Any, Any, Any], &[Any]),
    op(b't', "TUPLE", NoArg, V::None, 0, &[Mark, Slice], &[Any]),
    op(b'u', "SETITEMS", NoArg, V::None, 1, &[Any, Mark, Slice], &[Any]),
    op(b'}', "EMPTY_DICT", NoArg, V::None, 1, &[], &[Any]),
    op(0x80, "PROTO", FixedLen(1), V::ProtocolByte, 2, &[], &[]),
    op(0x81, "NEWOBJ", NoArg, V::None, 2, &[Any, Any], &[Any]),
    op(0x82, "EXT1", FixedLen(1), V::LittleEndianUint, 2, &[], &[Any]),
    op(0x83, "EXT2", FixedLen(2), V::LittleEndianUint, 2, &[], &[Any]),
    op(0x84, "EXT4", FixedLen(4), V::LittleEndianInt, 2, &[], &[Any]),
    op(0x85, "TUPLE1", NoArg, V::None, 2, &[Any], &[Any]),
    op(0x86, "TUPLE2", NoArg, V::None, 2, &[Any, Any], &[Any]),
    op(0x87, "TUPLE3", NoArg, V::None, 2, &[Any, Any, Any], &[Any]),
    op(0x88, "NEWTRUE", NoArg, V::None, 2, &[], &[Any]),
    op(0x89, "NEWFALSE", NoArg, V::None, 2, &[], &[Any]),
    op(0x8a, "LONG1", U1, V::LittleEndianInt, 2, &[], &[Any]),
    op(0x8b, "LONG4", S4, V::LittleEndianInt, 2, &[], &[Any]),
    op(0x8c, "SHORT_BINUNICODE", U1, V::Utf8String, 4, &[], &[Any]),
    op(0x8d, "BINUNICODE8", U8, V::Utf8String, 4, &[], &[Any]),
    op(0x8e, "BINBYTES8", U8, V::RawBytes, 4, &[], &[Any]),
    op(0x8f, "EMPTY_SET", NoArg, V::None, 4, &[], &[Any]),
    op(0x90, "ADDITEMS", NoArg, V::None, 4, &[Any, Mark, Slice], &[Any]),
    op(0x91, "FROZENSET", NoArg, V::None, 4, &[Mark, Slice], &[Any]),
    op(0x92, "NEWOBJ_EX", NoArg, V::None, 4, &[Any, Any, Any], &[Any]),
    op(0x93, "STACK_GLOBAL", NoArg, V::None, 4, &[Any, Any], &[Any]),
    op(0x94, "MEMOIZE", NoArg, V::None, 4, &[Any], &[Any]),
    op(0x95, "FRAME", FixedLen(8), V::FrameLength, 4, &[], &[]),
    op(0x96, "BYTEARRAY8", U8, V::RawBytes, 5, &[], &[Any]),
    op(0x97, "NEXT_BUFFER", NoArg, V::None, 5, &[], &[Any]),
    op(0x98, "READONLY_BUFFER", NoArg, V::None, 5, &[Any], &[Any]),
];

/// The full catalog, ordered by code byte.
pub fn catalog() -> &'static [OpcodeSpec] {
    &CATALOG
}

pub fn lookup(code: u8) -> Option<&'static OpcodeSpec> {
    CATALOG
        .binary_search_by_key(&code, |spec| spec.code)
        .ok()
        .map(|idx| &CATALOG[idx])
}

pub fn lookup_name(name: &str) -> Option<&'static OpcodeSpec> {
    CATALOG.iter().find(|spec| spec.name == name)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FramingError {
    #[error("unknown opcode {code:#04x} at offset {offset}")]
    UnknownOpcode { offset: usize, code: u8 },
    #[error("{name} argument truncated at offset {offset}")]
    TruncatedArgument { offset: usize, name: &'static str },
}

impl FramingError {
    pub fn offset(&self) -> usize {
        match *self {
            FramingError::UnknownOpcode { offset, .. } => offset,
            FramingError::TruncatedArgument { offset, .. } => offset,
        }
    }
}

/// One framed instruction borrowed from the underlying byte string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instruction<'a> {
    pub offset: usize,
    pub spec: &'static OpcodeSpec,
    /// Argument payload: the bytes after a length prefix, or the delimited
    /// text without its final terminator.
    pub arg: &'a [u8],
    /// Whole encoding of the instruction, opcode byte included.
    pub raw: &'a [u8],
}

impl Instruction<'_> {
    pub fn end(&self) -> usize {
        self.offset + self.raw.len()
    }
}

/// Frames one instruction starting at `pos`. Returns the instruction and the
/// position just past it.
pub fn read_instruction(bytes: &[u8], pos: usize) -> Result<(Instruction<'_>, usize), FramingError> {
    let Some(&code) = bytes.get(pos) else {
        return Err(FramingError::TruncatedArgument { offset: pos, name: "opcode" });
    };
    let spec = lookup(code).ok_or(FramingError::UnknownOpcode { offset: pos, code })?;
    let truncated = FramingError::TruncatedArgument { offset: pos, name: spec.name };
    let body = pos + 1;
    let (arg_start, arg_end, next) = match spec.category {
        NoArg => (body, body, body),
        FixedLen(n) => {
            let end = body.checked_add(n as usize).ok_or(truncated.clone())?;
            if end > bytes.len() {
                return Err(truncated);
            }
            (body, end, end)
        }
        LenPrefixed { width, signed } => {
            let prefix_end = body + width as usize;
            let prefix = bytes.get(body..prefix_end).ok_or(truncated.clone())?;
            let len = decode_length(prefix, signed).ok_or(truncated.clone())?;
            let end = usize::try_from(len)
                .ok()
                .and_then(|len| prefix_end.checked_add(len))
                .filter(|&end| end <= bytes.len())
                .ok_or(truncated)?;
            (prefix_end, end, end)
        }
        Delimited { terminator, lines } => {
            let mut cursor = body;
            for _ in 0..lines {
                let found = bytes[cursor.min(bytes.len())..]
                    .iter()
                    .position(|&b| b == terminator)
                    .ok_or(truncated.clone())?;
                cursor += found + 1;
            }
            (body, cursor - 1, cursor)
        }
    };
    let insn = Instruction {
        offset: pos,
        spec,
        arg: &bytes[arg_start..arg_end],
        raw: &bytes[pos..next],
    };
    Ok((insn, next))
}

/// Decodes a little-endian length prefix. `None` for a negative signed length.
pub fn decode_length(prefix: &[u8], signed: bool) -> Option<u64> {
    let mut buf = [0u8; 8];
    buf[..prefix.len()].copy_from_slice(prefix);
    let raw = u64::from_le_bytes(buf);
    if signed && prefix.len() == 4 {
        let value = i32::from_le_bytes(prefix.try_into().ok()?);
        return u64::try_from(value).ok();
    }
    Some(raw)
}

/// Encodes `spec` with the given argument so that `read_instruction` yields
/// the same `(spec, arg)` pair back. For length-prefixed opcodes the prefix is
/// computed from `arg`; for delimited opcodes the final terminator is added.
pub fn encode_instruction(spec: &OpcodeSpec, arg: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(arg.len() + 9);
    out.push(spec.code);
    match spec.category {
        NoArg => debug_assert!(arg.is_empty()),
        FixedLen(n) => {
            debug_assert_eq!(arg.len(), n as usize);
            out.extend_from_slice(arg);
        }
        LenPrefixed { width, .. } => {
            let len = (arg.len() as u64).to_le_bytes();
            out.extend_from_slice(&len[..width as usize]);
            out.extend_from_slice(arg);
        }
        Delimited { terminator, .. } => {
            out.extend_from_slice(arg);
            out.push(terminator);
        }
    }
    out
}

/// Iterates over instructions until the byte string is exhausted or framing
/// fails. Stops after the first error.
pub struct Instructions<'a> {
    bytes: &'a [u8],
    pos: usize,
    failed: bool,
}

impl<'a> Iterator for Instructions<'a> {
    type Item = Result<Instruction<'a>, FramingError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.pos >= self.bytes.len() {
            return None;
        }
        match read_instruction(self.bytes, self.pos) {
            Ok((insn, next)) => {
                self.pos = next;
                Some(Ok(insn))
            }
            Err(err) => {
                self.failed = true;
                Some(Err(err))
            }
        }
    }
}

pub fn instructions(bytes: &[u8]) -> Instructions<'_> {
    Instructions { bytes, pos: 0, failed: false }
}

/// Frames the whole byte string.
pub fn parse_all(bytes: &[u8]) -> Result<Vec<Instruction<'_>>, FramingError> {
    instructions(bytes).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_is_sorted_and_distinct() {
        assert!(CATALOG.windows(2).all(|w| w[0].code < w[1].code));
    }

    #[test]
    fn stop_is_noarg() {
        let stop = lookup(b'.').unwrap();
        assert_eq!(stop.name, "STOP");
        assert_eq!(stop.category, NoArg);
    }

    #[test]
    fn int_is_newline_delimited() {
        let int = lookup(b'I').unwrap();
        assert_eq!(int.name, "INT");
        assert_eq!(int.category, Delimited { terminator: b'\n', lines: 1 });
        assert_eq!(int.value_codec, ValueCodec::AsciiInt);
    }

    #[test]
    fn memoize_is_protocol_4() {
        let memoize = lookup(0x94).unwrap();
        assert_eq!(memoize.name, "MEMOIZE");
        assert_eq!(memoize.category, NoArg);
        assert_eq!(memoize.min_protocol, 4);
    }

    #[test]
    fn binint_is_signed_fixed4() {
        let binint = lookup(b'J').unwrap();
        assert_eq!(binint.name, "BININT");
        assert_eq!(binint.category, FixedLen(4));
        assert_eq!(binint.value_codec, ValueCodec::LittleEndianInt);
    }

    #[test]
    fn unassigned_byte_is_not_found() {
        assert!(lookup(0xFF).is_none());
        assert!(lookup(b'z').is_none());
    }

    #[test]
    fn categories_respect_width_invariants() {
        for spec in catalog() {
            match spec.category {
                FixedLen(n) => assert!([1, 2, 4, 8].contains(&n), "{}", spec.name),
                LenPrefixed { width, signed } => {
                    assert!([1, 4, 8].contains(&width), "{}", spec.name);
                    assert!(!signed || width == 4, "{}", spec.name);
                }
                Delimited { terminator, .. } => assert_eq!(terminator, b'\n'),
                NoArg => {}
            }
        }
    }

    #[test]
    fn reads_none() {
        let (insn, next) = read_instruction(b"N.", 0).unwrap();
        assert_eq!(insn.spec.name, "NONE");
        assert!(insn.arg.is_empty());
        assert_eq!(next, 1);
    }

    #[test]
    fn reads_prefixed_int() {
        let (insn, next) = read_instruction(b"I0x1337\n.", 0).unwrap();
        assert_eq!(insn.spec.name, "INT");
        assert_eq!(insn.arg, b"0x1337");
        assert_eq!(next, 8);
    }

    #[test]
    fn reads_short_binbytes() {
        let (insn, next) = read_instruction(b"C\x03abc", 0).unwrap();
        assert_eq!(insn.spec.name, "SHORT_BINBYTES");
        assert_eq!(insn.arg, b"abc");
        assert_eq!(next, 5);
    }

    #[test]
    fn reads_global_pair() {
        let (insn, next) = read_instruction(b"cposix\nsystem\n.", 0).unwrap();
        assert_eq!(insn.spec.name, "GLOBAL");
        assert_eq!(insn.arg, b"posix\nsystem");
        assert_eq!(next, 14);
    }

    #[test]
    fn truncations() {
        assert!(matches!(read_instruction(b"C\x05ab", 0), Err(FramingError::TruncatedArgument { .. })));
        assert!(matches!(read_instruction(b"I12", 0), Err(FramingError::TruncatedArgument { .. })));
        assert!(matches!(read_instruction(b"J\x01\x02", 0), Err(FramingError::TruncatedArgument { .. })));
        assert!(matches!(read_instruction(b"cmod\nname", 0), Err(FramingError::TruncatedArgument { .. })));
        // negative signed length
        assert!(matches!(
            read_instruction(b"T\xff\xff\xff\xff", 0),
            Err(FramingError::TruncatedArgument { .. })
        ));
        assert_eq!(
            read_instruction(b"\xff", 0),
            Err(FramingError::UnknownOpcode { offset: 0, code: 0xff })
        );
    }

    #[test]
    fn encode_roundtrip_examples() {
        let spec = lookup(b'X').unwrap();
        let bytes = encode_instruction(spec, "héllo".as_bytes());
        let (insn, next) = read_instruction(&bytes, 0).unwrap();
        assert_eq!(insn.arg, "héllo".as_bytes());
        assert_eq!(next, bytes.len());
    }
}
