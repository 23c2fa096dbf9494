//! Grammar-based payload generation.
//!
//! A payload is a random sequence of well-formed instructions terminated by
//! STOP, plus the loader configuration (text encoding and out-of-band buffers)
//! it is executed under. Generation is a pure function of the seed and limits.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::opcodes::{self, ArgCategory, OpcodeSpec, ValueCodec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GenLimits {
    pub max_opcodes: u32,
    pub min_opcodes: u32,
    pub buffers_item_count: u32,
    pub max_ascii_digits: u32,
    pub max_bytes_len: u64,
    pub put_index_max: u64,
    pub long_binput_index_max: u64,
}

impl Default for GenLimits {
    fn default() -> Self {
        Self {
            max_opcodes: 20,
            min_opcodes: 1,
            buffers_item_count: 3,
            max_ascii_digits: 10,
            max_bytes_len: 300,
            put_index_max: 999_999,
            long_binput_index_max: 65_535,
        }
    }
}

impl GenLimits {
    /// Limits of the large-input campaign: longer numbers, byte arguments up
    /// to 6 GiB and unrestricted memo indices.
    pub fn relaxed() -> Self {
        Self {
            max_ascii_digits: 25,
            max_bytes_len: 0x1_8000_0000,
            put_index_max: u64::MAX,
            long_binput_index_max: u64::MAX,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.min_opcodes == 0 || self.max_opcodes == 0 {
            return Err(ConfigError::Invalid("opcode counts must be positive".into()));
        }
        if self.min_opcodes > self.max_opcodes {
            return Err(ConfigError::Invalid(format!(
                "min_opcodes ({}) exceeds max_opcodes ({})",
                self.min_opcodes, self.max_opcodes
            )));
        }
        if self.max_ascii_digits == 0 {
            return Err(ConfigError::Invalid("max_ascii_digits must be positive".into()));
        }
        if self.max_bytes_len == 0 {
            return Err(ConfigError::Invalid("max_bytes_len must be positive".into()));
        }
        Ok(())
    }
}

pub fn relaxed_limits() -> GenLimits {
    GenLimits::relaxed()
}

/// Text encoding handed to the loader for 8-bit string opcodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Encoding {
    #[serde(rename = "utf-8")]
    Utf8,
    #[serde(rename = "utf-16")]
    Utf16,
    #[serde(rename = "ascii")]
    Ascii,
    #[serde(rename = "latin-1")]
    Latin1,
}

impl Encoding {
    pub const ALL: [Encoding; 4] = [Encoding::Utf8, Encoding::Utf16, Encoding::Ascii, Encoding::Latin1];

    pub fn as_str(self) -> &'static str {
        match self {
            Encoding::Utf8 => "utf-8",
            Encoding::Utf16 => "utf-16",
            Encoding::Ascii => "ascii",
            Encoding::Latin1 => "latin-1",
        }
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Encoding {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Encoding::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ConfigError::Invalid(format!("unknown encoding {s:?}")))
    }
}

/// Which `buffers` argument the loader receives.
///
/// * 0: absent
/// * 1: empty sequence
/// * 2: sequence of `buffers_item_count` mixed items
/// * 3: one mutable byte buffer
/// * 4: one immutable byte string
/// * 5: lazily yielded sequence equal to menu 2
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BuffersMenu(u8);

impl BuffersMenu {
    pub const ABSENT: BuffersMenu = BuffersMenu(0);
    pub const COUNT: u8 = 6;

    pub fn new(id: u8) -> Option<Self> {
        (id < Self::COUNT).then_some(BuffersMenu(id))
    }

    pub fn id(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for BuffersMenu {
    type Error = String;

    fn try_from(id: u8) -> Result<Self, Self::Error> {
        BuffersMenu::new(id).ok_or_else(|| format!("buffers menu id {id} out of range 0-5"))
    }
}

impl From<BuffersMenu> for u8 {
    fn from(menu: BuffersMenu) -> u8 {
        menu.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Payload {
    /// Serialized as padded standard base64.
    #[serde(rename = "pickle_b64", with = "base64_bytes")]
    pub pickle_bytes: Vec<u8>,
    pub encoding: Encoding,
    pub buffers_choice: BuffersMenu,
    pub seed: u64,
}

impl Payload {
    /// A payload with the default loader configuration.
    pub fn from_bytes(pickle_bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            pickle_bytes: pickle_bytes.into(),
            encoding: Encoding::Ascii,
            buffers_choice: BuffersMenu::ABSENT,
            seed: 0,
        }
    }

    pub fn with_bytes(&self, pickle_bytes: Vec<u8>) -> Self {
        Self { pickle_bytes, ..self.clone() }
    }
}

mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

fn generatable() -> &'static [&'static OpcodeSpec] {
    static OPS: OnceLock<Vec<&'static OpcodeSpec>> = OnceLock::new();
    OPS.get_or_init(|| opcodes::catalog().iter().filter(|spec| !spec.is_stop()).collect())
}

/// Probability of an adversarial numeric form.
const ADVERSARIAL_NUMERIC: f64 = 0.10;
/// Probability of an out-of-range PROTO argument.
const INVALID_PROTOCOL: f64 = 0.10;

pub fn generate(seed: u64, limits: &GenLimits) -> Payload {
    debug_assert!(limits.validate().is_ok());
    let mut rng = Pcg64::seed_from_u64(seed);
    let count = rng.random_range(limits.min_opcodes..=limits.max_opcodes);
    let ops = generatable();
    let mut bytes = Vec::new();
    for _ in 0..count {
        let spec = ops[rng.random_range(0..ops.len())];
        let arg = gen_argument(spec, limits, &mut rng);
        bytes.extend(opcodes::encode_instruction(spec, &arg));
    }
    bytes.push(opcodes::STOP);
    let encoding = Encoding::ALL[rng.random_range(0..Encoding::ALL.len())];
    let buffers_choice = BuffersMenu(rng.random_range(0..BuffersMenu::COUNT));
    Payload { pickle_bytes: bytes, encoding, buffers_choice, seed }
}

fn gen_argument(spec: &OpcodeSpec, limits: &GenLimits, rng: &mut Pcg64) -> Vec<u8> {
    match spec.category {
        ArgCategory::NoArg => Vec::new(),
        ArgCategory::FixedLen(width) => gen_fixed(spec, width, limits, rng),
        ArgCategory::LenPrefixed { width, signed } => {
            let width_cap = match (width, signed) {
                (1, _) => u8::MAX as u64,
                (4, true) => i32::MAX as u64,
                (4, false) => u32::MAX as u64,
                _ => u64::MAX,
            };
            let cap = limits.max_bytes_len.min(width_cap).min(usize::MAX as u64);
            let len = rng.random_range(0..=cap) as usize;
            random_bytes(rng, len)
        }
        ArgCategory::Delimited { lines, .. } => match spec.value_codec {
            ValueCodec::AsciiInt => numeric_text(rng, limits, NumberKind::Int),
            ValueCodec::AsciiLong => {
                let mut text = numeric_text(rng, limits, NumberKind::Int);
                if rng.random_bool(0.5) {
                    text.push(b'L');
                }
                text
            }
            ValueCodec::AsciiFloat => numeric_text(rng, limits, NumberKind::Float),
            ValueCodec::MemoIndex => numeric_text(rng, limits, NumberKind::Memo),
            ValueCodec::QuotedString => {
                let quote = if rng.random_bool(0.5) { b'\'' } else { b'"' };
                let max = limits.max_bytes_len.saturating_sub(2);
                let mut text = vec![quote];
                text.extend(line_bytes(rng, max));
                text.push(quote);
                text
            }
            ValueCodec::NamePair => {
                debug_assert_eq!(lines, 2);
                let mut text = name_bytes(rng, limits);
                text.push(b'\n');
                text.extend(name_bytes(rng, limits));
                text
            }
            ValueCodec::UnicodeEscaped => unicode_escaped_text(rng, limits.max_bytes_len),
            _ => line_bytes(rng, limits.max_bytes_len),
        },
    }
}

fn gen_fixed(spec: &OpcodeSpec, width: u8, limits: &GenLimits, rng: &mut Pcg64) -> Vec<u8> {
    let width = width as usize;
    match spec.value_codec {
        ValueCodec::MemoIndex => {
            let cap = match width {
                1 => limits.put_index_max.min(u8::MAX as u64),
                _ => limits.long_binput_index_max.min(u32::MAX as u64),
            };
            let index = rng.random_range(0..=cap);
            index.to_le_bytes()[..width].to_vec()
        }
        ValueCodec::ProtocolByte => {
            let proto = if rng.random_bool(INVALID_PROTOCOL) {
                rng.random_range(6..=u8::MAX)
            } else {
                rng.random_range(0..=5u8)
            };
            vec![proto]
        }
        _ => random_bytes(rng, width),
    }
}

fn random_bytes(rng: &mut Pcg64, len: usize) -> Vec<u8> {
    let mut bytes = vec![0u8; len];
    rng.fill(&mut bytes[..]);
    bytes
}

#[derive(Clone, Copy)]
enum NumberKind {
    Int,
    Float,
    Memo,
}

fn decimal_digits(rng: &mut Pcg64, max_digits: u32) -> Vec<u8> {
    let n = rng.random_range(1..=max_digits.max(1));
    let mut digits: Vec<u8> = (0..n).map(|_| b'0' + rng.random_range(0..10u8)).collect();
    if n > 1 && digits[0] == b'0' {
        digits[0] = b'1' + rng.random_range(0..9u8);
    }
    digits
}

fn well_formed_number(rng: &mut Pcg64, limits: &GenLimits, kind: NumberKind) -> Vec<u8> {
    let max_digits = limits.max_ascii_digits;
    match kind {
        NumberKind::Int => decimal_digits(rng, max_digits),
        NumberKind::Memo => rng.random_range(0..=limits.put_index_max).to_string().into_bytes(),
        NumberKind::Float => {
            let int_digits = rng.random_range(1..=max_digits);
            let mut text = decimal_digits(rng, int_digits);
            let frac_budget = max_digits - int_digits.min(max_digits);
            if frac_budget > 0 {
                text.push(b'.');
                let frac = rng.random_range(1..=frac_budget);
                text.extend((0..frac).map(|_| b'0' + rng.random_range(0..10u8)));
            } else if rng.random_bool(0.5) {
                text.push(b'.');
            }
            text
        }
    }
}

fn numeric_text(rng: &mut Pcg64, limits: &GenLimits, kind: NumberKind) -> Vec<u8> {
    if !rng.random_bool(ADVERSARIAL_NUMERIC) {
        return well_formed_number(rng, limits, kind);
    }
    match rng.random_range(0..5u8) {
        0 => {
            let n = rng.random_range(1..=limits.max_ascii_digits);
            let mut text = b"0x".to_vec();
            text.extend((0..n).map(|_| b"0123456789abcdefABCDEF"[rng.random_range(0..22usize)]));
            text
        }
        1 => {
            let mut text = well_formed_number(rng, limits, kind);
            match rng.random_range(0..3u8) {
                0 => text.insert(0, b' '),
                1 => text.push(b' '),
                _ => {
                    text.insert(0, b' ');
                    text.push(b' ');
                }
            }
            text
        }
        2 => if rng.random_bool(0.5) { b"01".to_vec() } else { b"00".to_vec() },
        3 => {
            let mut text = well_formed_number(rng, limits, kind);
            text.insert(0, b'-');
            text
        }
        _ => {
            let mut text = well_formed_number(rng, limits, kind);
            let at = rng.random_range(0..=text.len());
            text.insert(at, 0);
            text
        }
    }
}

/// Newline-free bytes: mostly printable ASCII, sometimes arbitrary.
fn line_bytes(rng: &mut Pcg64, max_len: u64) -> Vec<u8> {
    let len = rng.random_range(0..=max_len.min(usize::MAX as u64)) as usize;
    let printable = rng.random_bool(0.75);
    (0..len)
        .map(|_| {
            if printable {
                rng.random_range(0x20..0x7fu8)
            } else {
                loop {
                    let b: u8 = rng.random();
                    if b != b'\n' {
                        break b;
                    }
                }
            }
        })
        .collect()
}

fn name_bytes(rng: &mut Pcg64, limits: &GenLimits) -> Vec<u8> {
    if rng.random_bool(0.1) {
        return line_bytes(rng, limits.max_bytes_len);
    }
    const HEAD: &[u8] = b"abcdefghijklmnopqrstuvwxyz_";
    const TAIL: &[u8] = b"abcdefghijklmnopqrstuvwxyz_0123456789.";
    let len = rng.random_range(1..=16usize);
    (0..len)
        .map(|i| {
            let pool = if i == 0 { HEAD } else { TAIL };
            pool[rng.random_range(0..pool.len())]
        })
        .collect()
}

fn unicode_escaped_text(rng: &mut Pcg64, max_len: u64) -> Vec<u8> {
    let mut text = line_bytes(rng, max_len);
    if !text.is_empty() && rng.random_bool(0.25) {
        let at = rng.random_range(0..=text.len());
        let hex = format!("\\u{:04x}", rng.random_range(0..=0xffffu32));
        let keep = (max_len as usize).saturating_sub(hex.len());
        text.truncate(keep.min(text.len()));
        let at = at.min(text.len());
        text.splice(at..at, hex.into_bytes());
    }
    text
}
