//! Byte-level parsers and codecs with the reference interpreter's exact
//! acceptance rules: `int(bytes, base)`, `float(bytes)`, the bytes escape
//! decoder, raw-unicode-escape and the strict text codecs.
//!
//! Text is returned as code points (`Vec<u32>`) because the interpreter's
//! strings may hold lone surrogates, which `String` cannot.

use num_bigint::{BigInt, Sign};
use num_traits::Zero;

use crate::generator::Encoding;

/// Digit limit for string-to-int conversion in non power-of-two bases.
pub const INT_MAX_STR_DIGITS: usize = 4300;

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | 0x0b | 0x0c | b'\r')
}

fn trim_space(mut s: &[u8]) -> &[u8] {
    while let [first, rest @ ..] = s {
        if is_space(*first) {
            s = rest;
        } else {
            break;
        }
    }
    while let [rest @ .., last] = s {
        if is_space(*last) {
            s = rest;
        } else {
            break;
        }
    }
    s
}

fn digit_value(b: u8) -> Option<u32> {
    match b {
        b'0'..=b'9' => Some(u32::from(b - b'0')),
        b'a'..=b'z' => Some(u32::from(b - b'a') + 10),
        b'A'..=b'Z' => Some(u32::from(b - b'A') + 10),
        _ => None,
    }
}

/// `int(data, base)` for `base` 0 or 10.
pub fn parse_int(data: &[u8], base: u32) -> Option<BigInt> {
    debug_assert!(base == 0 || base == 10);
    let s = trim_space(data);
    let (negative, mut s) = match s.first() {
        Some(b'-') => (true, &s[1..]),
        Some(b'+') => (false, &s[1..]),
        _ => (false, s),
    };
    let mut radix = if base == 0 { 10 } else { base };
    let mut prefixed = false;
    if base == 0 && s.len() >= 2 && s[0] == b'0' {
        radix = match s[1] {
            b'x' | b'X' => 16,
            b'o' | b'O' => 8,
            b'b' | b'B' => 2,
            _ => 10,
        };
        if radix != 10 {
            s = &s[2..];
            prefixed = true;
            // One underscore may separate the prefix from the digits.
            if s.first() == Some(&b'_') {
                s = &s[1..];
            }
        }
    }
    let mut digits = Vec::with_capacity(s.len());
    let mut prev_underscore = false;
    for (i, &b) in s.iter().enumerate() {
        if b == b'_' {
            if i == 0 || prev_underscore {
                return None;
            }
            prev_underscore = true;
            continue;
        }
        let d = digit_value(b).filter(|&d| d < radix)?;
        digits.push(d as u8);
        prev_underscore = false;
    }
    if digits.is_empty() || prev_underscore {
        return None;
    }
    // Base 0 forbids leading zeros on non-zero decimal literals.
    if base == 0 && !prefixed && digits[0] == 0 && digits.iter().any(|&d| d != 0) {
        return None;
    }
    if !radix.is_power_of_two() && digits.len() > INT_MAX_STR_DIGITS {
        return None;
    }
    let magnitude = BigInt::from_radix_be(Sign::Plus, &digits, radix)?;
    Some(if negative { -magnitude } else { magnitude })
}

/// `float(data)`.
pub fn parse_float(data: &[u8]) -> Option<f64> {
    let s = trim_space(data);
    if !s.is_ascii() {
        return None;
    }
    let cleaned: Vec<u8> = if s.contains(&b'_') {
        for (i, &b) in s.iter().enumerate() {
            if b == b'_' {
                let before = i.checked_sub(1).map(|j| s[j].is_ascii_digit()).unwrap_or(false);
                let after = s.get(i + 1).map(|c| c.is_ascii_digit()).unwrap_or(false);
                if !before || !after {
                    return None;
                }
            }
        }
        s.iter().copied().filter(|&b| b != b'_').collect()
    } else {
        s.to_vec()
    };
    let text = std::str::from_utf8(&cleaned).ok()?;
    let unsigned = text.strip_prefix(['+', '-']).unwrap_or(text);
    let lower = unsigned.to_ascii_lowercase();
    if matches!(lower.as_str(), "inf" | "infinity" | "nan") {
        let value = if lower == "nan" { f64::NAN } else { f64::INFINITY };
        return Some(if text.starts_with('-') { -value } else { value });
    }
    if !is_decimal_float(unsigned.as_bytes()) {
        return None;
    }
    text.parse::<f64>().ok()
}

fn is_decimal_float(s: &[u8]) -> bool {
    let mut i = 0;
    let int_start = i;
    while i < s.len() && s[i].is_ascii_digit() {
        i += 1;
    }
    let mut mantissa_digits = i - int_start;
    if i < s.len() && s[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < s.len() && s[i].is_ascii_digit() {
            i += 1;
        }
        mantissa_digits += i - frac_start;
    }
    if mantissa_digits == 0 {
        return false;
    }
    if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
        i += 1;
        if i < s.len() && (s[i] == b'+' || s[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < s.len() && s[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return false;
        }
    }
    i == s.len()
}

/// The bytes escape decoder used for quoted protocol-0 strings.
pub fn escape_decode(data: &[u8]) -> Option<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len());
    let mut i = 0;
    while i < data.len() {
        let b = data[i];
        i += 1;
        if b != b'\\' {
            out.push(b);
            continue;
        }
        let &c = data.get(i)?; // trailing backslash
        i += 1;
        match c {
            b'\n' => {}
            b'\\' => out.push(b'\\'),
            b'\'' => out.push(b'\''),
            b'"' => out.push(b'"'),
            b'a' => out.push(0x07),
            b'b' => out.push(0x08),
            b'f' => out.push(0x0c),
            b'n' => out.push(b'\n'),
            b'r' => out.push(b'\r'),
            b't' => out.push(b'\t'),
            b'v' => out.push(0x0b),
            b'0'..=b'7' => {
                let mut value = u32::from(c - b'0');
                for _ in 0..2 {
                    match data.get(i) {
                        Some(&d @ b'0'..=b'7') => {
                            value = value * 8 + u32::from(d - b'0');
                            i += 1;
                        }
                        _ => break,
                    }
                }
                out.push((value & 0xff) as u8);
            }
            b'x' => {
                let hi = data.get(i).and_then(|&d| (d as char).to_digit(16))?;
                let lo = data.get(i + 1).and_then(|&d| (d as char).to_digit(16))?;
                out.push((hi * 16 + lo) as u8);
                i += 2;
            }
            other => {
                out.push(b'\\');
                out.push(other);
            }
        }
    }
    Some(out)
}

/// The raw-unicode-escape codec: only `\uXXXX` and `\UXXXXXXXX` are escapes,
/// every other byte is its Latin-1 code point.
pub fn raw_unicode_escape(data: &[u8]) -> Option<Vec<u32>> {
    let mut out = Vec::with_capacity(data.len());
    let mut i = 0;
    while i < data.len() {
        let b = data[i];
        i += 1;
        if b != b'\\' || i >= data.len() {
            out.push(u32::from(b));
            continue;
        }
        let c = data[i];
        i += 1;
        let count = match c {
            b'u' => 4,
            b'U' => 8,
            _ => {
                out.push(u32::from(b'\\'));
                out.push(u32::from(c));
                continue;
            }
        };
        let hex = data.get(i..i + count)?;
        let mut value: u32 = 0;
        for &h in hex {
            value = value * 16 + (h as char).to_digit(16)?;
        }
        if value > 0x10ffff {
            return None;
        }
        out.push(value);
        i += count;
    }
    Some(out)
}

/// Strict UTF-8, optionally letting encoded surrogates through.
pub fn decode_utf8(data: &[u8], surrogatepass: bool) -> Option<Vec<u32>> {
    if !surrogatepass {
        return std::str::from_utf8(data).ok().map(|s| s.chars().map(u32::from).collect());
    }
    let mut out = Vec::with_capacity(data.len());
    let mut i = 0;
    while i < data.len() {
        let b0 = data[i];
        let (len, min, init) = match b0 {
            0x00..=0x7f => {
                out.push(u32::from(b0));
                i += 1;
                continue;
            }
            0xc2..=0xdf => (2, 0x80, u32::from(b0 & 0x1f)),
            0xe0..=0xef => (3, 0x800, u32::from(b0 & 0x0f)),
            0xf0..=0xf4 => (4, 0x10000, u32::from(b0 & 0x07)),
            _ => return None,
        };
        let tail = data.get(i + 1..i + len)?;
        let mut cp = init;
        for &t in tail {
            if t & 0xc0 != 0x80 {
                return None;
            }
            cp = (cp << 6) | u32::from(t & 0x3f);
        }
        if cp < min || cp > 0x10ffff {
            return None;
        }
        out.push(cp);
        i += len;
    }
    Some(out)
}

fn decode_utf16(data: &[u8]) -> Option<Vec<u32>> {
    let (data, big_endian) = match data {
        [0xff, 0xfe, rest @ ..] => (rest, false),
        [0xfe, 0xff, rest @ ..] => (rest, true),
        _ => (data, false),
    };
    if data.len() % 2 != 0 {
        return None;
    }
    let units = data.chunks_exact(2).map(|pair| {
        let pair = [pair[0], pair[1]];
        if big_endian { u16::from_be_bytes(pair) } else { u16::from_le_bytes(pair) }
    });
    char::decode_utf16(units).map(|r| r.ok().map(u32::from)).collect()
}

/// Decodes an 8-bit string with the loader's configured encoding.
pub fn decode_with(encoding: Encoding, data: &[u8]) -> Option<Vec<u32>> {
    match encoding {
        Encoding::Utf8 => decode_utf8(data, false),
        Encoding::Utf16 => decode_utf16(data),
        Encoding::Ascii => decode_ascii(data),
        Encoding::Latin1 => Some(data.iter().map(|&b| u32::from(b)).collect()),
    }
}

pub fn decode_ascii(data: &[u8]) -> Option<Vec<u32>> {
    data.is_ascii().then(|| data.iter().map(|&b| u32::from(b)).collect())
}

/// Little-endian two's complement, empty meaning zero.
pub fn decode_long(data: &[u8]) -> BigInt {
    if data.is_empty() {
        return BigInt::zero();
    }
    BigInt::from_signed_bytes_le(data)
}
