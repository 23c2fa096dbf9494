//! Canonical text rendering of machine values, and the address scrub.
//!
//! The rendering follows the reference interpreter's `ascii()` output for
//! builtin values, with two changes that make it order-independent and
//! implementation-neutral: set members are sorted by their rendering, and
//! imported names render as `stub:<kind>:<module>.<name>`.

use std::fmt::Write as _;

use num_bigint::BigInt;

use super::value::{Heap, Obj, ObjId, QualName, StubKind, Value, ViewSource};

/// Replaces a value whose rendering fails.
pub const UNRENDERABLE: &str = "<unrenderable>";

/// Nesting beyond this renders as [`UNRENDERABLE`], like a recursion error.
pub const RENDER_DEPTH: usize = 900;

/// Largest decimal digit count an integer may render with.
const MAX_INT_DIGITS: usize = 4300;

#[derive(Debug)]
struct Unrenderable;

/// Replaces every `0x` + 4..=16 hex digits (case-insensitive) with `0xADDR`.
pub fn scrub(s: &str) -> String {
    let b = s.as_bytes();
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    let mut copied = 0;
    while i + 1 < b.len() {
        if b[i] == b'0' && (b[i + 1] == b'x' || b[i + 1] == b'X') {
            let digits = b[i + 2..].iter().take(16).take_while(|c| c.is_ascii_hexdigit()).count();
            if digits >= 4 {
                out.push_str(&s[copied..i]);
                out.push_str("0xADDR");
                i += 2 + digits;
                copied = i;
                continue;
            }
        }
        i += 1;
    }
    out.push_str(&s[copied..]);
    out
}

/// Canonical, scrubbed text of a value.
pub fn render(value: &Value, heap: &Heap) -> String {
    let mut r = Renderer { heap, active: Vec::new() };
    let mut out = String::new();
    match r.write(value, &mut out, RENDER_DEPTH) {
        Ok(()) => scrub(&out),
        Err(Unrenderable) => UNRENDERABLE.to_string(),
    }
}

struct Renderer<'h> {
    heap: &'h Heap,
    active: Vec<ObjId>,
}

impl Renderer<'_> {
    fn write(&mut self, value: &Value, out: &mut String, depth: usize) -> Result<(), Unrenderable> {
        if depth == 0 {
            return Err(Unrenderable);
        }
        match value {
            Value::None => out.push_str("None"),
            Value::Bool(true) => out.push_str("True"),
            Value::Bool(false) => out.push_str("False"),
            Value::Int(i) => write_int(i, out)?,
            Value::Float(f) => out.push_str(&float_repr(*f)),
            Value::Str(t) => write_text(t, out),
            Value::Bytes(b) => write_bytes(b, out),
            Value::Tuple(items) => {
                out.push('(');
                self.write_seq(items, out, depth)?;
                if items.len() == 1 {
                    out.push(',');
                }
                out.push(')');
            }
            Value::FrozenSet(items) => {
                if items.is_empty() {
                    out.push_str("frozenset()");
                } else {
                    out.push_str("frozenset({");
                    self.write_sorted(items, out, depth)?;
                    out.push_str("})");
                }
            }
            Value::ByteArray(id) => {
                out.push_str("bytearray(");
                if let Obj::ByteArray(b) = self.heap.get(*id) {
                    write_bytes_with(b, out, true);
                }
                out.push(')');
            }
            Value::List(id) | Value::Dict(id) | Value::Set(id) => self.write_container(*id, out, depth)?,
            Value::StubFunction(q) => write_stub(StubKind::Function, q, out),
            Value::StubClass(q) => write_stub(StubKind::Class, q, out),
            Value::StubInstance(id) => {
                let heap = self.heap;
                let Obj::Instance { class, attrs } = heap.get(*id) else {
                    return Err(Unrenderable);
                };
                write_stub(StubKind::Instance, class, out);
                if !attrs.is_empty() {
                    if self.active.contains(id) {
                        out.push_str("{...}");
                    } else {
                        self.active.push(*id);
                        let res = self.write_pairs(attrs, out, depth);
                        self.active.pop();
                        res?;
                    }
                }
            }
            Value::PersistentId(inner) => {
                out.push_str("persid(");
                self.write(inner, out, depth - 1)?;
                out.push(')');
            }
            Value::View(src) => {
                let addr = std::rc::Rc::as_ptr(src) as *const ViewSource as usize;
                let _ = write!(out, "<memory at {addr:#x}>");
            }
        }
        Ok(())
    }

    fn write_container(&mut self, id: ObjId, out: &mut String, depth: usize) -> Result<(), Unrenderable> {
        let heap = self.heap;
        let obj = heap.get(id);
        if self.active.contains(&id) {
            out.push_str(match obj {
                Obj::List(_) => "[...]",
                Obj::Set(_) => "set(...)",
                _ => "{...}",
            });
            return Ok(());
        }
        self.active.push(id);
        let res = match obj {
            Obj::List(items) => {
                out.push('[');
                let r = self.write_seq(items, out, depth);
                out.push(']');
                r
            }
            Obj::Dict(pairs) => self.write_pairs(pairs, out, depth),
            Obj::Set(items) if items.is_empty() => {
                out.push_str("set()");
                Ok(())
            }
            Obj::Set(items) => {
                out.push('{');
                let r = self.write_sorted(items, out, depth);
                out.push('}');
                r
            }
            _ => Err(Unrenderable),
        };
        self.active.pop();
        res
    }

    fn write_seq(&mut self, items: &[Value], out: &mut String, depth: usize) -> Result<(), Unrenderable> {
        for (i, item) in items.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            self.write(item, out, depth - 1)?;
        }
        Ok(())
    }

    fn write_pairs(&mut self, pairs: &[(Value, Value)], out: &mut String, depth: usize) -> Result<(), Unrenderable> {
        out.push('{');
        for (i, (k, v)) in pairs.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            self.write(k, out, depth - 1)?;
            out.push_str(": ");
            self.write(v, out, depth - 1)?;
        }
        out.push('}');
        Ok(())
    }

    fn write_sorted(&mut self, items: &[Value], out: &mut String, depth: usize) -> Result<(), Unrenderable> {
        let mut parts = Vec::with_capacity(items.len());
        for item in items {
            let mut s = String::new();
            self.write(item, &mut s, depth - 1)?;
            parts.push(scrub(&s));
        }
        parts.sort();
        out.push_str(&parts.join(", "));
        Ok(())
    }
}

fn write_int(i: &BigInt, out: &mut String) -> Result<(), Unrenderable> {
    // Cheap bound first: 3.33 bits per decimal digit.
    if i.bits() > (MAX_INT_DIGITS as u64) * 3 + 400 {
        let s = i.to_string();
        if s.trim_start_matches('-').len() > MAX_INT_DIGITS {
            return Err(Unrenderable);
        }
        out.push_str(&s);
    } else {
        let _ = write!(out, "{i}");
    }
    Ok(())
}

fn write_stub(kind: StubKind, q: &QualName, out: &mut String) {
    out.push_str("stub:");
    out.push_str(kind.as_str());
    out.push(':');
    write_name(&q.module, out);
    out.push('.');
    write_name(&q.name, out);
}

/// Printable ASCII verbatim, everything else escaped.
fn write_name(cps: &[u32], out: &mut String) {
    for &c in cps {
        match c {
            0x5c => out.push_str("\\\\"),
            0x20..=0x7e => out.push(c as u8 as char),
            _ => push_escape(c, out),
        }
    }
}

fn push_escape(c: u32, out: &mut String) {
    let _ = if c < 0x100 {
        write!(out, "\\x{c:02x}")
    } else if c < 0x10000 {
        write!(out, "\\u{c:04x}")
    } else {
        write!(out, "\\U{c:08x}")
    };
}

fn pick_quote(has_single: bool, has_double: bool) -> char {
    if has_single && !has_double {
        '"'
    } else {
        '\''
    }
}

fn write_text(cps: &[u32], out: &mut String) {
    let quote = pick_quote(cps.contains(&0x27), cps.contains(&0x22));
    out.push(quote);
    for &c in cps {
        match c {
            0x5c => out.push_str("\\\\"),
            0x09 => out.push_str("\\t"),
            0x0a => out.push_str("\\n"),
            0x0d => out.push_str("\\r"),
            _ if c == quote as u32 => {
                out.push('\\');
                out.push(quote);
            }
            0x20..=0x7e => out.push(c as u8 as char),
            _ => push_escape(c, out),
        }
    }
    out.push(quote);
}

fn write_bytes(b: &[u8], out: &mut String) {
    write_bytes_with(b, out, false)
}

/// bytearray's repr escapes `'` even inside double quotes.
fn write_bytes_with(b: &[u8], out: &mut String, always_escape_single: bool) {
    let quote = pick_quote(b.contains(&b'\''), b.contains(&b'"'));
    out.push('b');
    out.push(quote);
    for &c in b {
        match c {
            b'\\' => out.push_str("\\\\"),
            b'\'' if always_escape_single => out.push_str("\\'"),
            b'\t' => out.push_str("\\t"),
            b'\n' => out.push_str("\\n"),
            b'\r' => out.push_str("\\r"),
            _ if c == quote as u8 => {
                out.push('\\');
                out.push(quote);
            }
            0x20..=0x7e => out.push(c as char),
            _ => {
                let _ = write!(out, "\\x{c:02x}");
            }
        }
    }
    out.push(quote);
}

/// The reference interpreter's `repr(float)`: shortest round-trip digits,
/// scientific notation outside 1e-4 <= |x| < 1e16.
pub fn float_repr(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    let sci = format!("{:e}", x.abs());
    let (mantissa, exp) = sci.split_once('e').expect("LowerExp always has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let decpt = exp + 1;
    let mut out = String::new();
    if x < 0.0 {
        out.push('-');
    }
    if -4 < decpt && decpt <= 16 {
        let n = digits.len() as i32;
        if decpt <= 0 {
            out.push_str("0.");
            out.extend(std::iter::repeat('0').take((-decpt) as usize));
            out.push_str(&digits);
        } else if decpt >= n {
            out.push_str(&digits);
            out.extend(std::iter::repeat('0').take((decpt - n) as usize));
            out.push_str(".0");
        } else {
            out.push_str(&digits[..decpt as usize]);
            out.push('.');
            out.push_str(&digits[decpt as usize..]);
        }
    } else {
        out.push_str(&digits[..1]);
        if digits.len() > 1 {
            out.push('.');
            out.push_str(&digits[1..]);
        }
        let _ = write!(out, "e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    out
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use super::*;
    use crate::pvm::value::text_from_str;

    #[test]
    fn scrub_examples() {
        assert_eq!(scrub("<stub at 0x7f3a12bd9e80>"), "<stub at 0xADDR>");
        assert_eq!(scrub("0x123"), "0x123");
        assert_eq!(scrub("0X1234 and 0xabcd"), "0xADDR and 0xADDR");
        assert_eq!(scrub("0x0123456789abcdef01"), "0xADDR01");
        assert_eq!(scrub("0xADDR"), "0xADDR");
        assert_eq!(scrub("é0x1234"), "é0xADDR");
    }

    #[test]
    fn float_reprs() {
        // Frozen from the reference interpreter's repr().
        let cases = [
            (1.0, "1.0"),
            (0.1, "0.1"),
            (-2.5, "-2.5"),
            (1e16, "1e+16"),
            (1e15, "1000000000000000.0"),
            (123456789012345680.0, "1.2345678901234568e+17"),
            (0.0001, "0.0001"),
            (0.00001, "1e-05"),
            (1.5e-7, "1.5e-07"),
            (5e-324, "5e-324"),
            (1.7976931348623157e308, "1.7976931348623157e+308"),
            (9999999999999998.0, "9999999999999998.0"),
            (1.0 / 3.0, "0.3333333333333333"),
            (-0.0, "-0.0"),
            (f64::NEG_INFINITY, "-inf"),
        ];
        for (x, want) in cases {
            assert_eq!(float_repr(x), want, "{x}");
        }
    }

    #[test]
    fn text_and_bytes() {
        let heap = Heap::default();
        let r = |v: Value| render(&v, &heap);
        assert_eq!(r(Value::str("it's")), "\"it's\"");
        assert_eq!(r(Value::str("a'\"")), "'a\\'\"'");
        assert_eq!(r(Value::str("é\u{1F600}\u{7f}\n")), "'\\xe9\\U0001f600\\x7f\\n'");
        assert_eq!(r(Value::Str(Rc::from(vec![0xd800]))), "'\\ud800'");
        assert_eq!(r(Value::Bytes(Rc::from(&b"\x00'\\"[..]))), "b\"\\x00'\\\\\"");
        assert_eq!(r(Value::Bytes(Rc::from(&b"\x7f\x80"[..]))), "b'\\x7f\\x80'");
    }

    #[test]
    fn containers() {
        let mut heap = Heap::default();
        let one = Value::Tuple(Rc::from(vec![Value::int(1)]));
        assert_eq!(render(&one, &heap), "(1,)");
        assert_eq!(render(&Value::Tuple(Rc::from(vec![])), &heap), "()");
        let list = heap.list(vec![Value::None]);
        if let Value::List(id) = list {
            if let Obj::List(items) = heap.get_mut(id) {
                items.push(list.clone());
            }
        }
        assert_eq!(render(&list, &heap), "[None, [...]]");
        let d = heap.dict(vec![(Value::int(1), Value::Bool(true))]);
        assert_eq!(render(&d, &heap), "{1: True}");
        let s = Value::Set(heap.alloc(Obj::Set(vec![Value::str("b"), Value::str("a")])));
        assert_eq!(render(&s, &heap), "{'a', 'b'}");
        let e = Value::Set(heap.alloc(Obj::Set(vec![])));
        assert_eq!(render(&e, &heap), "set()");
        assert_eq!(render(&Value::FrozenSet(Rc::from(vec![])), &heap), "frozenset()");
        let ba = Value::ByteArray(heap.alloc(Obj::ByteArray(b"x".to_vec())));
        assert_eq!(render(&ba, &heap), "bytearray(b'x')");
        // Frozen from the reference interpreter: bytearray escapes ' regardless of quote.
        let quoted = Value::ByteArray(heap.alloc(Obj::ByteArray(b"'".to_vec())));
        assert_eq!(render(&quoted, &heap), "bytearray(b\"\\'\")");
        let both = Value::ByteArray(heap.alloc(Obj::ByteArray(b"'\"".to_vec())));
        assert_eq!(render(&both, &heap), "bytearray(b'\\'\"')");
    }

    #[test]
    fn stubs() {
        let mut heap = Heap::default();
        let q = Rc::new(QualName { module: text_from_str("posix"), name: text_from_str("system") });
        assert_eq!(render(&Value::StubFunction(q.clone()), &heap), "stub:function:posix.system");
        let inst = Value::StubInstance(heap.alloc(Obj::Instance { class: q.clone(), attrs: vec![] }));
        assert_eq!(render(&inst, &heap), "stub:instance:posix.system");
        if let Value::StubInstance(id) = inst {
            if let Obj::Instance { attrs, .. } = heap.get_mut(id) {
                attrs.push((Value::str("me"), inst.clone()));
            }
        }
        assert_eq!(render(&inst, &heap), "stub:instance:posix.system{'me': stub:instance:posix.system{...}}");
        let view = Value::View(Rc::new(ViewSource::Bytes(Rc::from(&b"ab"[..]))));
        assert_eq!(render(&view, &heap), "<memory at 0xADDR>");
    }

    #[test]
    fn huge_ints_are_unrenderable() {
        let heap = Heap::default();
        let big = BigInt::from(10).pow(4300);
        assert_eq!(render(&Value::Int(big.clone()), &heap), UNRENDERABLE);
        assert_eq!(render(&Value::Int(big - 1), &heap).len(), 4300);
    }
}
