//! Runtime values of the machine.
//!
//! Mutable containers live in a per-load [`Heap`] and are referenced by
//! [`ObjId`], so identity, aliasing and self-reference behave as they do in
//! the reference interpreter and everything is freed when the load ends.
//! Immutable values are shared through `Rc`.

use std::rc::Rc;

use num_bigint::BigInt;
use num_traits::{ToPrimitive, Zero};

/// Text as code points; lone surrogates are legal.
pub type Text = Rc<[u32]>;

pub fn text_from_str(s: &str) -> Text {
    s.chars().map(u32::from).collect::<Vec<_>>().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjId(pub(crate) usize);

/// The three shapes an imported name can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StubKind {
    Function,
    Class,
    Instance,
}

impl StubKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StubKind::Function => "function",
            StubKind::Class => "class",
            StubKind::Instance => "instance",
        }
    }
}

/// The `(module, name)` pair an import resolved from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualName {
    pub module: Text,
    pub name: Text,
}

/// Where a read-only buffer view takes its bytes from.
#[derive(Debug, Clone)]
pub enum ViewSource {
    Bytes(Rc<[u8]>),
    ByteArray(ObjId),
}

#[derive(Debug, Clone)]
pub enum Value {
    None,
    Bool(bool),
    Int(BigInt),
    Float(f64),
    Str(Text),
    Bytes(Rc<[u8]>),
    Tuple(Rc<[Value]>),
    FrozenSet(Rc<[Value]>),
    ByteArray(ObjId),
    List(ObjId),
    Dict(ObjId),
    Set(ObjId),
    /// A callable that ignores its arguments and returns none.
    StubFunction(Rc<QualName>),
    /// A class with no attributes; calling it without arguments instantiates it.
    StubClass(Rc<QualName>),
    StubInstance(ObjId),
    PersistentId(Rc<Value>),
    /// Read-only memory view handed out by READONLY_BUFFER.
    View(Rc<ViewSource>),
}

#[derive(Debug, Clone)]
pub enum Obj {
    ByteArray(Vec<u8>),
    List(Vec<Value>),
    Dict(Vec<(Value, Value)>),
    Set(Vec<Value>),
    Instance { class: Rc<QualName>, attrs: Vec<(Value, Value)> },
}

#[derive(Debug, Default, Clone)]
pub struct Heap {
    objs: Vec<Obj>,
}

impl Heap {
    pub fn alloc(&mut self, obj: Obj) -> ObjId {
        self.objs.push(obj);
        ObjId(self.objs.len() - 1)
    }

    pub fn get(&self, id: ObjId) -> &Obj {
        &self.objs[id.0]
    }

    pub fn get_mut(&mut self, id: ObjId) -> &mut Obj {
        &mut self.objs[id.0]
    }

    pub fn len(&self) -> usize {
        self.objs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objs.is_empty()
    }

    pub fn list(&mut self, items: Vec<Value>) -> Value {
        Value::List(self.alloc(Obj::List(items)))
    }

    pub fn dict(&mut self, items: Vec<(Value, Value)>) -> Value {
        Value::Dict(self.alloc(Obj::Dict(items)))
    }
}

/// Raised when a comparison or traversal nests deeper than the cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TooDeep;

impl Value {
    pub fn int(v: impl Into<BigInt>) -> Value {
        Value::Int(v.into())
    }

    pub fn str(s: &str) -> Value {
        Value::Str(text_from_str(s))
    }

    /// The integer an index-like value stands for (bools count).
    pub fn as_index(&self) -> Option<BigInt> {
        match self {
            Value::Bool(b) => Some(BigInt::from(u8::from(*b))),
            Value::Int(i) => Some(i.clone()),
            _ => None,
        }
    }

    /// A byte value in 0..=255, as accepted by bytearray item assignment.
    pub fn as_byte(&self) -> Option<u8> {
        self.as_index().and_then(|i| i.to_u8())
    }

    pub fn is_truthy(&self, heap: &Heap) -> bool {
        match self {
            Value::None => false,
            Value::Bool(b) => *b,
            Value::Int(i) => !i.is_zero(),
            Value::Float(f) => *f != 0.0,
            Value::Str(s) => !s.is_empty(),
            Value::Bytes(b) => !b.is_empty(),
            Value::Tuple(t) | Value::FrozenSet(t) => !t.is_empty(),
            Value::ByteArray(id) | Value::List(id) | Value::Dict(id) | Value::Set(id) => match heap.get(*id) {
                Obj::ByteArray(b) => !b.is_empty(),
                Obj::List(v) | Obj::Set(v) => !v.is_empty(),
                Obj::Dict(d) => !d.is_empty(),
                _ => true,
            },
            Value::View(src) => !view_bytes(src, heap).is_empty(),
            Value::StubFunction(_)
            | Value::StubClass(_)
            | Value::StubInstance(_)
            | Value::PersistentId(_) => true,
        }
    }

    /// Whether the value may be a dict key or set member.
    pub fn is_hashable(&self, heap: &Heap, depth: usize) -> Result<bool, TooDeep> {
        if depth == 0 {
            return Err(TooDeep);
        }
        Ok(match self {
            Value::ByteArray(_) | Value::List(_) | Value::Dict(_) | Value::Set(_) => false,
            Value::Tuple(items) => {
                for item in items.iter() {
                    if !item.is_hashable(heap, depth - 1)? {
                        return Ok(false);
                    }
                }
                true
            }
            _ => true,
        })
    }
}

pub fn view_bytes<'h>(src: &'h ViewSource, heap: &'h Heap) -> &'h [u8] {
    match src {
        ViewSource::Bytes(b) => b,
        ViewSource::ByteArray(id) => match heap.get(*id) {
            Obj::ByteArray(b) => b,
            _ => &[],
        },
    }
}

fn numeric_eq(a: &Value, b: &Value) -> Option<bool> {
    let as_int = Value::as_index;
    match (a, b) {
        (Value::Float(x), Value::Float(y)) => Some(x == y),
        (Value::Float(x), other) | (other, Value::Float(x)) => {
            let i = as_int(other)?;
            Some(float_eq_int(*x, &i))
        }
        _ => Some(as_int(a)? == as_int(b)?),
    }
}

fn float_eq_int(x: f64, i: &BigInt) -> bool {
    if !x.is_finite() || x.fract() != 0.0 {
        return false;
    }
    // Integral floats convert exactly.
    num_traits::FromPrimitive::from_f64(x).map(|b: BigInt| b == *i).unwrap_or(false)
}

/// Equality as used for dict-key and set-member lookup.
pub fn py_eq(a: &Value, b: &Value, heap: &Heap, depth: usize) -> Result<bool, TooDeep> {
    use Value::*;
    if depth == 0 {
        return Err(TooDeep);
    }
    if let Some(eq) = numeric_eq(a, b) {
        return Ok(eq);
    }
    Ok(match (a, b) {
        (None, None) => true,
        (Str(x), Str(y)) => x == y,
        (Bytes(x), Bytes(y)) => x == y,
        (Bytes(x), View(v)) | (View(v), Bytes(x)) => **x == *view_bytes(v, heap),
        (View(x), View(y)) => view_bytes(x, heap) == view_bytes(y, heap),
        (ByteArray(x), Bytes(y)) | (Bytes(y), ByteArray(x)) => match heap.get(*x) {
            Obj::ByteArray(bx) => **bx == **y,
            _ => false,
        },
        (Tuple(x), Tuple(y)) => {
            if Rc::ptr_eq(x, y) {
                return Ok(true);
            }
            if x.len() != y.len() {
                return Ok(false);
            }
            for (p, q) in x.iter().zip(y.iter()) {
                if !py_eq(p, q, heap, depth - 1)? {
                    return Ok(false);
                }
            }
            true
        }
        (FrozenSet(x), FrozenSet(y)) => {
            if x.len() != y.len() {
                return Ok(false);
            }
            for p in x.iter() {
                if !contains(y, p, heap, depth - 1)? {
                    return Ok(false);
                }
            }
            true
        }
        (StubFunction(x), StubFunction(y)) | (StubClass(x), StubClass(y)) => Rc::ptr_eq(x, y),
        (PersistentId(x), PersistentId(y)) => Rc::ptr_eq(x, y),
        (StubInstance(x), StubInstance(y))
        | (List(x), List(y))
        | (Dict(x), Dict(y))
        | (Set(x), Set(y))
        | (ByteArray(x), ByteArray(y)) => x == y,
        _ => false,
    })
}

pub fn contains(items: &[Value], needle: &Value, heap: &Heap, depth: usize) -> Result<bool, TooDeep> {
    for item in items {
        if py_eq(item, needle, heap, depth)? {
            return Ok(true);
        }
    }
    Ok(false)
}
