use std::collections::BTreeMap;
use std::rc::Rc;

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive};

use crate::generator::{Encoding, Payload};
use crate::label::{ErrorLabel, Fault};

use super::buffers::yielded_values;
use super::pyparse::{
    decode_ascii, decode_long, decode_utf8, decode_with, escape_decode, parse_float, parse_int, raw_unicode_escape,
};
use super::value::{contains, py_eq, Heap, Obj, ObjId, QualName, Text, TooDeep, Value, ViewSource};
use super::{stub_kind, LoadOptions, LoadResult, MachineState, StubKind};

const MAXSIZE: u64 = i64::MAX as u64;

type Step<T = ()> = Result<T, Fault>;

fn fail(label: ErrorLabel, detail: impl Into<String>) -> Fault {
    Fault::new(label, detail)
}

fn too_deep(_: TooDeep) -> Fault {
    fail(ErrorLabel::NotImplemented, "nesting exceeds the depth cap")
}

struct Frame {
    pos: usize,
    end: usize,
}

/// Byte source with the reference unframer's semantics: reads inside a frame
/// must be satisfied by the frame, an exhausted frame falls back to the file,
/// and file reads are short at end of input.
struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    frame: Option<Frame>,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> usize {
        self.frame.as_ref().map_or(self.pos, |f| f.pos)
    }

    fn file_read(&mut self, n: u64) -> &'a [u8] {
        let take = (self.data.len() - self.pos).min(usize::try_from(n).unwrap_or(usize::MAX));
        let out = &self.data[self.pos..self.pos + take];
        self.pos += take;
        out
    }

    fn file_readline(&mut self) -> &'a [u8] {
        let rest = &self.data[self.pos..];
        let len = rest.iter().position(|&b| b == b'\n').map_or(rest.len(), |i| i + 1);
        self.pos += len;
        &rest[..len]
    }

    fn read(&mut self, n: u64) -> Step<&'a [u8]> {
        let Some(f) = self.frame.as_mut() else {
            return Ok(self.file_read(n));
        };
        let take = (f.end - f.pos).min(usize::try_from(n).unwrap_or(usize::MAX));
        let out = &self.data[f.pos..f.pos + take];
        f.pos += take;
        if take == 0 && n != 0 {
            self.frame = None;
            return Ok(self.file_read(n));
        }
        if (take as u64) < n {
            return Err(fail(ErrorLabel::FrameViolation, "pickle exhausted before end of frame"));
        }
        Ok(out)
    }

    fn readline(&mut self) -> Step<&'a [u8]> {
        let Some(f) = self.frame.as_mut() else {
            return Ok(self.file_readline());
        };
        let rest = &self.data[f.pos..f.end];
        let len = rest.iter().position(|&b| b == b'\n').map_or(rest.len(), |i| i + 1);
        f.pos += len;
        if len == 0 {
            self.frame = None;
            return Ok(self.file_readline());
        }
        if rest[len - 1] != b'\n' {
            return Err(fail(ErrorLabel::FrameViolation, "pickle exhausted before end of frame"));
        }
        Ok(&rest[..len])
    }

    fn readinto(&mut self, n: u64) -> Step<&'a [u8]> {
        // Same shape as read(): an empty frame falls through to the file,
        // a partial one is an error.
        self.read(n)
    }

    fn load_frame(&mut self, size: u64) -> Step {
        if let Some(f) = &self.frame {
            if f.pos < f.end {
                return Err(fail(ErrorLabel::FrameViolation, "beginning of a new frame before end of current frame"));
            }
        }
        let start = self.pos;
        let len = self.file_read(size).len();
        self.frame = Some(Frame { pos: start, end: start + len });
        Ok(())
    }
}

struct Machine<'a, 'o> {
    r: Reader<'a>,
    encoding: Encoding,
    opts: &'o LoadOptions,
    buffers: Option<std::vec::IntoIter<Value>>,
    stack: Vec<Value>,
    metastack: Vec<Vec<Value>>,
    memo: BTreeMap<BigInt, Value>,
    heap: Heap,
}

pub(super) fn run(payload: &Payload, opts: &LoadOptions) -> LoadResult {
    let mut m = Machine {
        r: Reader { data: &payload.pickle_bytes, pos: 0, frame: None },
        encoding: payload.encoding,
        opts,
        buffers: yielded_values(payload.buffers_choice, payload.seed, opts.buffers_item_count).map(Vec::into_iter),
        stack: Vec::new(),
        metastack: Vec::new(),
        memo: BTreeMap::new(),
        heap: Heap::default(),
    };
    let outcome = m.execute();
    LoadResult {
        outcome,
        final_state: MachineState { stack: m.stack, metastack: m.metastack, memo: m.memo, heap: m.heap },
    }
}

impl<'a> Machine<'a, '_> {
    fn execute(&mut self) -> Step<Value> {
        loop {
            let offset = self.r.offset();
            match self.step() {
                Ok(Some(value)) => return Ok(value),
                Ok(None) => {}
                Err(fault) => return Err(fault.at(offset)),
            }
        }
    }

    // ---- stack helpers

    fn push(&mut self, v: Value) {
        self.stack.push(v);
    }

    fn pop(&mut self) -> Step<Value> {
        self.stack.pop().ok_or_else(|| fail(ErrorLabel::StackUnderflow, "pop from empty stack"))
    }

    fn top(&self) -> Step<Value> {
        self.stack.last().cloned().ok_or_else(|| fail(ErrorLabel::StackUnderflow, "empty stack"))
    }

    fn top_mut(&mut self) -> Step<&mut Value> {
        self.stack.last_mut().ok_or_else(|| fail(ErrorLabel::StackUnderflow, "empty stack"))
    }

    fn pop_mark(&mut self) -> Step<Vec<Value>> {
        let below = self.metastack.pop().ok_or_else(|| fail(ErrorLabel::NoMark, "no mark on the metastack"))?;
        Ok(std::mem::replace(&mut self.stack, below))
    }

    // ---- argument readers

    fn exact<const N: usize>(&mut self) -> Step<[u8; N]> {
        let data = self.r.read(N as u64)?;
        data.try_into().map_err(|_| fail(ErrorLabel::DecodeFailure, "truncated fixed-width argument"))
    }

    fn u8_arg(&mut self) -> Step<u8> {
        Ok(self.exact::<1>()?[0])
    }

    fn line_arg(&mut self) -> Step<&'a [u8]> {
        let line = self.r.readline()?;
        Ok(&line[..line.len().saturating_sub(1)])
    }

    fn sized(&mut self, n: u64) -> Step<&'a [u8]> {
        if n > MAXSIZE {
            return Err(fail(ErrorLabel::BadArgument, "length exceeds maxsize"));
        }
        self.r.read(n)
    }

    fn decode_string(&self, data: &[u8]) -> Step<Value> {
        decode_with(self.encoding, data)
            .map(|cps| Value::Str(cps.into()))
            .ok_or_else(|| fail(ErrorLabel::DecodeFailure, format!("cannot decode string as {}", self.encoding)))
    }

    // ---- object protocol

    fn depth(&self) -> usize {
        self.opts.depth_cap
    }

    fn import(&mut self, module: Text, name: Text) -> Value {
        let kind = stub_kind(&module, &name);
        let q = Rc::new(QualName { module, name });
        match kind {
            StubKind::Function => Value::StubFunction(q),
            StubKind::Class => Value::StubClass(q),
            StubKind::Instance => self.instance_of(q),
        }
    }

    fn instance_of(&mut self, class: Rc<QualName>) -> Value {
        Value::StubInstance(self.heap.alloc(Obj::Instance { class, attrs: Vec::new() }))
    }

    /// Attribute looked up in a stub instance's own dictionary.
    fn instance_attr(&self, target: &Value, name: &str) -> Option<Value> {
        let Value::StubInstance(id) = target else { return None };
        let Obj::Instance { attrs, .. } = self.heap.get(*id) else { return None };
        attrs.iter().find_map(|(k, v)| match k {
            Value::Str(t) if t.iter().copied().eq(name.chars().map(u32::from)) => Some(v.clone()),
            _ => None,
        })
    }

    /// The items `*value` unpacks to.
    fn iterate(&mut self, value: &Value) -> Step<Vec<Value>> {
        Ok(match value {
            Value::Tuple(t) | Value::FrozenSet(t) => t.to_vec(),
            Value::Str(s) => s.iter().map(|&c| Value::Str(Rc::from(vec![c]))).collect(),
            Value::Bytes(b) => b.iter().map(|&x| Value::int(x)).collect(),
            Value::View(src) => super::value::view_bytes(src, &self.heap).iter().map(|&x| Value::int(x)).collect(),
            Value::List(id) | Value::Set(id) | Value::Dict(id) | Value::ByteArray(id) => match self.heap.get(*id) {
                Obj::List(v) | Obj::Set(v) => v.clone(),
                Obj::Dict(d) => d.iter().map(|(k, _)| k.clone()).collect(),
                Obj::ByteArray(b) => b.iter().map(|&x| Value::int(x)).collect(),
                Obj::Instance { .. } => return Err(fail(ErrorLabel::BadArgument, "object is not iterable")),
            },
            _ => return Err(fail(ErrorLabel::BadArgument, "argument is not iterable")),
        })
    }

    fn call(&mut self, func: &Value, args: Vec<Value>) -> Step<Value> {
        match func {
            Value::StubFunction(_) => Ok(Value::None),
            Value::StubClass(q) if args.is_empty() => Ok(self.instance_of(q.clone())),
            Value::StubClass(_) => Err(fail(ErrorLabel::BadArgument, "stub class takes no arguments")),
            _ => Err(fail(ErrorLabel::BadArgument, "object is not callable")),
        }
    }

    fn instantiate(&mut self, klass: &Value, args: Vec<Value>) -> Step<Value> {
        match klass {
            Value::StubClass(q) if args.is_empty() => Ok(self.instance_of(q.clone())),
            _ => self.call(klass, args),
        }
    }

    fn check_hashable(&self, v: &Value) -> Step {
        if v.is_hashable(&self.heap, self.depth()).map_err(too_deep)? {
            Ok(())
        } else {
            Err(fail(ErrorLabel::BadArgument, "unhashable type"))
        }
    }

    fn find_key(&self, pairs: &[(Value, Value)], key: &Value) -> Step<Option<usize>> {
        for (i, (k, _)) in pairs.iter().enumerate() {
            if py_eq(k, key, &self.heap, self.depth()).map_err(too_deep)? {
                return Ok(Some(i));
            }
        }
        Ok(None)
    }

    /// `mapping[key] = value` where the pairs live in object `id`.
    fn map_insert(&mut self, id: ObjId, key: Value, value: Value) -> Step {
        self.check_hashable(&key)?;
        let pairs = match self.heap.get(id) {
            Obj::Dict(p) | Obj::Instance { attrs: p, .. } => p,
            _ => return Err(fail(ErrorLabel::BadArgument, "not a mapping")),
        };
        let found = self.find_key(pairs, &key)?;
        match self.heap.get_mut(id) {
            Obj::Dict(p) | Obj::Instance { attrs: p, .. } => match found {
                Some(i) => p[i].1 = value,
                None => p.push((key, value)),
            },
            _ => unreachable!("checked above"),
        }
        Ok(())
    }

    fn set_add(&mut self, id: ObjId, item: Value) -> Step {
        self.check_hashable(&item)?;
        let Obj::Set(items) = self.heap.get(id) else {
            return Err(fail(ErrorLabel::BadArgument, "not a set"));
        };
        if !contains(items, &item, &self.heap, self.depth()).map_err(too_deep)? {
            if let Obj::Set(items) = self.heap.get_mut(id) {
                items.push(item);
            }
        }
        Ok(())
    }

    fn set_item(&mut self, target: &Value, key: Value, value: Value) -> Step {
        match target {
            Value::Dict(id) => self.map_insert(*id, key, value),
            Value::List(id) | Value::ByteArray(id) => {
                let len = match self.heap.get(*id) {
                    Obj::List(v) => v.len(),
                    Obj::ByteArray(b) => b.len(),
                    _ => 0,
                };
                let index = key.as_index().ok_or_else(|| fail(ErrorLabel::BadArgument, "indices must be integers"))?;
                let index = if index.is_negative() { index + BigInt::from(len) } else { index };
                let index = index
                    .to_usize()
                    .filter(|&i| i < len)
                    .ok_or_else(|| fail(ErrorLabel::BadArgument, "assignment index out of range"))?;
                match self.heap.get_mut(*id) {
                    Obj::List(v) => v[index] = value,
                    Obj::ByteArray(b) => {
                        b[index] = value.as_byte().ok_or_else(|| fail(ErrorLabel::BadArgument, "byte must be in range(0, 256)"))?
                    }
                    _ => {}
                }
                Ok(())
            }
            _ => Err(fail(ErrorLabel::BadArgument, "object does not support item assignment")),
        }
    }

    fn append_to(&mut self, target: &Value, value: Value) -> Step {
        match target {
            Value::List(id) => {
                if let Obj::List(v) = self.heap.get_mut(*id) {
                    v.push(value);
                }
                Ok(())
            }
            Value::ByteArray(id) => {
                let b = value.as_byte().ok_or_else(|| fail(ErrorLabel::BadArgument, "byte must be in range(0, 256)"))?;
                if let Obj::ByteArray(v) = self.heap.get_mut(*id) {
                    v.push(b);
                }
                Ok(())
            }
            _ => match self.instance_attr(target, "append") {
                Some(append) => self.call(&append, vec![value]).map(drop),
                None => Err(fail(ErrorLabel::BadArgument, "object has no attribute 'append'")),
            },
        }
    }

    fn extend(&mut self, target: &Value, items: Vec<Value>) -> Step {
        match target {
            Value::List(id) => {
                if let Obj::List(v) = self.heap.get_mut(*id) {
                    v.extend(items);
                }
                Ok(())
            }
            Value::ByteArray(id) => {
                let bytes = items
                    .iter()
                    .map(Value::as_byte)
                    .collect::<Option<Vec<u8>>>()
                    .ok_or_else(|| fail(ErrorLabel::BadArgument, "byte must be in range(0, 256)"))?;
                if let Obj::ByteArray(v) = self.heap.get_mut(*id) {
                    v.extend(bytes);
                }
                Ok(())
            }
            _ => {
                if let Some(extend) = self.instance_attr(target, "extend") {
                    let list = self.heap.list(items);
                    return self.call(&extend, vec![list]).map(drop);
                }
                if let Some(append) = self.instance_attr(target, "append") {
                    for item in items {
                        self.call(&append, vec![item])?;
                    }
                    return Ok(());
                }
                Err(fail(ErrorLabel::BadArgument, "object has no attribute 'extend'"))
            }
        }
    }

    fn build(&mut self) -> Step {
        let state = self.pop()?;
        let inst = self.top()?;
        if let Some(setstate) = self.instance_attr(&inst, "__setstate__") {
            self.call(&setstate, vec![state])?;
            return Ok(());
        }
        let (state, slotstate) = match &state {
            Value::Tuple(t) if t.len() == 2 => (t[0].clone(), t[1].clone()),
            _ => (state, Value::None),
        };
        if state.is_truthy(&self.heap) {
            let target = match &inst {
                Value::StubInstance(id) => Some(*id),
                Value::StubFunction(_) => None,
                Value::StubClass(_) => {
                    return Err(fail(ErrorLabel::BadArgument, "class namespace does not support item assignment"))
                }
                _ => return Err(fail(ErrorLabel::BadArgument, "object has no attribute '__dict__'")),
            };
            for (k, v) in self.dict_items(&state)? {
                if let Some(id) = target {
                    self.map_insert(id, k, v)?;
                }
            }
        }
        if slotstate.is_truthy(&self.heap) {
            for (k, v) in self.dict_items(&slotstate)? {
                if !matches!(k, Value::Str(_)) {
                    return Err(fail(ErrorLabel::BadArgument, "attribute name must be string"));
                }
                match &inst {
                    Value::StubInstance(id) => self.map_insert(*id, k, v)?,
                    Value::StubFunction(_) | Value::StubClass(_) => {}
                    _ => return Err(fail(ErrorLabel::BadArgument, "object attributes are read-only")),
                }
            }
        }
        Ok(())
    }

    fn dict_items(&self, v: &Value) -> Step<Vec<(Value, Value)>> {
        match v {
            Value::Dict(id) => match self.heap.get(*id) {
                Obj::Dict(pairs) => Ok(pairs.clone()),
                _ => unreachable!("dict values point at dict objects"),
            },
            _ => Err(fail(ErrorLabel::BadArgument, "object has no attribute 'items'")),
        }
    }

    fn memo_put(&mut self, key: BigInt) -> Step {
        let top = self.top()?;
        self.memo.insert(key, top);
        Ok(())
    }

    fn memo_get(&mut self, key: BigInt) -> Step {
        match self.memo.get(&key) {
            Some(v) => {
                let v = v.clone();
                self.push(v);
                Ok(())
            }
            None => Err(fail(ErrorLabel::MemoMiss, format!("memo value not found at index {key}"))),
        }
    }

    fn int_line(&mut self, base: u32) -> Step<BigInt> {
        let data = self.line_arg()?;
        parse_int(data, base).ok_or_else(|| fail(ErrorLabel::DecodeFailure, "invalid literal for int()"))
    }

    fn name_line(&mut self, utf8: bool) -> Step<Text> {
        let data = self.line_arg()?;
        let cps = if utf8 { decode_utf8(data, false) } else { decode_ascii(data) };
        cps.map(Text::from).ok_or_else(|| fail(ErrorLabel::DecodeFailure, "cannot decode name"))
    }

    // ---- dispatch

    fn step(&mut self) -> Step<Option<Value>> {
        let key = self.r.read(1)?;
        let Some(&op) = key.first() else {
            return Err(fail(ErrorLabel::DecodeFailure, "unexpected end of pickle data"));
        };
        match op {
            b'.' => return self.pop().map(Some),
            b'(' => {
                let below = std::mem::take(&mut self.stack);
                self.metastack.push(below);
            }
            b'0' => {
                if self.stack.pop().is_none() {
                    self.pop_mark()?;
                }
            }
            b'1' => {
                self.pop_mark()?;
            }
            b'2' => {
                let top = self.top()?;
                self.push(top);
            }
            b'N' => self.push(Value::None),
            0x88 => self.push(Value::Bool(true)),
            0x89 => self.push(Value::Bool(false)),
            b'I' => {
                let data = self.r.readline()?;
                let v = match data {
                    b"00\n" => Value::Bool(false),
                    b"01\n" => Value::Bool(true),
                    _ => Value::Int(
                        parse_int(data, 0).ok_or_else(|| fail(ErrorLabel::DecodeFailure, "invalid literal for int()"))?,
                    ),
                };
                self.push(v);
            }
            b'J' => {
                let v = i32::from_le_bytes(self.exact()?);
                self.push(Value::int(v));
            }
            b'K' => {
                let v = self.u8_arg()?;
                self.push(Value::int(v));
            }
            b'M' => {
                let v = u16::from_le_bytes(self.exact()?);
                self.push(Value::int(v));
            }
            b'L' => {
                let data = self.line_arg()?;
                let data = data.strip_suffix(b"L").unwrap_or(data);
                let v = parse_int(data, 0).ok_or_else(|| fail(ErrorLabel::DecodeFailure, "invalid literal for int()"))?;
                self.push(Value::Int(v));
            }
            0x8a => {
                let n = self.u8_arg()?;
                let v = decode_long(self.r.read(u64::from(n))?);
                self.push(Value::Int(v));
            }
            0x8b => {
                let n = i32::from_le_bytes(self.exact()?);
                if n < 0 {
                    return Err(fail(ErrorLabel::BadArgument, "LONG pickle has negative byte count"));
                }
                let v = decode_long(self.r.read(n as u64)?);
                self.push(Value::Int(v));
            }
            b'F' => {
                let data = self.line_arg()?;
                let v = parse_float(data).ok_or_else(|| fail(ErrorLabel::DecodeFailure, "could not convert string to float"))?;
                self.push(Value::Float(v));
            }
            b'G' => {
                let v = f64::from_be_bytes(self.exact()?);
                self.push(Value::Float(v));
            }
            b'S' => {
                let data = self.line_arg()?;
                let quoted = data.len() >= 2 && data[0] == data[data.len() - 1] && matches!(data[0], b'"' | b'\'');
                if !quoted {
                    return Err(fail(ErrorLabel::DecodeFailure, "the STRING opcode argument must be quoted"));
                }
                let raw = escape_decode(&data[1..data.len() - 1])
                    .ok_or_else(|| fail(ErrorLabel::DecodeFailure, "invalid escape in STRING argument"))?;
                let v = self.decode_string(&raw)?;
                self.push(v);
            }
            b'T' => {
                let n = i32::from_le_bytes(self.exact()?);
                if n < 0 {
                    return Err(fail(ErrorLabel::BadArgument, "BINSTRING pickle has negative byte count"));
                }
                let data = self.r.read(n as u64)?;
                let v = self.decode_string(data)?;
                self.push(v);
            }
            b'U' => {
                let n = self.u8_arg()?;
                let data = self.r.read(u64::from(n))?;
                let v = self.decode_string(data)?;
                self.push(v);
            }
            b'V' => {
                let data = self.line_arg()?;
                let cps = raw_unicode_escape(data)
                    .ok_or_else(|| fail(ErrorLabel::DecodeFailure, "truncated \\uXXXX escape"))?;
                self.push(Value::Str(cps.into()));
            }
            b'X' | 0x8c | 0x8d => {
                let n = match op {
                    b'X' => u64::from(u32::from_le_bytes(self.exact()?)),
                    0x8c => u64::from(self.u8_arg()?),
                    _ => u64::from_le_bytes(self.exact()?),
                };
                let data = self.sized(n)?;
                let cps = decode_utf8(data, true).ok_or_else(|| fail(ErrorLabel::DecodeFailure, "invalid utf-8"))?;
                self.push(Value::Str(cps.into()));
            }
            b'B' | b'C' | 0x8e => {
                let n = match op {
                    b'B' => u64::from(u32::from_le_bytes(self.exact()?)),
                    b'C' => u64::from(self.u8_arg()?),
                    _ => u64::from_le_bytes(self.exact()?),
                };
                let data = self.sized(n)?;
                self.push(Value::Bytes(Rc::from(data)));
            }
            0x96 => {
                let n = u64::from_le_bytes(self.exact()?);
                if n > MAXSIZE {
                    return Err(fail(ErrorLabel::BadArgument, "BYTEARRAY8 exceeds system's maximum size"));
                }
                if n > self.opts.memory_cap {
                    return Err(fail(ErrorLabel::BudgetExceeded, "bytearray allocation exceeds the memory budget"));
                }
                let data = self.r.readinto(n)?.to_vec();
                let id = self.heap.alloc(Obj::ByteArray(data));
                self.push(Value::ByteArray(id));
            }
            0x97 => {
                let buffers = self
                    .buffers
                    .as_mut()
                    .ok_or_else(|| fail(ErrorLabel::BuffersExhausted, "pickle stream refers to out-of-band data but no buffers were given"))?;
                let v = buffers.next().ok_or_else(|| fail(ErrorLabel::BuffersExhausted, "not enough out-of-band buffers"))?;
                self.push(v);
            }
            0x98 => {
                let top = self.top_mut()?;
                match top {
                    Value::Bytes(_) | Value::View(_) => {}
                    Value::ByteArray(id) => *top = Value::View(Rc::new(ViewSource::ByteArray(*id))),
                    _ => return Err(fail(ErrorLabel::BadArgument, "a bytes-like object is required")),
                }
            }
            b')' => self.push(Value::Tuple(Rc::from(Vec::new()))),
            b']' => {
                let v = self.heap.list(Vec::new());
                self.push(v);
            }
            b'}' => {
                let v = self.heap.dict(Vec::new());
                self.push(v);
            }
            0x8f => {
                let id = self.heap.alloc(Obj::Set(Vec::new()));
                self.push(Value::Set(id));
            }
            b't' => {
                let items = self.pop_mark()?;
                self.push(Value::Tuple(items.into()));
            }
            0x85..=0x87 => {
                let n = usize::from(op - 0x84);
                if self.stack.len() < n {
                    return Err(fail(ErrorLabel::StackUnderflow, "tuple needs more stack items"));
                }
                let items = self.stack.split_off(self.stack.len() - n);
                self.push(Value::Tuple(items.into()));
            }
            b'l' => {
                let items = self.pop_mark()?;
                let v = self.heap.list(items);
                self.push(v);
            }
            b'd' => {
                let items = self.pop_mark()?;
                if items.len() % 2 != 0 {
                    return Err(fail(ErrorLabel::StackUnderflow, "odd number of items for DICT"));
                }
                let id = match self.heap.dict(Vec::new()) {
                    Value::Dict(id) => id,
                    _ => unreachable!(),
                };
                let mut it = items.into_iter();
                while let (Some(k), Some(v)) = (it.next(), it.next()) {
                    self.map_insert(id, k, v)?;
                }
                self.push(Value::Dict(id));
            }
            0x91 => {
                let items = self.pop_mark()?;
                let mut unique: Vec<Value> = Vec::with_capacity(items.len());
                for item in items {
                    self.check_hashable(&item)?;
                    if !contains(&unique, &item, &self.heap, self.depth()).map_err(too_deep)? {
                        unique.push(item);
                    }
                }
                self.push(Value::FrozenSet(unique.into()));
            }
            b'a' => {
                let value = self.pop()?;
                let target = self.top()?;
                self.append_to(&target, value)?;
            }
            b'e' => {
                let items = self.pop_mark()?;
                let target = self.top()?;
                self.extend(&target, items)?;
            }
            b's' => {
                let value = self.pop()?;
                let key = self.pop()?;
                let target = self.top()?;
                self.set_item(&target, key, value)?;
            }
            b'u' => {
                let items = self.pop_mark()?;
                let target = self.top()?;
                let mut it = items.into_iter();
                while let Some(k) = it.next() {
                    let v = it.next().ok_or_else(|| fail(ErrorLabel::StackUnderflow, "odd number of items for SETITEMS"))?;
                    self.set_item(&target, k, v)?;
                }
            }
            0x90 => {
                let items = self.pop_mark()?;
                let target = self.top()?;
                match &target {
                    Value::Set(id) => {
                        for item in items {
                            self.set_add(*id, item)?;
                        }
                    }
                    _ => {
                        let add = self
                            .instance_attr(&target, "add")
                            .ok_or_else(|| fail(ErrorLabel::BadArgument, "object has no attribute 'add'"))?;
                        for item in items {
                            self.call(&add, vec![item])?;
                        }
                    }
                }
            }
            b'p' => {
                let key = self.int_line(10)?;
                if key.is_negative() {
                    return Err(fail(ErrorLabel::BadArgument, "negative PUT argument"));
                }
                self.memo_put(key)?;
            }
            b'q' => {
                let key = self.u8_arg()?;
                self.memo_put(BigInt::from(key))?;
            }
            b'r' => {
                let key = u32::from_le_bytes(self.exact()?);
                self.memo_put(BigInt::from(key))?;
            }
            0x94 => {
                let key = BigInt::from(self.memo.len());
                self.memo_put(key)?;
            }
            b'g' => {
                let key = self.int_line(10)?;
                self.memo_get(key)?;
            }
            b'h' => {
                let key = self.u8_arg()?;
                self.memo_get(BigInt::from(key))?;
            }
            b'j' => {
                let key = u32::from_le_bytes(self.exact()?);
                self.memo_get(BigInt::from(key))?;
            }
            b'c' => {
                let module = self.name_line(true)?;
                let name = self.name_line(true)?;
                let v = self.import(module, name);
                self.push(v);
            }
            0x93 => {
                let name = self.pop()?;
                let module = self.pop()?;
                let (Value::Str(module), Value::Str(name)) = (module, name) else {
                    return Err(fail(ErrorLabel::BadArgument, "STACK_GLOBAL requires str"));
                };
                let v = self.import(module, name);
                self.push(v);
            }
            b'i' => {
                let module = self.name_line(false)?;
                let name = self.name_line(false)?;
                let klass = self.import(module, name);
                let args = self.pop_mark()?;
                let v = self.instantiate(&klass, args)?;
                self.push(v);
            }
            b'o' => {
                let mut args = self.pop_mark()?;
                if args.is_empty() {
                    return Err(fail(ErrorLabel::StackUnderflow, "OBJ needs a class"));
                }
                let klass = args.remove(0);
                let v = self.instantiate(&klass, args)?;
                self.push(v);
            }
            b'R' => {
                let args = self.pop()?;
                let func = self.top()?;
                let args = self.iterate(&args)?;
                let v = self.call(&func, args)?;
                *self.top_mut()? = v;
            }
            0x81 | 0x92 => {
                let kwargs_empty = if op == 0x92 {
                    let kwargs = self.pop()?;
                    let pairs = self.dict_items(&kwargs)?;
                    if pairs.iter().any(|(k, _)| !matches!(k, Value::Str(_))) {
                        return Err(fail(ErrorLabel::BadArgument, "keywords must be strings"));
                    }
                    pairs.is_empty()
                } else {
                    true
                };
                let args = self.pop()?;
                let cls = self.pop()?;
                let args = self.iterate(&args)?;
                match cls {
                    Value::StubClass(q) if args.is_empty() && kwargs_empty => {
                        let v = self.instance_of(q);
                        self.push(v);
                    }
                    Value::StubClass(_) => return Err(fail(ErrorLabel::BadArgument, "stub class takes no arguments")),
                    _ => return Err(fail(ErrorLabel::BadArgument, "__new__ target is not a type object")),
                }
            }
            b'b' => self.build()?,
            b'P' => {
                let data = self.line_arg()?;
                let pid = decode_ascii(data)
                    .ok_or_else(|| fail(ErrorLabel::DecodeFailure, "persistent IDs in protocol 0 must be ASCII strings"))?;
                self.push(Value::PersistentId(Rc::new(Value::Str(pid.into()))));
            }
            b'Q' => {
                let pid = self.pop()?;
                self.push(Value::PersistentId(Rc::new(pid)));
            }
            0x80 => {
                let proto = self.u8_arg()?;
                if proto > 5 {
                    return Err(fail(ErrorLabel::BadArgument, format!("unsupported pickle protocol: {proto}")));
                }
            }
            0x95 => {
                let size = u64::from_le_bytes(self.exact()?);
                if size > MAXSIZE {
                    return Err(fail(ErrorLabel::BadArgument, "frame size > sys.maxsize"));
                }
                self.r.load_frame(size)?;
            }
            0x82..=0x84 => {
                let code: i64 = match op {
                    0x82 => i64::from(self.u8_arg()?),
                    0x83 => i64::from(u16::from_le_bytes(self.exact()?)),
                    _ => i64::from(i32::from_le_bytes(self.exact()?)),
                };
                let why = if code <= 0 { "EXT specifies code <= 0".to_string() } else { format!("unregistered extension code {code}") };
                return Err(fail(ErrorLabel::BadArgument, why));
            }
            other => return Err(fail(ErrorLabel::UnknownOpcode, format!("invalid load key {:?}", other as char))),
        }
        Ok(None)
    }
}
