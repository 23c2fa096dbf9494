//! Discrepancy detection, minimization and deduplication.
//!
//! Only the ok/error bit of each record decides an error discrepancy.
//! Storage discrepancies compare canonical strings field by field, and only
//! fields both deserializer records expose. Disassemblers never take part in
//! storage comparison. Records flagged as out of budget are ignored.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::disasm;
use crate::generator::Payload;
use crate::harness::{ExecutionRecord, Harness, TargetId, TargetKind};
use crate::hashing::fnv1a64;
use crate::label::ErrorLabel;
use crate::opcodes::{self, Instruction};
use crate::pvm::pyparse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscrepancyKind {
    Error,
    Storage,
}

impl fmt::Display for DiscrepancyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscrepancyKind::Error => "error",
            DiscrepancyKind::Storage => "storage",
        })
    }
}

/// Per-target entries ordered by target id. Error vectors hold `ok` or
/// `error`; storage vectors hold an equality-class letter per deserializer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutcomeVector(pub Vec<(TargetId, String)>);

impl OutcomeVector {
    pub fn get(&self, target: TargetId) -> Option<&str> {
        self.0.iter().find(|(t, _)| *t == target).map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for OutcomeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, (t, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{t}: {v}")?;
        }
        f.write_str(")")
    }
}

/// What the oracle reports for one execution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: DiscrepancyKind,
    pub outcome_vector: OutcomeVector,
}

fn comparable(records: &[ExecutionRecord]) -> Vec<&ExecutionRecord> {
    let mut out: Vec<_> = records.iter().filter(|r| r.is_comparable()).collect();
    out.sort_by_key(|r| r.target);
    out
}

/// True when every field present in both records holds the same strings.
pub fn storage_agrees(a: &ExecutionRecord, b: &ExecutionRecord) -> bool {
    fn same<T: PartialEq>(x: &Option<T>, y: &Option<T>) -> bool {
        match (x, y) {
            (Some(x), Some(y)) => x == y,
            _ => true,
        }
    }
    if !same(&a.result_repr, &b.result_repr) {
        return false;
    }
    match (&a.state, &b.state) {
        (Some(x), Some(y)) => same(&x.stack, &y.stack) && same(&x.metastack, &y.metastack) && same(&x.memo, &y.memo),
        _ => true,
    }
}

pub fn detect(records: &[ExecutionRecord]) -> Option<Verdict> {
    let records = comparable(records);
    if records.len() < 2 {
        return None;
    }
    let first_ok = records[0].is_ok();
    if records.iter().any(|r| r.is_ok() != first_ok) {
        let vector = records
            .iter()
            .map(|r| (r.target, if r.is_ok() { "ok" } else { "error" }.to_owned()))
            .collect();
        return Some(Verdict { kind: DiscrepancyKind::Error, outcome_vector: OutcomeVector(vector) });
    }
    if !first_ok {
        return None;
    }
    let deser: Vec<_> = records.into_iter().filter(|r| r.kind == TargetKind::Deserializer).collect();
    // Each record joins the class of the first earlier record it agrees with.
    let mut classes: Vec<usize> = Vec::with_capacity(deser.len());
    let mut next_class = 0;
    for (i, r) in deser.iter().enumerate() {
        match (0..i).find(|&j| storage_agrees(deser[j], r)) {
            Some(j) => classes.push(classes[j]),
            None => {
                classes.push(next_class);
                next_class += 1;
            }
        }
    }
    let all_agree = (0..deser.len()).all(|i| (0..i).all(|j| storage_agrees(deser[i], deser[j])));
    if all_agree {
        return None;
    }
    let vector = deser
        .iter()
        .zip(&classes)
        .map(|(r, &c)| (r.target, char::from(b'A' + (c % 26) as u8).to_string()))
        .collect();
    Some(Verdict { kind: DiscrepancyKind::Storage, outcome_vector: OutcomeVector(vector) })
}

/// Deduplication key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Signature {
    pub kind: DiscrepancyKind,
    pub outcome_vector: OutcomeVector,
    pub opcode_profile: BTreeSet<String>,
}

impl Signature {
    pub fn new(verdict: &Verdict, payload: &Payload) -> Self {
        Signature {
            kind: verdict.kind,
            outcome_vector: verdict.outcome_vector.clone(),
            opcode_profile: opcode_profile(&payload.pickle_bytes),
        }
    }

    /// Stable 16-hex-digit digest used as the finding directory name.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("signature serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// Names of the opcodes framed in `bytes`, up to the first framing error.
pub fn opcode_profile(bytes: &[u8]) -> BTreeSet<String> {
    opcodes::instructions(bytes).map_while(Result::ok).map(|i| i.spec.name.to_owned()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub kind: DiscrepancyKind,
    pub signature: Signature,
    pub payload: Payload,
    pub original_payload: Payload,
    pub records: Vec<ExecutionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DedupResult {
    Kept,
    Discarded,
}

pub fn dedup(finding: &Discrepancy, seen: &mut HashSet<Signature>) -> DedupResult {
    if seen.insert(finding.signature.clone()) {
        DedupResult::Kept
    } else {
        DedupResult::Discarded
    }
}

/// Splits a payload into removable units: whole instructions, with any
/// unframeable tail kept as one trailing unit. The final STOP is reported
/// separately because it is never removed.
fn units(bytes: &[u8]) -> (Vec<&[u8]>, &[u8]) {
    let mut out = Vec::new();
    let mut pos = 0;
    for insn in opcodes::instructions(bytes) {
        match insn {
            Ok(Instruction { raw, .. }) => {
                out.push(raw);
                pos += raw.len();
            }
            Err(_) => break,
        }
    }
    if pos < bytes.len() {
        out.push(&bytes[pos..]);
    }
    match out.last() {
        Some(last) if *last == [opcodes::STOP] => {
            let stop = out.pop().expect("non-empty");
            (out, stop)
        }
        _ => (out, &[]),
    }
}

fn join(parts: &[&[u8]], stop: &[u8]) -> Vec<u8> {
    let mut out: Vec<u8> = parts.concat();
    out.extend_from_slice(stop);
    out
}

/// Delta debugging over whole instructions. `still_fails` must hold for the
/// input; it holds for the result, and removing any single instruction of the
/// result other than the final STOP makes it fail.
pub fn minimize_with(payload: &Payload, mut still_fails: impl FnMut(&Payload) -> bool) -> Payload {
    let (mut parts, stop) = units(&payload.pickle_bytes);
    let mut cache: HashMap<Vec<u8>, bool> = HashMap::new();
    let mut test = |parts: &[&[u8]]| -> bool {
        let bytes = join(parts, stop);
        if let Some(&hit) = cache.get(&bytes) {
            return hit;
        }
        let hit = still_fails(&payload.with_bytes(bytes.clone()));
        cache.insert(bytes, hit);
        hit
    };

    let mut n = 2usize;
    while parts.len() >= 2 {
        let chunk = parts.len().div_ceil(n);
        let mut reduced = false;
        let mut start = 0;
        while start < parts.len() {
            let end = (start + chunk).min(parts.len());
            let complement: Vec<&[u8]> = parts[..start].iter().chain(&parts[end..]).copied().collect();
            if test(&complement) {
                parts = complement;
                n = (n - 1).max(2);
                reduced = true;
                break;
            }
            start = end;
        }
        if !reduced {
            if n >= parts.len() {
                break;
            }
            n = (2 * n).min(parts.len());
        }
    }

    // Single removals until none succeeds, covering the one-unit case too.
    let mut i = 0;
    while i < parts.len() {
        let mut candidate = parts.clone();
        candidate.remove(i);
        if test(&candidate) {
            parts = candidate;
            i = 0;
        } else {
            i += 1;
        }
    }
    payload.with_bytes(join(&parts, stop))
}

/// Minimizes `payload` against `harness` while the verdict stays `verdict`.
pub fn minimize(payload: &Payload, harness: &mut Harness, verdict: &Verdict) -> Payload {
    minimize_with(payload, |candidate| {
        harness.execute(candidate).ok().and_then(|records| detect(&records)).as_ref() == Some(verdict)
    })
}

/// True when no single-instruction removal (STOP excepted) keeps `still_fails`.
pub fn is_one_minimal(payload: &Payload, mut still_fails: impl FnMut(&Payload) -> bool) -> bool {
    let (parts, stop) = units(&payload.pickle_bytes);
    (0..parts.len()).all(|i| {
        let mut candidate = parts.clone();
        candidate.remove(i);
        !still_fails(&payload.with_bytes(join(&candidate, stop)))
    })
}

/// Builds the finding for a hit: minimizes, re-executes and signs it.
pub fn evaluate_hit(payload: &Payload, verdict: &Verdict, harness: &mut Harness) -> Option<Discrepancy> {
    let minimized = minimize(payload, harness, verdict);
    let records = harness.execute(&minimized).ok()?;
    Some(Discrepancy {
        kind: verdict.kind,
        signature: Signature::new(verdict, &minimized),
        payload: minimized,
        original_payload: payload.clone(),
        records,
    })
}

/// The disassembler strictness quirks the internal targets reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quirk {
    /// Prefixed integer literal accepted by the loader, rejected in base 10.
    Base10Int,
    /// Items left below the result at STOP.
    StackNotEmpty,
    /// A memo key written twice.
    MemoReuse,
}

impl Quirk {
    pub fn as_str(self) -> &'static str {
        match self {
            Quirk::Base10Int => "base-10-int",
            Quirk::StackNotEmpty => "stack-not-empty",
            Quirk::MemoReuse => "memo-reuse",
        }
    }
}

/// Which quirk explains a loader-ok, disassembler-error discrepancy, judged
/// from where and why the internal disassembler rejects the payload.
pub fn classify(payload: &Payload) -> Option<Quirk> {
    let fault = disasm::disassemble(payload).outcome.err()?;
    match fault.label {
        ErrorLabel::StackNotEmpty => Some(Quirk::StackNotEmpty),
        ErrorLabel::MemoReuse => Some(Quirk::MemoReuse),
        ErrorLabel::DecodeFailure => {
            let (insn, _) = opcodes::read_instruction(&payload.pickle_bytes, fault.offset?).ok()?;
            let digits = match insn.spec.name {
                "INT" => insn.arg,
                "LONG" => insn.arg.strip_suffix(b"L").unwrap_or(insn.arg),
                _ => return None,
            };
            pyparse::parse_int(digits, 0).map(|_| Quirk::Base10Int)
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{execute_internal, ExposedState, Outcome};
    use proptest::prelude::*;

    const INTERNAL: [TargetId; 2] = [TargetId::InternalPvm, TargetId::InternalDisasm];

    fn rec(target: TargetId, ok: bool) -> ExecutionRecord {
        ExecutionRecord {
            target,
            kind: target.kind(),
            outcome: if ok { Outcome::Ok } else { Outcome::Error },
            error_label: (!ok).then(|| "x".to_owned()),
            state: None,
            result_repr: None,
        }
    }

    fn deser(target: TargetId, stack: &[&str], result: &str) -> ExecutionRecord {
        ExecutionRecord {
            state: Some(ExposedState {
                stack: Some(stack.iter().map(|s| s.to_string()).collect()),
                metastack: Some(vec![]),
                memo: Some(Default::default()),
            }),
            result_repr: Some(result.to_owned()),
            ..rec(target, true)
        }
    }

    fn verdict(bytes: &[u8]) -> Option<Verdict> {
        detect(&execute_internal(&Payload::from_bytes(bytes), &INTERNAL))
    }

    #[test]
    fn error_rule() {
        assert_eq!(detect(&[rec(TargetId::InternalPvm, true), rec(TargetId::InternalDisasm, true)]), None);
        let v = detect(&[rec(TargetId::InternalPvm, true), rec(TargetId::InternalDisasm, false)]).unwrap();
        assert_eq!(v.kind, DiscrepancyKind::Error);
        assert_eq!(v.outcome_vector.to_string(), "(internal-pvm: ok, internal-disasm: error)");
        assert_eq!(detect(&[rec(TargetId::InternalPvm, false), rec(TargetId::InternalDisasm, false)]), None);
    }

    #[test]
    fn storage_rule() {
        let a = deser(TargetId::InternalPvm, &["True"], "None");
        let b = deser(TargetId::ExtPureDeserializer, &["1"], "None");
        let v = detect(&[a.clone(), b]).unwrap();
        assert_eq!(v.kind, DiscrepancyKind::Storage);
        assert_eq!(v.outcome_vector.get(TargetId::ExtPureDeserializer), Some("B"));
        let same = deser(TargetId::ExtPureDeserializer, &["True"], "None");
        assert_eq!(detect(&[a, same]), None);
    }

    #[test]
    fn storage_ignores_fields_one_side_lacks() {
        let a = deser(TargetId::ExtPureDeserializer, &["1"], "[]");
        let mut c = deser(TargetId::ExtCDeserializer, &[], "[]");
        c.state.as_mut().unwrap().stack = None;
        c.state.as_mut().unwrap().metastack = None;
        assert_eq!(detect(&[a.clone(), c.clone()]), None);
        c.result_repr = Some("[1]".into());
        assert!(detect(&[a, c]).is_some());
    }

    #[test]
    fn disassemblers_skip_storage() {
        let a = deser(TargetId::InternalPvm, &[], "None");
        assert_eq!(detect(&[a, rec(TargetId::InternalDisasm, true), rec(TargetId::ExtDisassembler, true)]), None);
    }

    #[test]
    fn scrubbed_addresses_compare_equal() {
        let a = deser(TargetId::InternalPvm, &[&crate::pvm::scrub("<x at 0x7f3a12bd9e80>")], "None");
        let b = deser(TargetId::ExtPureDeserializer, &[&crate::pvm::scrub("<x at 0x55aa00112233>")], "None");
        assert_eq!(detect(&[a, b]), None);
    }

    #[test]
    fn budget_records_are_excluded() {
        let budget = ExecutionRecord::budget_exceeded(TargetId::InternalDisasm);
        assert_eq!(detect(&[rec(TargetId::InternalPvm, true), budget.clone()]), None);
        let v = detect(&[rec(TargetId::InternalPvm, true), budget, rec(TargetId::ExtDisassembler, false)]).unwrap();
        assert_eq!(v.outcome_vector.0.len(), 2);
    }

    #[test]
    fn directed_verdicts() {
        for bytes in [&b"I0x1337\n."[..], b"N].", b"]q\x00]q\x00."] {
            let v = verdict(bytes).unwrap();
            assert_eq!(v.kind, DiscrepancyKind::Error);
            assert_eq!(v.outcome_vector.get(TargetId::InternalPvm), Some("ok"));
            assert_eq!(v.outcome_vector.get(TargetId::InternalDisasm), Some("error"));
        }
        assert_eq!(verdict(b"N."), None);
        assert_eq!(verdict(b"]."), None);
    }

    #[test]
    fn minimizer_strips_padding() {
        let mut h = Harness::internal(&INTERNAL);
        let p = Payload::from_bytes(&b"NI0x1337\n."[..]);
        let v = verdict(&p.pickle_bytes).unwrap();
        assert_eq!(minimize(&p, &mut h, &v).pickle_bytes, b"I0x1337\n.");
        let already = Payload::from_bytes(&b"I0x1337\n."[..]);
        assert_eq!(minimize(&already, &mut h, &v), already);
    }

    #[test]
    fn minimizer_keeps_stop_and_needed_context() {
        let mut h = Harness::internal(&INTERNAL);
        let p = Payload::from_bytes(&b"K\x01N]q\x00I7\n]q\x00\x85."[..]);
        let v = verdict(&p.pickle_bytes).unwrap();
        let m = minimize(&p, &mut h, &v);
        assert_eq!(m.pickle_bytes.last(), Some(&b'.'));
        assert_eq!(verdict(&m.pickle_bytes).as_ref(), Some(&v));
        assert!(is_one_minimal(&m, |c| verdict(&c.pickle_bytes).as_ref() == Some(&v)));
        // Any quirk with the same verdict is an acceptable reduction.
        assert!(classify(&m).is_some());
    }

    #[test]
    fn dedup_by_signature() {
        let mut h = Harness::internal(&INTERNAL);
        let p = Payload::from_bytes(&b"I0x1337\n."[..]);
        let v = verdict(&p.pickle_bytes).unwrap();
        let f = evaluate_hit(&p, &v, &mut h).unwrap();
        let mut seen = HashSet::new();
        assert_eq!(dedup(&f, &mut seen), DedupResult::Kept);
        assert_eq!(dedup(&f, &mut seen), DedupResult::Discarded);
        let mut other = f.clone();
        other.signature.opcode_profile.insert("NONE".into());
        assert_eq!(dedup(&other, &mut seen), DedupResult::Kept);
        assert_eq!(f.signature.hash_hex().len(), 16);
    }

    #[test]
    fn quirk_classes() {
        let q = |b: &[u8]| classify(&Payload::from_bytes(b));
        assert_eq!(q(b"I0x1337\n."), Some(Quirk::Base10Int));
        assert_eq!(q(b"L0o17L\n."), Some(Quirk::Base10Int));
        assert_eq!(q(b"I1\x002\n."), None);
        assert_eq!(q(b"N]."), Some(Quirk::StackNotEmpty));
        assert_eq!(q(b"]q\x00]q\x00."), Some(Quirk::MemoReuse));
        assert_eq!(q(b"N."), None);
    }

    fn arb_record() -> impl Strategy<Value = ExecutionRecord> {
        let target = prop::sample::select(TargetId::ALL.to_vec());
        let field = prop::option::of(prop::sample::select(vec!["1", "True", "None"]));
        (target, any::<bool>(), field.clone(), field).prop_map(|(t, ok, stack, result)| {
            let mut r = rec(t, ok);
            if ok && t.kind() == TargetKind::Deserializer {
                r.state = Some(ExposedState {
                    stack: stack.map(|s| vec![s.to_owned()]),
                    ..Default::default()
                });
                r.result_repr = result.map(str::to_owned);
            }
            r
        })
    }

    fn distinct_targets(records: Vec<ExecutionRecord>) -> Vec<ExecutionRecord> {
        let mut seen = HashSet::new();
        records.into_iter().filter(|r| seen.insert(r.target)).collect()
    }

    proptest! {
        #[test]
        fn detect_is_permutation_invariant(
            records in prop::collection::vec(arb_record(), 2..6).prop_map(distinct_targets),
            rot in 0usize..6,
        ) {
            let mut shuffled = records.clone();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len.max(1));
            shuffled.reverse();
            prop_assert_eq!(detect(&records), detect(&shuffled));
        }

        #[test]
        fn duplicating_a_record_adds_no_discrepancy(record in arb_record(), other in prop::sample::select(TargetId::ALL.to_vec())) {
            prop_assume!(other != record.target);
            let mut copy = record.clone();
            copy.target = other;
            copy.kind = other.kind();
            if copy.kind == TargetKind::Disassembler {
                copy.state = None;
                copy.result_repr = None;
            }
            prop_assert_eq!(detect(&[record, copy]), None);
        }

        #[test]
        fn scrub_is_idempotent(s in "[0-9a-fA-FxX <>_]{0,40}") {
            let once = crate::pvm::scrub(&s);
            prop_assert_eq!(crate::pvm::scrub(&once), once);
        }

        #[test]
        fn minimized_payloads_keep_their_verdict(seed in any::<u64>()) {
            let p = crate::generator::generate(seed, &Default::default());
            let mut h = Harness::internal(&INTERNAL);
            if let Some(v) = detect(&h.execute(&p).unwrap()) {
                let m = minimize(&p, &mut h, &v);
                let again = detect(&h.execute(&m).unwrap());
                prop_assert_eq!(again.as_ref(), Some(&v));
                prop_assert!(m.pickle_bytes.len() <= p.pickle_bytes.len());
            }
        }
    }
}
