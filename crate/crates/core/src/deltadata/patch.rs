//! Line-oriented edit scripts over canonical symbol-file text.
//!
//! ```text
//! K 12        keep 12 lines
//! S 5 -8      keep 5 lines, adding -8 to each leading address
//! R 2 3       replace 2 lines by the 3 that follow
//! I 1         insert the line that follows
//! D 4         delete 4 lines
//! ```

use std::fmt::Write as _;

use crate::symfile::{emit_symbol_file, parse_symbol_file, SymbolFile, SymfileError};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum PatchOp {
    Keep(usize),
    Shift { n: usize, delta: i64 },
    Replace { old: usize, new: Vec<String> },
    Insert(Vec<String>),
    Delete(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Patch {
    pub ops: Vec<PatchOp>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PatchError {
    #[error("patch text line {0}: malformed")]
    Syntax(usize),
    #[error("patch consumes {consumed} lines of a {available}-line input")]
    Length { consumed: usize, available: usize },
    #[error("line `{0}` has no address to shift")]
    NotShiftable(String),
    #[error("patched text is not a canonical symbol file: {0}")]
    Invalid(String),
}

impl Patch {
    /// Bytes of literal replacement content: the part of a patch that grows
    /// with replication error.
    pub fn payload_bytes(&self) -> usize {
        self.ops
            .iter()
            .map(|op| match op {
                PatchOp::Replace { new, .. } | PatchOp::Insert(new) => new.iter().map(|l| l.len() + 1).sum(),
                _ => 0,
            })
            .sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for op in &self.ops {
            let lines = match op {
                PatchOp::Keep(n) => {
                    let _ = writeln!(out, "K {n}");
                    continue;
                }
                PatchOp::Shift { n, delta } => {
                    let _ = writeln!(out, "S {n} {delta}");
                    continue;
                }
                PatchOp::Delete(n) => {
                    let _ = writeln!(out, "D {n}");
                    continue;
                }
                PatchOp::Replace { old, new } => {
                    let _ = writeln!(out, "R {old} {}", new.len());
                    new
                }
                PatchOp::Insert(new) => {
                    let _ = writeln!(out, "I {}", new.len());
                    new
                }
            };
            for l in lines {
                out.push_str(l);
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, PatchError> {
        let lines: Vec<&str> = text.lines().collect();
        let mut ops = Vec::new();
        let mut i = 0;
        while i < lines.len() {
            let err = PatchError::Syntax(i + 1);
            let t: Vec<&str> = lines[i].split(' ').collect();
            let n = |s: &str| s.parse::<usize>().map_err(|_| err.clone());
            let take = |k: usize, i: &mut usize| -> Result<Vec<String>, PatchError> {
                let got = lines.get(*i + 1..*i + 1 + k).ok_or(err.clone())?;
                *i += k;
                Ok(got.iter().map(|s| s.to_string()).collect())
            };
            let op = match t[..] {
                ["K", a] => PatchOp::Keep(n(a)?),
                ["D", a] => PatchOp::Delete(n(a)?),
                ["S", a, d] => PatchOp::Shift { n: n(a)?, delta: d.parse().map_err(|_| err.clone())? },
                ["R", a, b] => {
                    let old = n(a)?;
                    PatchOp::Replace { old, new: take(n(b)?, &mut i)? }
                }
                ["I", a] => PatchOp::Insert(take(n(a)?, &mut i)?),
                _ => return Err(err),
            };
            ops.push(op);
            i += 1;
        }
        Ok(Patch { ops })
    }
}

/// Index of the leading address token of a canonical record, if it has one.
fn address_index(toks: &[&str]) -> Option<usize> {
    match toks {
        ["FUNC", "m", ..] | ["PUBLIC", "m", ..] => Some(2),
        ["FUNC", ..] | ["PUBLIC", ..] => Some(1),
        ["STACK", "CFI", "INIT", ..] => Some(3),
        ["STACK", "CFI", ..] => Some(2),
        ["MODULE", ..] | ["FILE", ..] | ["INFO", ..] => None,
        [first, ..] if first.bytes().all(|b| b.is_ascii_hexdigit()) => Some(0),
        _ => None,
    }
}

fn leading_address(line: &str) -> Option<(usize, u64)> {
    let toks: Vec<&str> = line.split(' ').collect();
    let i = address_index(&toks)?;
    u64::from_str_radix(toks.get(i)?, 16).ok().map(|a| (i, a))
}

/// `line` with its leading address moved by `delta`.
fn shift_line(line: &str, delta: i64) -> Option<String> {
    let mut toks: Vec<&str> = line.split(' ').collect();
    let i = address_index(&toks)?;
    let a = u64::from_str_radix(toks.get(i)?, 16).ok()?;
    let moved = format!("{:x}", a.checked_add_signed(delta)?);
    toks[i] = &moved;
    Some(toks.join(" "))
}

/// The address delta that turns `a` into `b`, if they differ only there.
fn shift_between(a: &str, b: &str) -> Option<i64> {
    let (ia, aa) = leading_address(a)?;
    let (ib, ab) = leading_address(b)?;
    if ia != ib {
        return None;
    }
    let delta = ab.wrapping_sub(aa) as i64;
    (shift_line(a, delta).as_deref() == Some(b)).then_some(delta)
}

/// One line-level edit before run merging.
#[derive(Clone, Debug, PartialEq)]
enum Edit<'a> {
    Keep,
    Shift(i64),
    Delete,
    Insert(&'a str),
}

const INSERT_BYTE_COST: u64 = 64;

fn insert_cost(line: &str) -> u64 {
    INSERT_BYTE_COST * (line.len() as u64 + 1) + 2
}

/// Minimum-cost alignment of two line sequences. Kept and shifted lines
/// cost nothing in payload; inserted lines cost their bytes. Small per-op
/// charges break ties towards fewer ops.
fn diff_lines<'a>(a: &[&'a str], b: &[&'a str], out: &mut Vec<Edit<'a>>) {
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    out.extend(std::iter::repeat_n(Edit::Keep, prefix));
    let (a, b) = (&a[prefix..], &b[prefix..]);
    let suffix = a.iter().rev().zip(b.iter().rev()).take_while(|(x, y)| x == y).count();
    let (a, b) = (&a[..a.len() - suffix], &b[..b.len() - suffix]);

    let pairwise: Option<Vec<Edit>> = (a.len() == b.len())
        .then(|| {
            a.iter()
                .zip(b)
                .map(|(x, y)| if x == y { Some(Edit::Keep) } else { shift_between(x, y).map(Edit::Shift) })
                .collect()
        })
        .flatten();
    if let Some(edits) = pairwise {
        out.extend(edits);
    } else {
        let (n, m) = (a.len(), b.len());
        let w = m + 1;
        // cost[i][j]: cheapest script for a[i..] -> b[j..]
        let mut cost = vec![0u64; (n + 1) * w];
        let mut matched: Vec<Option<Edit>> = vec![None; (n + 1) * w];
        for i in (0..=n).rev() {
            for j in (0..=m).rev() {
                let k = i * w + j;
                if i == n && j == m {
                    continue;
                }
                let mut best = u64::MAX;
                if i < n && j < m {
                    let e = if a[i] == b[j] {
                        Some((Edit::Keep, 0))
                    } else {
                        shift_between(a[i], b[j]).map(|d| (Edit::Shift(d), 1))
                    };
                    if let Some((e, c)) = e {
                        best = c + cost[(i + 1) * w + j + 1];
                        matched[k] = Some(e);
                    }
                }
                if i < n {
                    let c = 2 + cost[(i + 1) * w + j];
                    if c < best {
                        best = c;
                        matched[k] = Some(Edit::Delete);
                    }
                }
                if j < m {
                    let c = insert_cost(b[j]) + cost[i * w + j + 1];
                    if c < best {
                        best = c;
                        matched[k] = Some(Edit::Insert(b[j]));
                    }
                }
                cost[k] = best;
            }
        }
        let (mut i, mut j) = (0, 0);
        while i < n || j < m {
            let e = matched[i * w + j].clone().expect("reachable cell has a move");
            match e {
                Edit::Keep | Edit::Shift(_) => {
                    i += 1;
                    j += 1
                }
                Edit::Delete => i += 1,
                Edit::Insert(_) => j += 1,
            }
            out.push(e);
        }
    }
    out.extend(std::iter::repeat_n(Edit::Keep, suffix));
}

fn merge(edits: Vec<Edit>) -> Patch {
    let mut ops: Vec<PatchOp> = Vec::new();
    let mut dels = 0;
    let mut ins: Vec<String> = Vec::new();
    let flush = |ops: &mut Vec<PatchOp>, dels: &mut usize, ins: &mut Vec<String>| {
        match (*dels, ins.is_empty()) {
            (0, true) => {}
            (0, false) => ops.push(PatchOp::Insert(std::mem::take(ins))),
            (d, true) => ops.push(PatchOp::Delete(d)),
            (d, false) => ops.push(PatchOp::Replace { old: d, new: std::mem::take(ins) }),
        }
        *dels = 0;
    };
    for e in edits {
        match e {
            Edit::Delete => dels += 1,
            Edit::Insert(l) => ins.push(l.to_string()),
            Edit::Keep => {
                flush(&mut ops, &mut dels, &mut ins);
                match ops.last_mut() {
                    Some(PatchOp::Keep(n)) => *n += 1,
                    _ => ops.push(PatchOp::Keep(1)),
                }
            }
            Edit::Shift(delta) => {
                flush(&mut ops, &mut dels, &mut ins);
                match ops.last_mut() {
                    Some(PatchOp::Shift { n, delta: d }) if *d == delta => *n += 1,
                    _ => ops.push(PatchOp::Shift { n: 1, delta }),
                }
            }
        }
    }
    flush(&mut ops, &mut dels, &mut ins);
    Patch { ops }
}

/// Canonical text split into units: the header, each FUNC with its line
/// records, the PUBLIC block, and each CFI region with its deltas. CFI
/// units are keyed by the function at the same address.
fn units(lines: &[&str]) -> Vec<(String, std::ops::Range<usize>)> {
    let mut func_at = std::collections::HashMap::new();
    for l in lines {
        if l.starts_with("FUNC ") {
            if let Some((i, a)) = leading_address(l) {
                let name = l.splitn(i + 4, ' ').nth(i + 3).unwrap_or("");
                func_at.insert(a, name.to_string());
            }
        }
    }
    let mut out: Vec<(String, std::ops::Range<usize>)> = Vec::new();
    for (i, l) in lines.iter().enumerate() {
        let key = if l.starts_with("MODULE ") || l.starts_with("FILE ") {
            Some("#header".to_string())
        } else if l.starts_with("FUNC ") {
            let (ai, _) = leading_address(l).unwrap_or((1, 0));
            Some(format!("F {}", l.splitn(ai + 4, ' ').nth(ai + 3).unwrap_or("")))
        } else if l.starts_with("PUBLIC ") {
            Some("#public".to_string())
        } else if l.starts_with("STACK CFI INIT ") {
            let a = leading_address(l).map(|x| x.1).unwrap_or(0);
            Some(match func_at.get(&a) {
                Some(name) => format!("C {name}"),
                None => format!("C @{a:x}"),
            })
        } else {
            None
        };
        match (key, out.last_mut()) {
            (Some(k), Some(last)) if last.0 == k && (k == "#header" || k == "#public") => last.1.end = i + 1,
            (Some(k), _) => out.push((k, i..i + 1)),
            (None, Some(last)) => last.1.end = i + 1,
            (None, None) => out.push(("#orphan".to_string(), i..i + 1)),
        }
    }
    out
}

/// Longest common subsequence of unit keys.
fn align_keys(a: &[&str], b: &[&str]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let w = m + 1;
    let mut t = vec![0u32; (n + 1) * w];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            t[i * w + j] =
                if a[i] == b[j] { 1 + t[(i + 1) * w + j + 1] } else { t[(i + 1) * w + j].max(t[i * w + j + 1]) };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut pairs = Vec::new();
    while i < n && j < m {
        if a[i] == b[j] {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if t[(i + 1) * w + j] >= t[i * w + j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    pairs
}

/// Edit script from `approx` to `truth`, both canonical texts.
pub fn diff_text(approx: &str, truth: &str) -> Patch {
    let a: Vec<&str> = approx.lines().collect();
    let b: Vec<&str> = truth.lines().collect();
    let ua = units(&a);
    let ub = units(&b);
    let ka: Vec<&str> = ua.iter().map(|u| u.0.as_str()).collect();
    let kb: Vec<&str> = ub.iter().map(|u| u.0.as_str()).collect();
    let mut edits = Vec::with_capacity(a.len().max(b.len()));
    let (mut ia, mut ib) = (0, 0);
    for (pa, pb) in align_keys(&ka, &kb).into_iter().chain(std::iter::once((ua.len(), ub.len()))) {
        // unmatched units in between are diffed as one block
        let sa = ua.get(ia).map_or(a.len(), |u| u.1.start);
        let ea = ua.get(pa).map_or(a.len(), |u| u.1.start);
        let sb = ub.get(ib).map_or(b.len(), |u| u.1.start);
        let eb = ub.get(pb).map_or(b.len(), |u| u.1.start);
        if sa < ea || sb < eb {
            diff_lines(&a[sa..ea], &b[sb..eb], &mut edits);
        }
        if pa < ua.len() {
            diff_lines(&a[ua[pa].1.clone()], &b[ub[pb].1.clone()], &mut edits);
        }
        ia = pa + 1;
        ib = pb + 1;
    }
    merge(edits)
}

pub fn apply_text(approx: &str, patch: &Patch) -> Result<String, PatchError> {
    let lines: Vec<&str> = approx.lines().collect();
    let mut out = String::with_capacity(approx.len());
    let mut pos = 0;
    let take = |k: usize, pos: &mut usize| -> Result<std::ops::Range<usize>, PatchError> {
        let r = *pos..*pos + k;
        if r.end > lines.len() {
            return Err(PatchError::Length { consumed: r.end, available: lines.len() });
        }
        *pos = r.end;
        Ok(r)
    };
    for op in &patch.ops {
        match op {
            PatchOp::Keep(n) => {
                for l in &lines[take(*n, &mut pos)?] {
                    out.push_str(l);
                    out.push('\n');
                }
            }
            PatchOp::Shift { n, delta } => {
                for l in &lines[take(*n, &mut pos)?] {
                    let s = shift_line(l, *delta).ok_or_else(|| PatchError::NotShiftable(l.to_string()))?;
                    out.push_str(&s);
                    out.push('\n');
                }
            }
            PatchOp::Delete(n) => {
                take(*n, &mut pos)?;
            }
            PatchOp::Replace { old, new } => {
                take(*old, &mut pos)?;
                for l in new {
                    out.push_str(l);
                    out.push('\n');
                }
            }
            PatchOp::Insert(new) => {
                for l in new {
                    out.push_str(l);
                    out.push('\n');
                }
            }
        }
    }
    if pos != lines.len() {
        return Err(PatchError::Length { consumed: pos, available: lines.len() });
    }
    Ok(out)
}

pub fn diff(approx: &SymbolFile, truth: &SymbolFile) -> Result<Patch, SymfileError> {
    Ok(diff_text(&emit_symbol_file(approx)?, &emit_symbol_file(truth)?))
}

/// Apply `patch` and check that the result is a canonical symbol file.
pub fn apply(approx: &SymbolFile, patch: &Patch) -> Result<SymbolFile, PatchError> {
    let text = emit_symbol_file(approx).map_err(|e| PatchError::Invalid(e.to_string()))?;
    let patched = apply_text(&text, patch)?;
    let sf = parse_symbol_file(&patched).map_err(|e| PatchError::Invalid(e.to_string()))?;
    match emit_symbol_file(&sf) {
        Ok(t) if t == patched => Ok(sf),
        _ => Err(PatchError::Invalid("result is not in canonical form".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = "\
MODULE Linux arm 0123 m
FILE 1 a.c
FUNC 0 10 0 f
0 8 3 1
8 8 4 1
FUNC 10 8 0 g
10 8 9 1
STACK CFI INIT 0 10 .cfa: sp 0 + .ra: lr
STACK CFI 4 .cfa: sp 8 + .ra: .cfa -4 + ^
STACK CFI INIT 10 8 .cfa: sp 0 + .ra: lr
";

    #[test]
    fn identical_inputs_keep_everything() {
        let p = diff_text(SAMPLE, SAMPLE);
        assert_eq!(p.ops, vec![PatchOp::Keep(10)]);
        assert_eq!(p.payload_bytes(), 0);
    }

    #[test]
    fn trailing_function_shift_needs_no_payload() {
        let truth =
            SAMPLE.replace("FUNC 10 8 0 g\n10 8 9 1", "FUNC 18 8 0 g\n18 8 9 1").replace("INIT 10 8", "INIT 18 8");
        let p = diff_text(SAMPLE, &truth);
        assert_eq!(p.payload_bytes(), 0);
        let shifts: Vec<_> = p.ops.iter().filter(|o| matches!(o, PatchOp::Shift { .. })).collect();
        assert_eq!(shifts, vec![&PatchOp::Shift { n: 2, delta: 8 }, &PatchOp::Shift { n: 1, delta: 8 }]);
        assert_eq!(apply_text(SAMPLE, &p).unwrap(), truth);
    }

    #[test]
    fn text_round_trip_and_errors() {
        let truth = SAMPLE.replace("8 8 4 1", "8 4 4 1\nc 4 5 1").replace("FUNC 10 8 0 g\n", "FUNC 10 8 0 h\n");
        let p = diff_text(SAMPLE, &truth);
        assert_eq!(Patch::parse(&p.to_text()).unwrap(), p);
        assert_eq!(apply_text(SAMPLE, &p).unwrap(), truth);
        assert!(matches!(apply_text("x\n", &p), Err(PatchError::Length { .. })));
        assert!(matches!(Patch::parse("R 1 5\nonly\n"), Err(PatchError::Syntax(1))));
        let bad = Patch { ops: vec![PatchOp::Shift { n: 1, delta: 4 }, PatchOp::Keep(9)] };
        assert!(matches!(apply_text(SAMPLE, &bad), Err(PatchError::NotShiftable(_))));
    }

    #[test]
    fn shift_handles_negative_and_flags() {
        assert_eq!(shift_line("FUNC m 20 4 0 f g", -0x10).as_deref(), Some("FUNC m 10 4 0 f g"));
        assert_eq!(shift_line("STACK CFI 1be4 .cfa: r11 4 +", 4).as_deref(), Some("STACK CFI 1be8 .cfa: r11 4 +"));
        assert_eq!(shift_line("FILE 1 a.c", 4), None);
        assert_eq!(shift_line("10 4 1 1", -0x20), None);
    }

    proptest! {
        #[test]
        fn apply_inverts_diff_on_arbitrary_lines(
            a in proptest::collection::vec("[0-9a-f]{1,3} [a-z]{1,2}|FUNC [0-9a-f]{1,2} 4 0 [fg]|K", 0..30),
            b in proptest::collection::vec("[0-9a-f]{1,3} [a-z]{1,2}|FUNC [0-9a-f]{1,2} 4 0 [fg]|K", 0..30),
        ) {
            let ta: String = a.iter().map(|l| format!("{l}\n")).collect();
            let tb: String = b.iter().map(|l| format!("{l}\n")).collect();
            let p = diff_text(&ta, &tb);
            prop_assert_eq!(apply_text(&ta, &p).unwrap(), tb);
            prop_assert_eq!(Patch::parse(&p.to_text()).unwrap(), p);
        }
    }
}
