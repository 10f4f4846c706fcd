//! MinidumpLite, a text crash snapshot, and the harness that fabricates
//! one for a call chain through a laid-out program.
//!
//! ```text
//! MDL 1
//! MODULE Linux arm 5A1F...0 prog0
//! REASON SIGSEGV
//! CRASH 10a4c
//! REG lr 10230
//! REG pc 10a4c
//! REG sp beffff00
//! STACK beffff00 256
//! 0000000000000000...
//! ```
//!
//! Register values and addresses are hex. Stack bytes follow as hex, 32
//! bytes per line.

use std::fmt::Write as _;

use crate::cfi::{RegisterState, StackSnapshot};
use crate::progmodel::{reg_name, LayoutResult, ProgramModel, FP, FP_BIAS, LR};

/// Highest stack address; the outermost frame's CFA.
pub const STACK_TOP: u32 = 0xbf00_0000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinidumpLite {
    pub module_id: String,
    pub crash_reason: String,
    pub crash_address: u32,
    pub registers: RegisterState,
    pub stack: StackSnapshot,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("minidump line {line}: {msg}")]
pub struct MinidumpError {
    pub line: usize,
    pub msg: String,
}

impl MinidumpLite {
    pub fn to_text(&self) -> String {
        let mut out = String::from("MDL 1\n");
        let _ = writeln!(out, "MODULE {}", self.module_id);
        let _ = writeln!(out, "REASON {}", self.crash_reason);
        let _ = writeln!(out, "CRASH {:x}", self.crash_address);
        for (r, v) in &self.registers {
            let _ = writeln!(out, "REG {r} {v:x}");
        }
        let _ = writeln!(out, "STACK {:x} {}", self.stack.base_address, self.stack.bytes.len());
        for chunk in self.stack.bytes.chunks(32) {
            out.push_str(&hex::encode(chunk));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, MinidumpError> {
        let mut lines = text.lines().enumerate().peekable();
        let err = |line: usize, msg: &str| MinidumpError { line, msg: msg.to_string() };
        let hex32 = |line: usize, s: &str| u32::from_str_radix(s, 16).map_err(|_| err(line, "invalid hex value"));
        if lines.next().map(|(_, l)| l) != Some("MDL 1") {
            return Err(err(1, "missing `MDL 1` header"));
        }
        let mut module_id = None;
        let mut crash_reason = None;
        let mut crash_address = None;
        let mut registers = RegisterState::new();
        let mut stack = None;
        while let Some((i, l)) = lines.next() {
            let n = i + 1;
            let (kw, rest) = l.split_once(' ').unwrap_or((l, ""));
            match kw {
                "MODULE" => module_id = Some(rest.to_string()),
                "REASON" => crash_reason = Some(rest.to_string()),
                "CRASH" => crash_address = Some(hex32(n, rest)?),
                "REG" => {
                    let (r, v) = rest.split_once(' ').ok_or_else(|| err(n, "REG needs a name and value"))?;
                    registers.insert(r.to_string(), hex32(n, v)?);
                }
                "STACK" => {
                    let (b, len) = rest.split_once(' ').ok_or_else(|| err(n, "STACK needs base and length"))?;
                    let base_address = hex32(n, b)?;
                    let len: usize = len.parse().map_err(|_| err(n, "invalid stack length"))?;
                    let mut bytes = Vec::with_capacity(len);
                    while bytes.len() < len {
                        let (j, h) = lines.next().ok_or_else(|| err(n, "truncated stack"))?;
                        bytes.extend(hex::decode(h).map_err(|_| err(j + 1, "invalid stack bytes"))?);
                    }
                    if bytes.len() != len {
                        return Err(err(n, "stack length mismatch"));
                    }
                    stack = Some(StackSnapshot { base_address, bytes });
                }
                "" => {}
                _ => return Err(err(n, "unknown record")),
            }
        }
        let d = MinidumpLite {
            module_id: module_id.ok_or_else(|| err(0, "missing MODULE"))?,
            crash_reason: crash_reason.unwrap_or_default(),
            crash_address: crash_address.ok_or_else(|| err(0, "missing CRASH"))?,
            registers,
            stack: stack.ok_or_else(|| err(0, "missing STACK"))?,
        };
        if d.registers.get("pc") != Some(&d.crash_address) {
            return Err(err(0, "pc does not equal the crash address"));
        }
        Ok(d)
    }
}

/// A program location: pre-NOP body instruction `instr` of `block`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CrashSite {
    pub function: usize,
    pub block: usize,
    pub instr: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HarnessError {
    #[error("empty call chain")]
    Empty,
    #[error("no such code location {0:?}")]
    BadSite(CrashSite),
    #[error("{0:?} is not a call to function {1}")]
    NotACall(CrashSite, usize),
}

/// Build the dump of a crash at the last site of `chain`, each earlier site
/// being the call that led to the next. Frames are written from the stack
/// top down: saved registers at `cfa - push + 4i`, the return address in the
/// lr slot, locals and padding below. The outermost frame returns to 0.
pub fn simulate_crash(
    image: &LayoutResult,
    model: &ProgramModel,
    chain: &[CrashSite],
) -> Result<MinidumpLite, HarnessError> {
    if chain.is_empty() {
        return Err(HarnessError::Empty);
    }
    let mut addrs = Vec::with_capacity(chain.len());
    for (k, s) in chain.iter().enumerate() {
        let a = image.instr_address(model, s.function, s.block, s.instr).ok_or(HarnessError::BadSite(*s))?;
        addrs.push(a);
        if let Some(next) = chain.get(k + 1) {
            let f = &model.functions[s.function];
            if !f.calls.iter().any(|c| c.callee == next.function && c.block == s.block && c.instr == s.instr) {
                return Err(HarnessError::NotACall(*s, next.function));
            }
        }
    }

    let mut regs: RegisterState = (4..=11u8).map(|r| (reg_name(r), 0x5a5a_0000 | r as u32)).collect();
    let mut writes: Vec<(u32, u32)> = Vec::new();
    let mut cfa = STACK_TOP;
    let mut ret = 0u32;
    let mut sp = cfa;
    for (k, s) in chain.iter().enumerate() {
        let f = &model.functions[s.function];
        let push = f.push_bytes();
        sp = cfa - push - f.frame.alloc_total();
        for (i, &r) in f.frame.callee_saved.iter().enumerate() {
            let slot = cfa - push + 4 * i as u32;
            let v = if r == LR { ret } else { regs[&reg_name(r)] };
            writes.push((slot, v));
        }
        for &r in f.frame.callee_saved.iter().filter(|&&r| r != LR) {
            let v = if r == FP && f.has_fp { cfa - FP_BIAS } else { 0x0c00_0000 | (k as u32) << 8 | r as u32 };
            regs.insert(reg_name(r), v);
        }
        ret = addrs[k] + 4;
        cfa = sp;
    }
    let base = sp;
    let mut bytes = vec![0u8; (STACK_TOP - base) as usize];
    for (a, v) in writes {
        let off = (a - base) as usize;
        bytes[off..off + 4].copy_from_slice(&v.to_le_bytes());
    }
    let pc = addrs[chain.len() - 1];
    let lr = if chain.len() > 1 { addrs[chain.len() - 2] + 4 } else { 0 };
    regs.insert("sp".into(), sp);
    regs.insert("pc".into(), pc);
    regs.insert("lr".into(), lr);
    Ok(MinidumpLite {
        module_id: image.symfile.module_id.clone(),
        crash_reason: "SIGSEGV".into(),
        crash_address: pc,
        registers: regs,
        stack: StackSnapshot { base_address: base, bytes },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let d = MinidumpLite {
            module_id: "Linux arm 00 m".into(),
            crash_reason: "SIGSEGV".into(),
            crash_address: 0x10,
            registers: [("pc".to_string(), 0x10), ("sp".to_string(), 0xbeff_ffc0)].into_iter().collect(),
            stack: StackSnapshot { base_address: 0xbeff_ffc0, bytes: (0..70).collect() },
        };
        assert_eq!(MinidumpLite::parse(&d.to_text()).unwrap(), d);
        let broken = d.to_text().replace("REG pc 10", "REG pc 14");
        assert!(MinidumpLite::parse(&broken).is_err());
        assert!(MinidumpLite::parse("MDL 2\n").is_err());
    }
}
