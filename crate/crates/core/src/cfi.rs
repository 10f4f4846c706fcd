//! Postfix CFI evaluation and CFI-driven stack unwinding.

use std::collections::BTreeMap;

use crate::symfile::{PostfixExpr, RuleMap, SymbolFile, Token};

/// Register name → 32-bit value.
pub type RegisterState = BTreeMap<String, u32>;

/// Captured stack bytes starting at `base_address`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StackSnapshot {
    pub base_address: u32,
    pub bytes: Vec<u8>,
}

impl StackSnapshot {
    pub fn end(&self) -> u64 {
        self.base_address as u64 + self.bytes.len() as u64
    }

    pub fn read_u32(&self, addr: u32) -> Option<u32> {
        let off = addr.checked_sub(self.base_address)? as usize;
        let w = self.bytes.get(off..off.checked_add(4)?)?;
        Some(u32::from_le_bytes(w.try_into().ok()?))
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base_address && (addr as u64) <= self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CfiError {
    #[error("malformed expression: {0}")]
    Malformed(String),
    #[error("register `{0}` has no value")]
    MissingRegister(String),
    #[error("read at {0:#x} outside the stack snapshot")]
    MemoryOutOfRange(u32),
    #[error("no unwind information for pc {0:#x}")]
    NoUnwindInfo(u64),
}

pub fn eval_postfix(
    expr: &PostfixExpr,
    regs: &RegisterState,
    cfa: Option<u32>,
    mem: &StackSnapshot,
) -> Result<u32, CfiError> {
    let mut stack: Vec<u32> = Vec::with_capacity(4);
    let underflow = || CfiError::Malformed(format!("`{expr}` underflows"));
    for t in expr.tokens() {
        match t {
            Token::Reg(r) if r == ".cfa" => stack.push(cfa.ok_or_else(|| CfiError::MissingRegister(r.clone()))?),
            Token::Reg(r) => stack.push(*regs.get(r).ok_or_else(|| CfiError::MissingRegister(r.clone()))?),
            Token::Const(c) => stack.push(*c as u32),
            Token::Add | Token::Sub => {
                let b = stack.pop().ok_or_else(underflow)?;
                let a = stack.pop().ok_or_else(underflow)?;
                stack.push(if *t == Token::Add { a.wrapping_add(b) } else { a.wrapping_sub(b) });
            }
            Token::Deref => {
                let a = stack.pop().ok_or_else(underflow)?;
                stack.push(mem.read_u32(a).ok_or(CfiError::MemoryOutOfRange(a))?);
            }
        }
    }
    match stack[..] {
        [v] => Ok(v),
        _ => Err(CfiError::Malformed(format!("`{expr}` leaves {} values", stack.len()))),
    }
}

/// Rules in force at `pc`: the INIT rules overlaid by every delta at or
/// before `pc`.
pub fn rules_at(sf: &SymbolFile, pc: u64) -> Result<RuleMap, CfiError> {
    let region = sf.cfi_at(pc).ok_or(CfiError::NoUnwindInfo(pc))?;
    let mut rules = region.init_rules.clone();
    for d in region.deltas.iter().take_while(|d| d.address <= pc) {
        rules.overlay(&d.rules);
    }
    Ok(rules)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub pc: u32,
    /// Set once the frame's own rules have been evaluated.
    pub cfa: Option<u32>,
    pub registers: RegisterState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnwindStop {
    /// A return address of 0.
    EndOfStack,
    NoUnwindInfo,
    NonIncreasingCfa,
    MaxFrames,
    MemoryOutOfRange,
    Malformed,
}

impl UnwindStop {
    pub fn as_str(&self) -> &'static str {
        match self {
            UnwindStop::EndOfStack => "end-of-stack",
            UnwindStop::NoUnwindInfo => "no-unwind-info",
            UnwindStop::NonIncreasingCfa => "non-increasing-cfa",
            UnwindStop::MaxFrames => "max-frames",
            UnwindStop::MemoryOutOfRange => "memory-out-of-range",
            UnwindStop::Malformed => "malformed-cfi",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unwound {
    pub frames: Vec<Frame>,
    pub stop: UnwindStop,
}

pub const DEFAULT_MAX_FRAMES: usize = 256;

fn stop_for(e: &CfiError) -> UnwindStop {
    match e {
        CfiError::MemoryOutOfRange(_) => UnwindStop::MemoryOutOfRange,
        CfiError::NoUnwindInfo(_) => UnwindStop::NoUnwindInfo,
        CfiError::Malformed(_) | CfiError::MissingRegister(_) => UnwindStop::Malformed,
    }
}

/// Walk the stack from the crash registers. Registers without a rule keep
/// the callee's value. Caller frames are looked up at `pc - 4`, the call
/// instruction.
pub fn unwind(registers: &RegisterState, stack: &StackSnapshot, sf: &SymbolFile, max_frames: usize) -> Unwound {
    let pc = registers.get("pc").copied().unwrap_or(0);
    let mut frames = vec![Frame { pc, cfa: None, registers: registers.clone() }];
    let done = |frames, stop| Unwound { frames, stop };
    if !registers.get("sp").is_some_and(|&sp| stack.contains(sp)) {
        return done(frames, UnwindStop::MemoryOutOfRange);
    }
    loop {
        let k = frames.len() - 1;
        let cur = &frames[k];
        let lookup = if k == 0 { cur.pc as u64 } else { cur.pc.wrapping_sub(4) as u64 };
        let rules = match rules_at(sf, lookup) {
            Ok(r) => r,
            Err(e) => return done(frames, stop_for(&e)),
        };
        let Some(cfa_rule) = rules.get(".cfa") else {
            return done(frames, UnwindStop::Malformed);
        };
        let cfa = match eval_postfix(cfa_rule, &cur.registers, None, stack) {
            Ok(v) => v,
            Err(e) => return done(frames, stop_for(&e)),
        };
        if k > 0 && frames[k - 1].cfa.is_some_and(|prev| cfa <= prev) {
            return done(frames, UnwindStop::NonIncreasingCfa);
        }
        frames[k].cfa = Some(cfa);
        let cur = &frames[k];

        let mut caller = cur.registers.clone();
        let mut ra = None;
        for (reg, expr) in rules.iter().filter(|(r, _)| *r != ".cfa") {
            let v = match eval_postfix(expr, &cur.registers, Some(cfa), stack) {
                Ok(v) => v,
                Err(e) => return done(frames, stop_for(&e)),
            };
            if reg == ".ra" {
                ra = Some(v);
            } else {
                caller.insert(reg.to_string(), v);
            }
        }
        let Some(ra) = ra else {
            return done(frames, UnwindStop::Malformed);
        };
        if ra == 0 {
            return done(frames, UnwindStop::EndOfStack);
        }
        if frames.len() >= max_frames {
            return done(frames, UnwindStop::MaxFrames);
        }
        if sf.cfi_at(ra.wrapping_sub(4) as u64).is_none() {
            return done(frames, UnwindStop::NoUnwindInfo);
        }
        caller.insert("sp".into(), cfa);
        caller.insert("pc".into(), ra);
        frames.push(Frame { pc: ra, cfa: None, registers: caller });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symfile::parse_symbol_file;

    fn regs(pairs: &[(&str, u32)]) -> RegisterState {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn expr(s: &str) -> PostfixExpr {
        s.parse().unwrap()
    }

    const CFI_EXCERPT: &str = "\
STACK CFI INIT 1bdc f0 .cfa: sp 0 + .ra: lr
STACK CFI 1be0 .cfa: sp 8 + .ra: .cfa -4 + ^ r11: .cfa -8 + ^
STACK CFI 1be4 .cfa: r11 4 +
";

    #[test]
    fn evaluation_examples() {
        let mem = StackSnapshot { base_address: 0xbeff_0000, bytes: vec![0; 0x20] };
        let r = regs(&[("sp", 0xbeff_0000), ("r11", 0xbeff_fe00)]);
        assert_eq!(eval_postfix(&expr("sp 8 +"), &r, None, &mem), Ok(0xbeff_0008));
        assert_eq!(eval_postfix(&expr("r11 4 +"), &r, None, &mem), Ok(0xbeff_fe04));
        let mut mem2 = mem.clone();
        mem2.bytes[0xc..0x10].copy_from_slice(&0x15d0u32.to_le_bytes());
        assert_eq!(eval_postfix(&expr(".cfa -4 + ^"), &r, Some(0xbeff_0010), &mem2), Ok(0x15d0));
        assert_eq!(
            eval_postfix(&expr(".cfa 64 + ^"), &r, Some(0xbeff_0010), &mem2),
            Err(CfiError::MemoryOutOfRange(0xbeff_0050))
        );
        assert!(matches!(eval_postfix(&expr(".cfa"), &r, None, &mem), Err(CfiError::MissingRegister(_))));
        assert_eq!(eval_postfix(&expr("sp 4 -"), &regs(&[("sp", 2)]), None, &mem), Ok(0xffff_fffe));
    }

    #[test]
    fn rule_overlay() {
        let sf = parse_symbol_file(CFI_EXCERPT).unwrap();
        assert_eq!(rules_at(&sf, 0x1bdc).unwrap().to_string(), ".cfa: sp 0 + .ra: lr");
        assert_eq!(rules_at(&sf, 0x1be4).unwrap().to_string(), ".cfa: r11 4 + .ra: .cfa -4 + ^ r11: .cfa -8 + ^");
        assert_eq!(rules_at(&sf, 0x1bdc + 0xef).unwrap(), rules_at(&sf, 0x1be4).unwrap());
        assert_eq!(rules_at(&sf, 0x1bdc + 0xf0), Err(CfiError::NoUnwindInfo(0x1ccc)));
    }

    #[test]
    fn leaf_returns_to_lr() {
        let sf = parse_symbol_file(
            "STACK CFI INIT 1000 10 .cfa: sp 0 + .ra: lr\nSTACK CFI INIT 2000 10 .cfa: sp 0 + .ra: lr\n",
        )
        .unwrap();
        let stack = StackSnapshot { base_address: 0x8000, bytes: vec![0; 16] };
        let r = regs(&[("pc", 0x1004), ("sp", 0x8000), ("lr", 0x2008)]);
        let u = unwind(&r, &stack, &sf, DEFAULT_MAX_FRAMES);
        assert_eq!(u.frames[1].pc, 0x2008);
        // the caller's .ra is lr again, unchanged: cfa does not grow
        assert_eq!(u.stop, UnwindStop::NonIncreasingCfa);
        assert_eq!(u.frames.len(), 2);
    }

    #[test]
    fn sp_outside_snapshot() {
        let sf = parse_symbol_file(CFI_EXCERPT).unwrap();
        let stack = StackSnapshot { base_address: 0x8000, bytes: vec![0; 16] };
        let r = regs(&[("pc", 0x1be0), ("sp", 0x7ff0), ("lr", 0)]);
        let u = unwind(&r, &stack, &sf, DEFAULT_MAX_FRAMES);
        assert_eq!((u.frames.len(), u.stop), (1, UnwindStop::MemoryOutOfRange));
    }

    #[test]
    fn null_return_address_ends_walk() {
        let sf = parse_symbol_file(CFI_EXCERPT).unwrap();
        let stack = StackSnapshot { base_address: 0x8000, bytes: vec![0; 16] };
        let r = regs(&[("pc", 0x1bdc), ("sp", 0x8000), ("lr", 0)]);
        let u = unwind(&r, &stack, &sf, 8);
        assert_eq!((u.frames.len(), u.stop), (1, UnwindStop::EndOfStack));
        assert_eq!(u.frames[0].cfa, Some(0x8000));
    }
}
