//! A synthetic, ARM-like program model and the deterministic layout engine
//! that turns it into code regions and a symbol file.
//!
//! The layout engine reproduces the kinds of indirect effects a fixed-width
//! backend has: stack allocations whose size may not fit one rotated
//! immediate, stack accesses that fall out of LD/ST immediate range, and
//! literal pools whose placement depends on code size.

mod corpus;
mod imm;
mod layout;
mod text;

pub use corpus::{generate_corpus, SizeClass};
pub use imm::{arm_imm_encodable, largest_encodable_le, stack_alloc_chunks, stack_alloc_instrs, LDST_MAX_OFFSET};
pub use layout::{
    access_cost, access_instrs, function_size, layout, LayoutError, LayoutResult, PlacedBlock, PlacedFunction,
    PlacedRegion, PoolPlacement, RegionKind, POOL_REACH,
};
pub use text::{parse_model, write_model, ModelParseError};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

/// Link register, as stored in `FrameModel::callee_saved`.
pub const LR: u8 = 14;
/// Frame pointer register (r11 in the ARM EABI).
pub const FP: u8 = 11;
/// Offset of the frame pointer from the bottom of the saved-register area
/// plus four, i.e. `fp = cfa - FP_BIAS`.
pub const FP_BIAS: u32 = 4;

pub fn reg_name(r: u8) -> String {
    if r == LR {
        "lr".to_string()
    } else {
        format!("r{r}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceFile {
    pub filenum: u32,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgramModel {
    pub module_name: String,
    pub files: Vec<SourceFile>,
    pub functions: Vec<FunctionModel>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionModel {
    pub name: String,
    pub object_name: String,
    pub section_name: String,
    pub alignment: u32,
    pub has_fp: bool,
    pub frame: FrameModel,
    pub blocks: Vec<BlockModel>,
    pub calls: Vec<CallSite>,
}

impl FunctionModel {
    /// Stable identity used to reseed per-function decision processes:
    /// name, object file and section name concatenated.
    pub fn identifier(&self) -> String {
        format!("{}{}{}", self.name, self.object_name, self.section_name)
    }

    pub fn push_bytes(&self) -> u32 {
        4 * self.frame.callee_saved.len() as u32
    }

    pub fn saves_lr(&self) -> bool {
        self.frame.callee_saved.contains(&LR)
    }
}

/// A direct call from `block`/`instr` (pre-NOP body index) to `callee`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CallSite {
    pub callee: usize,
    pub block: usize,
    pub instr: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameModel {
    pub local_size: u32,
    /// Sorted register numbers, drawn from r4..r11 and lr.
    pub callee_saved: Vec<u8>,
    pub accesses: Vec<StackAccess>,
    /// Stack padding between the locals and the saved registers.
    pub padding: u32,
}

impl FrameModel {
    /// Bytes allocated by the prologue's `sub sp` group.
    pub fn alloc_total(&self) -> u32 {
        self.local_size + self.padding
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackAccess {
    /// Code block whose body performs the access.
    pub block: usize,
    pub offset: u32,
    pub count: u32,
    pub source_line: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Code,
    Data,
}

/// `count` consecutive body instructions attributed to one source line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LineSpan {
    pub line: u32,
    pub filenum: u32,
    pub count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockModel {
    pub kind: BlockKind,
    /// Body instruction count for code blocks, byte size for data blocks.
    pub size: u32,
    pub consts: Vec<u32>,
    pub spans: Vec<LineSpan>,
    pub epilogue: bool,
    /// Gaps (1..size) in which a NOP was inserted, in pre-NOP numbering:
    /// gap `g` sits between original instructions `g-1` and `g`.
    pub nops: Vec<u32>,
}

impl BlockModel {
    pub fn code(spans: Vec<LineSpan>) -> Self {
        BlockModel {
            kind: BlockKind::Code,
            size: spans.iter().map(|s| s.count).sum(),
            consts: Vec::new(),
            spans,
            epilogue: false,
            nops: Vec::new(),
        }
    }

    pub fn data(bytes: u32) -> Self {
        BlockModel {
            kind: BlockKind::Data,
            size: bytes,
            consts: Vec::new(),
            spans: Vec::new(),
            epilogue: false,
            nops: Vec::new(),
        }
    }

    pub fn is_code(&self) -> bool {
        self.kind == BlockKind::Code
    }

    /// Position in the current body of original instruction `instr`.
    pub fn body_index(&self, instr: u32) -> u32 {
        instr + self.nops.iter().filter(|&&g| g <= instr).count() as u32
    }
}

/// A probability as an exact ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub const ZERO: Ratio = Ratio { num: 0, den: 1 };

    pub fn new(num: u32, den: u32) -> Option<Self> {
        (den > 0 && num <= den).then_some(Ratio { num, den })
    }

    /// `floor(p * 2^32)`; compare against the low 32 bits of a draw.
    pub fn threshold(&self) -> u64 {
        ((self.num as u64) << 32) / self.den as u64
    }

    pub fn hits(&self, draw: u64) -> bool {
        (draw & 0xffff_ffff) < self.threshold()
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = String;

    /// Accepts `num/den` or a decimal such as `0.02`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("invalid probability `{s}`");
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Ratio::new(n, d).ok_or_else(bad);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 9 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u32 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let den = 10u32.pow(frac.len() as u32);
        let frac_val: u32 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int.checked_mul(den).and_then(|v| v.checked_add(frac_val)).ok_or_else(bad)?;
        Ratio::new(num, den).ok_or_else(bad)
    }
}

/// Which diversification schemes a build applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Schemes {
    pub padding: bool,
    pub nops: bool,
    pub shuffle: bool,
}

impl Schemes {
    pub const ALL: Schemes = Schemes { padding: true, nops: true, shuffle: true };
    pub const PADDING_ONLY: Schemes = Schemes { padding: true, nops: false, shuffle: false };
    pub const NOPS_ONLY: Schemes = Schemes { padding: false, nops: true, shuffle: false };
    pub const SHUFFLE_ONLY: Schemes = Schemes { padding: false, nops: false, shuffle: true };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayoutOptions {
    /// Address of the first function; must be 16-byte aligned.
    pub base_address: u32,
    /// Let FP functions pick whichever base register keeps an access in
    /// immediate range.
    pub sp_fp_opt: bool,
    /// Give every function 8 bytes of padding in the default build.
    pub default_padding: bool,
    pub nop_probability: Ratio,
    /// Fraction of functions that receive one phantom instruction before
    /// layout, emulating backend effects the server cannot replay.
    pub desync_rate: Ratio,
    pub schemes: Schemes,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        LayoutOptions {
            base_address: 0x10000,
            sp_fp_opt: false,
            default_padding: true,
            nop_probability: Ratio { num: 1, den: 5 },
            desync_rate: Ratio::ZERO,
            schemes: Schemes::ALL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid program model: {0}")]
pub struct ModelError(pub String);

impl ProgramModel {
    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError(m));
        let files: HashSet<u32> = self.files.iter().map(|f| f.filenum).collect();
        let mut idents = HashSet::new();
        let mut names = HashSet::new();
        for f in &self.functions {
            let ctx = &f.name;
            if [&f.name, &f.object_name, &f.section_name]
                .iter()
                .any(|s| s.is_empty() || s.contains(char::is_whitespace))
            {
                return bad(format!("`{ctx}`: name, object and section must be non-empty without spaces"));
            }
            if !idents.insert(f.identifier()) || !names.insert(f.name.clone()) {
                return bad(format!("{ctx}: duplicate function identity"));
            }
            if ![4, 8, 16].contains(&f.alignment) {
                return bad(format!("{ctx}: alignment {} not in {{4, 8, 16}}", f.alignment));
            }
            let fr = &f.frame;
            if fr.local_size % 4 != 0 || fr.padding % 8 != 0 {
                return bad(format!("{ctx}: local size must be 4-aligned, padding 8-aligned"));
            }
            if fr.callee_saved.windows(2).any(|w| w[0] >= w[1])
                || fr.callee_saved.iter().any(|&r| !((4..=11).contains(&r) || r == LR))
            {
                return bad(format!("{ctx}: callee-saved set must be sorted within r4..r11, lr"));
            }
            if f.has_fp && !(fr.callee_saved.contains(&FP) && f.saves_lr()) {
                return bad(format!("{ctx}: frame pointer functions must save r11 and lr"));
            }
            if !f.calls.is_empty() && !f.saves_lr() {
                return bad(format!("{ctx}: functions with calls must save lr"));
            }
            match f.blocks.first() {
                Some(b) if b.is_code() => {}
                _ => return bad(format!("{ctx}: first block must be code")),
            }
            if !f.blocks.iter().any(|b| b.epilogue) {
                return bad(format!("{ctx}: no epilogue block"));
            }
            for (i, b) in f.blocks.iter().enumerate() {
                match b.kind {
                    BlockKind::Code => {
                        if b.size == 0 {
                            return bad(format!("{ctx}: code block {i} is empty"));
                        }
                        if b.spans.iter().map(|s| s.count).sum::<u32>() != b.size
                            || b.spans.iter().any(|s| s.count == 0)
                        {
                            return bad(format!("{ctx}: block {i} spans do not cover its body"));
                        }
                        if let Some(s) = b.spans.iter().find(|s| !files.contains(&s.filenum)) {
                            return bad(format!("{ctx}: block {i} uses unknown file {}", s.filenum));
                        }
                        if b.nops.windows(2).any(|w| w[0] >= w[1]) || b.nops.contains(&0) {
                            return bad(format!("{ctx}: block {i} NOP gaps not increasing"));
                        }
                    }
                    BlockKind::Data => {
                        if b.size == 0 || b.size % 4 != 0 || !b.consts.is_empty() || b.epilogue {
                            return bad(format!("{ctx}: malformed data block {i}"));
                        }
                    }
                }
            }
            for a in &fr.accesses {
                if a.offset >= fr.local_size || a.offset % 4 != 0 || a.count == 0 {
                    return bad(format!("{ctx}: access at {} outside local area", a.offset));
                }
                if !f.blocks.get(a.block).is_some_and(BlockModel::is_code) {
                    return bad(format!("{ctx}: access in non-code block {}", a.block));
                }
            }
            for c in &f.calls {
                if c.callee >= self.functions.len() {
                    return bad(format!("{ctx}: call to unknown function {}", c.callee));
                }
                match f.blocks.get(c.block) {
                    Some(b) if b.is_code() && c.instr + 1 < b.size - b.nops.len() as u32 => {}
                    _ => return bad(format!("{ctx}: bad call site {}:{}", c.block, c.instr)),
                }
            }
        }
        Ok(())
    }
}
