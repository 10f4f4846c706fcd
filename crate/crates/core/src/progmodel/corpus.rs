//! Deterministic pseudo-random program corpus.

use std::str::FromStr;

use super::{BlockModel, CallSite, FrameModel, FunctionModel, LineSpan, ProgramModel, SourceFile, StackAccess, FP, LR};
use crate::diversify::{function_reseed, Prng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Medium,
}

impl FromStr for SizeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(SizeClass::Small),
            "medium" => Ok(SizeClass::Medium),
            _ => Err(format!("unknown size class `{s}`")),
        }
    }
}

const VERBS: &[&str] = &[
    "parse", "read", "emit", "scan", "push", "pop", "hash", "merge", "split", "visit", "lookup", "flush", "init",
    "free", "copy",
];
const NOUNS: &[&str] = &[
    "header", "line", "token", "node", "buffer", "entry", "table", "frame", "block", "record", "symbol", "chunk",
    "state", "range",
];

struct Gen(Prng);

impl Gen {
    fn below(&mut self, n: u32) -> u32 {
        (self.0.next_u64() % n as u64) as u32
    }

    fn range(&mut self, lo: u32, hi: u32) -> u32 {
        lo + self.below(hi - lo + 1)
    }

    fn chance(&mut self, percent: u32) -> bool {
        self.below(100) < percent
    }

    /// Skewed towards `lo`: minimum of two uniform draws.
    fn skewed(&mut self, lo: u32, hi: u32) -> u32 {
        self.range(lo, hi).min(self.range(lo, hi))
    }
}

/// `n_programs` models; identical arguments give identical corpora.
pub fn generate_corpus(seed: u64, n_programs: usize, class: SizeClass) -> Vec<ProgramModel> {
    assert!(n_programs >= 1);
    (0..n_programs)
        .map(|p| {
            let mut g = Gen(Prng::new(function_reseed(&format!("program#{p}"), seed)));
            generate_program(&mut g, p, class)
        })
        .collect()
}

fn generate_program(g: &mut Gen, p: usize, class: SizeClass) -> ProgramModel {
    let module_name = format!("prog{p}");
    let n_files = g.range(2, 6);
    let files: Vec<SourceFile> =
        (1..=n_files).map(|k| SourceFile { filenum: k, path: format!("src/{module_name}/unit{k}.c") }).collect();
    let n_funcs = match class {
        SizeClass::Small => g.range(8, 64),
        SizeClass::Medium => g.range(64, 512),
    } as usize;

    let mut functions: Vec<FunctionModel> = (0..n_funcs).map(|i| generate_function(g, i, n_files)).collect();

    // Call DAG: edges only from lower to higher indices.
    for (i, f) in functions.iter_mut().enumerate().take(n_funcs.saturating_sub(1)) {
        if !f.saves_lr() || !g.chance(60) {
            continue;
        }
        let sites: Vec<usize> =
            f.blocks.iter().enumerate().filter(|(_, b)| b.is_code() && b.size >= 2).map(|(k, _)| k).collect();
        if sites.is_empty() {
            continue;
        }
        for _ in 0..g.range(1, 3) {
            let callee = g.range(i as u32 + 1, n_funcs as u32 - 1) as usize;
            let block = sites[g.below(sites.len() as u32) as usize];
            let instr = g.below(f.blocks[block].size - 1);
            f.calls.push(CallSite { callee, block, instr });
        }
    }
    let m = ProgramModel { module_name, files, functions };
    debug_assert_eq!(m.validate(), Ok(()));
    m
}

fn generate_function(g: &mut Gen, i: usize, n_files: u32) -> FunctionModel {
    let verb = VERBS[g.below(VERBS.len() as u32) as usize];
    let noun = NOUNS[g.below(NOUNS.len() as u32) as usize];
    let name = format!("{verb}_{noun}_{i}");
    let file = g.range(1, n_files);
    let alignment = [4, 4, 8, 16][g.below(4) as usize];
    let has_fp = g.chance(40);

    let mut callee_saved: Vec<u8> = (4..=10).filter(|_| g.chance(35)).collect();
    if has_fp {
        callee_saved.push(FP);
    }
    if has_fp || g.chance(70) {
        callee_saved.push(LR);
    }

    let local_size = match g.below(10) {
        0..=3 => 0,
        4..=8 => 4 * g.range(1, 128),
        _ => 1 << g.range(10, 14),
    };

    let n_blocks = g.skewed(1, 40) as usize;
    let mut line = g.range(1, 2000);
    let mut blocks = Vec::with_capacity(n_blocks);
    for k in 0..n_blocks {
        if k > 0 && k + 1 < n_blocks && g.chance(3) {
            blocks.push(BlockModel::data(4 * g.range(1, 16)));
            continue;
        }
        let count = g.skewed(1, 200);
        let n_spans = g.range(1, 4).min(count);
        let mut spans = Vec::with_capacity(n_spans as usize);
        let mut left = count;
        for s in 0..n_spans {
            let c = if s + 1 == n_spans { left } else { g.range(1, left - (n_spans - s - 1)) };
            left -= c;
            line += g.range(1, 3);
            let filenum = if g.chance(10) { 1 } else { file };
            spans.push(LineSpan { line, filenum, count: c });
        }
        let mut b = BlockModel::code(spans);
        b.epilogue = k + 1 == n_blocks || g.chance(10);
        blocks.push(b);
    }

    if g.chance(30) {
        let pool: Vec<u32> = (0..g.range(1, 6)).map(|_| g.0.next_u64() as u32).collect();
        for b in blocks.iter_mut().filter(|b| b.is_code()) {
            if g.chance(25) {
                for _ in 0..g.range(1, 3) {
                    b.consts.push(pool[g.below(pool.len() as u32) as usize]);
                }
            }
        }
    }

    let code_blocks: Vec<usize> = (0..blocks.len()).filter(|&k| blocks[k].is_code()).collect();
    let mut accesses = Vec::new();
    if local_size > 0 {
        let mut add = |g: &mut Gen, offset: u32| {
            let block = code_blocks[g.below(code_blocks.len() as u32) as usize];
            let spans = &blocks[block].spans;
            let source_line = spans[g.below(spans.len() as u32) as usize].line;
            accesses.push(StackAccess { block, offset, count: g.range(1, 4), source_line });
        };
        for _ in 0..g.range(1, 6) {
            let offset = 4 * g.below(local_size / 4);
            add(g, offset);
        }
        // An access whose SP-relative offset sits just below the LD/ST
        // limit, so padding can push it out of range.
        if local_size > 4096 {
            let below_limit = 3584 + 4 * g.below(128);
            add(g, local_size - below_limit);
        }
    }

    FunctionModel {
        object_name: format!("unit{file}.o"),
        section_name: format!(".text.{name}"),
        name,
        alignment,
        has_fp,
        frame: FrameModel { local_size, callee_saved, accesses, padding: 0 },
        blocks,
        calls: Vec::new(),
    }
}
