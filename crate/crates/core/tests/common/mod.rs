//! Shared generators: random valid symbol files and near-miss pairs of them.
#![allow(dead_code)]

use divcrash::collector::CrashSite;
use divcrash::diversify::Prng;
use divcrash::progmodel::ProgramModel;
use divcrash::symfile::{
    CfiDelta, CfiInitRecord, FileRecord, FuncRecord, LineRecord, PublicRecord, RuleMap, SymbolFile,
};
use proptest::prelude::*;

#[derive(Clone, Debug)]
pub struct FuncSpec {
    pub gap: u32,
    /// (length in instructions, line, file index)
    pub segments: Vec<(u32, u32, u32)>,
    pub name: u32,
    pub multiple: bool,
    /// (offset in instructions, CFA constant); `None` means no CFI.
    pub cfi: Option<Vec<(u32, u32)>>,
}

#[derive(Clone, Debug)]
pub struct SymSpec {
    pub module: u32,
    pub files: u32,
    pub funcs: Vec<FuncSpec>,
    pub publics: Vec<u32>,
}

fn func_spec() -> impl Strategy<Value = FuncSpec> {
    (
        0u32..8,
        prop::collection::vec((1u32..40, 1u32..3000, 0u32..4), 1..6),
        0u32..1000,
        prop::bool::weighted(0.05),
        prop::option::weighted(0.8, prop::collection::vec((0u32..60, 0u32..600), 0..4)),
    )
        .prop_map(|(gap, segments, name, multiple, cfi)| FuncSpec { gap, segments, name, multiple, cfi })
}

pub fn sym_spec() -> impl Strategy<Value = SymSpec> {
    (0u32..4, 1u32..5, prop::collection::vec(func_spec(), 0..12), prop::collection::vec(0u32..2000, 0..3))
        .prop_map(|(module, files, funcs, publics)| SymSpec { module, files, funcs, publics })
}

fn rules(cfa: u32, saved: bool) -> RuleMap {
    let text = if saved {
        format!(".cfa: sp {cfa} + .ra: .cfa -4 + ^ r4: .cfa -8 + ^")
    } else {
        format!(".cfa: sp {cfa} + .ra: lr")
    };
    RuleMap::parse(&text).expect("well-formed rules")
}

/// Lay the spec out from 0x1000; every result passes `validate`.
pub fn build(spec: &SymSpec) -> SymbolFile {
    let mut sf = SymbolFile {
        module_id: if spec.module == 0 {
            String::new()
        } else {
            format!("Linux arm {:032X}0 prog{}", spec.module, spec.module)
        },
        files: (0..spec.files).map(|i| FileRecord { filenum: i + 1, path: format!("src/unit{i}.c") }).collect(),
        ..SymbolFile::default()
    };
    let mut addr = 0x1000u64;
    for (i, f) in spec.funcs.iter().enumerate() {
        addr += 4 * f.gap as u64;
        let start = addr;
        let mut lines = Vec::new();
        for &(len, line, file) in &f.segments {
            let size = 4 * len as u64;
            lines.push(LineRecord { address: addr, size, line, filenum: 1 + file % spec.files });
            addr += size;
        }
        let size = addr - start;
        sf.funcs.push(FuncRecord {
            multiple: f.multiple,
            address: start,
            size,
            param_size: 0,
            name: format!("fn_{}_{i}", f.name),
            lines,
        });
        if let Some(deltas) = &f.cfi {
            let mut offs: Vec<(u64, u32)> =
                deltas.iter().map(|&(o, c)| (4 * (1 + o as u64), c)).filter(|&(o, _)| o < size).collect();
            offs.sort_by_key(|d| d.0);
            offs.dedup_by_key(|d| d.0);
            sf.cfi_regions.push(CfiInitRecord {
                address: start,
                size,
                init_rules: rules(0, false),
                deltas: offs
                    .iter()
                    .enumerate()
                    .map(|(k, &(o, c))| CfiDelta { address: start + o, rules: rules(4 * c, k == 0) })
                    .collect(),
            });
        }
    }
    let mut publics: Vec<u32> = spec.publics.clone();
    publics.sort_unstable();
    sf.publics = publics
        .iter()
        .map(|&p| PublicRecord {
            multiple: false,
            address: 0x1000 + 4 * p as u64,
            param_size: 0,
            name: format!("pub_{p}"),
        })
        .collect();
    sf
}

/// One edit of a spec, the kinds of change diversification residue causes.
#[derive(Clone, Debug)]
pub enum Mutation {
    GrowSegment(usize, usize, u32),
    ShrinkSegment(usize, usize),
    Relabel(usize, usize, u32),
    CfaConstant(usize, usize, u32),
    Gap(usize, u32),
    SplitSegment(usize, usize),
    DropFunction(usize),
    DropCfi(usize),
    Rename(usize, u32),
}

pub fn mutation() -> impl Strategy<Value = Mutation> {
    let ix = 0usize..16;
    prop_oneof![
        4 => (ix.clone(), ix.clone(), 1u32..4).prop_map(|(a, b, c)| Mutation::GrowSegment(a, b, c)),
        2 => (ix.clone(), ix.clone()).prop_map(|(a, b)| Mutation::ShrinkSegment(a, b)),
        2 => (ix.clone(), ix.clone(), 1u32..3000).prop_map(|(a, b, c)| Mutation::Relabel(a, b, c)),
        3 => (ix.clone(), ix.clone(), 0u32..600).prop_map(|(a, b, c)| Mutation::CfaConstant(a, b, c)),
        2 => (ix.clone(), 0u32..8).prop_map(|(a, b)| Mutation::Gap(a, b)),
        1 => (ix.clone(), ix.clone()).prop_map(|(a, b)| Mutation::SplitSegment(a, b)),
        1 => ix.clone().prop_map(Mutation::DropFunction),
        1 => ix.clone().prop_map(Mutation::DropCfi),
        1 => (ix, 0u32..1000).prop_map(|(a, b)| Mutation::Rename(a, b)),
    ]
}

pub fn apply_mutation(spec: &mut SymSpec, m: &Mutation) {
    let n = spec.funcs.len();
    if n == 0 {
        return;
    }
    let f = |i: usize| i % n;
    match *m {
        Mutation::GrowSegment(i, s, by) => {
            let segs = &mut spec.funcs[f(i)].segments;
            let k = s % segs.len();
            segs[k].0 += by;
        }
        Mutation::ShrinkSegment(i, s) => {
            let segs = &mut spec.funcs[f(i)].segments;
            let k = s % segs.len();
            segs[k].0 = (segs[k].0 - 1).max(1);
        }
        Mutation::Relabel(i, s, line) => {
            let segs = &mut spec.funcs[f(i)].segments;
            let k = s % segs.len();
            segs[k].1 = line;
        }
        Mutation::CfaConstant(i, d, c) => {
            if let Some(deltas) = spec.funcs[f(i)].cfi.as_mut().filter(|d| !d.is_empty()) {
                let k = d % deltas.len();
                deltas[k].1 = c;
            }
        }
        Mutation::Gap(i, g) => spec.funcs[f(i)].gap = g,
        Mutation::SplitSegment(i, s) => {
            let segs = &mut spec.funcs[f(i)].segments;
            let k = s % segs.len();
            if segs[k].0 > 1 {
                let half = segs[k].0 / 2;
                segs[k].0 -= half;
                let mut extra = segs[k];
                extra.0 = half;
                extra.1 += 1;
                segs.insert(k + 1, extra);
            }
        }
        Mutation::DropFunction(i) => {
            spec.funcs.remove(f(i));
        }
        Mutation::DropCfi(i) => spec.funcs[f(i)].cfi = None,
        Mutation::Rename(i, name) => spec.funcs[f(i)].name = name,
    }
}

/// A truth symbol file and an approximation a few edits away from it.
pub fn near_pair() -> impl Strategy<Value = (SymbolFile, SymbolFile)> {
    (sym_spec(), prop::collection::vec(mutation(), 0..8)).prop_map(|(spec, muts)| {
        let truth = build(&spec);
        let mut approx_spec = spec;
        for m in &muts {
            apply_mutation(&mut approx_spec, m);
        }
        (build(&approx_spec), truth)
    })
}

/// Arbitrary pairs: mostly near misses, sometimes unrelated files.
pub fn any_pair() -> impl Strategy<Value = (SymbolFile, SymbolFile)> {
    prop_oneof![
        9 => near_pair(),
        1 => (sym_spec(), sym_spec()).prop_map(|(a, b)| (build(&a), build(&b))),
    ]
}

/// Source line of original body instruction `site.instr`, from the model's
/// line spans.
pub fn site_line(model: &ProgramModel, site: &CrashSite) -> (u32, u32) {
    let mut left = site.instr;
    for s in &model.functions[site.function].blocks[site.block].spans {
        if left < s.count {
            return (s.filenum, s.line);
        }
        left -= s.count;
    }
    panic!("instruction {} beyond block spans", site.instr)
}

fn below(rng: &mut Prng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

/// A random code location in function `f`.
pub fn random_site(model: &ProgramModel, f: usize, rng: &mut Prng) -> CrashSite {
    let code: Vec<usize> =
        (0..model.functions[f].blocks.len()).filter(|&b| model.functions[f].blocks[b].is_code()).collect();
    let block = code[below(rng, code.len())];
    let size = model.functions[f].blocks[block].size;
    CrashSite { function: f, block, instr: below(rng, size as usize) as u32 }
}

/// Follows random call edges from a random function for up to `max_depth`
/// frames, ending at a random location in the last callee.
pub fn random_chain(model: &ProgramModel, rng: &mut Prng, max_depth: usize) -> Vec<CrashSite> {
    let mut f = below(rng, model.functions.len());
    let mut chain = Vec::new();
    loop {
        let calls = &model.functions[f].calls;
        if chain.len() + 1 < max_depth && !calls.is_empty() && !rng.next_u64().is_multiple_of(4) {
            let c = &calls[below(rng, calls.len())];
            chain.push(CrashSite { function: f, block: c.block, instr: c.instr });
            f = c.callee;
        } else {
            chain.push(random_site(model, f, rng));
            return chain;
        }
    }
}
