use std::collections::BTreeSet;

use super::imm::{stack_alloc_chunks, LDST_MAX_OFFSET};
use super::{reg_name, BlockKind, FrameModel, FunctionModel, LayoutOptions, ModelError, ProgramModel, FP, FP_BIAS, LR};
use crate::diversify::fnv1a64;
use crate::symfile::{CfiDelta, CfiInitRecord, FileRecord, FuncRecord, LineRecord, PostfixExpr, RuleMap, SymbolFile};

/// Forward reach of a PC-relative literal load.
pub const POOL_REACH: u32 = 4096;
const POOL_MARGIN: u32 = 8;
const MAX_POOL_ITERATIONS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("function order is not a permutation of {0} functions")]
    BadOrder(usize),
    #[error("literal pool placement for `{0}` did not converge")]
    PoolNoConvergence(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionKind {
    Code,
    Data,
    Pool,
}

/// One contiguous region of a placed function. Pools carry the index of the
/// block they follow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacedRegion {
    pub function: usize,
    pub address: u32,
    pub size: u32,
    pub kind: RegionKind,
    pub block: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacedBlock {
    pub address: u32,
    /// Total bytes.
    pub size: u32,
    /// Prologue instructions ahead of the body (push, fp setup, allocation).
    pub lead: u32,
    /// Body instructions, NOPs included.
    pub body: u32,
    /// Stack access instructions emitted after the body.
    pub access: u32,
    /// Epilogue instructions (deallocation, pop).
    pub tail: u32,
}

impl PlacedBlock {
    pub fn body_address(&self) -> u32 {
        self.address + 4 * self.lead
    }

    pub fn total_instrs(&self) -> u32 {
        self.lead + self.body + self.access + self.tail
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolPlacement {
    pub function: usize,
    pub after_block: usize,
    pub size: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacedFunction {
    pub index: usize,
    pub address: u32,
    pub size: u32,
    pub blocks: Vec<PlacedBlock>,
    pub pools: Vec<PoolPlacement>,
    pub alloc_instrs: u32,
    pub access_instrs: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutResult {
    pub base_address: u32,
    /// Function indices in placement order.
    pub order: Vec<usize>,
    /// Indexed like `ProgramModel::functions`.
    pub functions: Vec<PlacedFunction>,
    pub symfile: SymbolFile,
    pub pool_placements: Vec<PoolPlacement>,
    /// Code section contents starting at `base_address`.
    pub text: Vec<u8>,
}

impl LayoutResult {
    /// Every placed region in address order.
    pub fn regions(&self) -> Vec<PlacedRegion> {
        let mut out = Vec::new();
        for &fi in &self.order {
            let pf = &self.functions[fi];
            let mut pools = pf.pools.iter().peekable();
            for (bi, b) in pf.blocks.iter().enumerate() {
                let kind = if b.lead + b.body + b.access + b.tail > 0 { RegionKind::Code } else { RegionKind::Data };
                out.push(PlacedRegion { function: fi, address: b.address, size: b.size, kind, block: bi });
                let mut cursor = b.address + b.size;
                while let Some(p) = pools.next_if(|p| p.after_block == bi) {
                    out.push(PlacedRegion {
                        function: fi,
                        address: cursor,
                        size: p.size,
                        kind: RegionKind::Pool,
                        block: bi,
                    });
                    cursor += p.size;
                }
            }
        }
        out
    }

    /// Address of original (pre-NOP) body instruction `instr` of a block.
    pub fn instr_address(&self, model: &ProgramModel, function: usize, block: usize, instr: u32) -> Option<u32> {
        let b = model.functions.get(function)?.blocks.get(block)?;
        if !b.is_code() || instr >= b.size - b.nops.len() as u32 {
            return None;
        }
        let pb = self.functions.get(function)?.blocks.get(block)?;
        Some(pb.body_address() + 4 * b.body_index(instr))
    }

    pub fn image_end(&self) -> u32 {
        self.base_address + self.text.len() as u32
    }
}

/// Cost in instructions of one stack access: 1 when its offset from the
/// chosen base register fits an LD/ST immediate, 2 otherwise.
pub fn access_cost(frame: &FrameModel, has_fp: bool, offset: u32, sp_fp_opt: bool) -> u32 {
    let cost = |off: u32| if off <= LDST_MAX_OFFSET { 1 } else { 2 };
    let sp_off = frame.local_size + frame.padding - offset;
    if !has_fp {
        return cost(sp_off);
    }
    let fp_off = offset + FP_BIAS;
    if sp_fp_opt {
        cost(fp_off).min(cost(sp_off))
    } else {
        cost(fp_off)
    }
}

/// Total instructions spent on the frame's stack accesses.
pub fn access_instrs(frame: &FrameModel, has_fp: bool, options: &LayoutOptions) -> u32 {
    frame.accesses.iter().map(|a| a.count * access_cost(frame, has_fp, a.offset, options.sp_fp_opt)).sum()
}

fn align_up(v: u32, a: u32) -> u32 {
    v.div_ceil(a) * a
}

fn encode_imm(v: u32) -> u32 {
    (0..16u32)
        .find_map(|r| {
            let b = v.rotate_left(2 * r);
            (b <= 0xff).then_some((r << 8) | b)
        })
        .unwrap_or(0)
}

const NOP_WORD: u32 = 0xe320_f000;

/// Layout of one function at offset 0.
struct FunctionLayout {
    size: u32,
    blocks: Vec<PlacedBlock>,
    pools: Vec<(usize, Vec<u32>)>,
    lines: Vec<LineRecord>,
    init_rules: RuleMap,
    deltas: Vec<CfiDelta>,
    words: Vec<u8>,
    alloc_instrs: u32,
    access_instrs: u32,
}

/// Decide where literal pools go. Each block's constants are referenced
/// from the block start; a pool is emitted after the current block once
/// deferring it past the next block would put the end of the pool more than
/// `POOL_REACH - 8` bytes past the earliest pending reference.
fn plan_pools(sizes: &[u32], consts: &[&[u32]], forced: &BTreeSet<usize>) -> Vec<(usize, Vec<u32>)> {
    let mut pools = Vec::new();
    let mut pending: Vec<u32> = Vec::new();
    let mut earliest: Option<u32> = None;
    let mut cur = 0u32;
    let n = sizes.len();
    for b in 0..n {
        let start = cur;
        cur += sizes[b];
        if !consts[b].is_empty() {
            earliest.get_or_insert(start);
            for &c in consts[b] {
                if !pending.contains(&c) {
                    pending.push(c);
                }
            }
        }
        let Some(first_ref) = earliest else { continue };
        let emit_now = b + 1 == n || forced.contains(&b) || {
            let extra = consts[b + 1].iter().filter(|c| !pending.contains(c)).collect::<BTreeSet<_>>().len() as u32;
            let deferred_end = cur + sizes[b + 1] + 4 * (pending.len() as u32 + extra);
            deferred_end - first_ref > POOL_REACH - POOL_MARGIN
        };
        if emit_now {
            cur += 4 * pending.len() as u32;
            pools.push((b, std::mem::take(&mut pending)));
            earliest = None;
        }
    }
    pools
}

/// First block whose constants end up out of reach, if any.
fn pool_violation(sizes: &[u32], consts: &[&[u32]], pools: &[(usize, Vec<u32>)]) -> Option<usize> {
    let mut starts = Vec::with_capacity(sizes.len());
    let mut pool_at = Vec::new();
    let mut cur = 0;
    let mut pi = 0;
    for (b, &s) in sizes.iter().enumerate() {
        starts.push(cur);
        cur += s;
        while pi < pools.len() && pools[pi].0 == b {
            pool_at.push(cur);
            cur += 4 * pools[pi].1.len() as u32;
            pi += 1;
        }
    }
    for (b, cs) in consts.iter().enumerate() {
        for c in cs.iter() {
            // the first pool after this block holding the constant
            let hit = pools.iter().zip(&pool_at).find(|((after, entries), _)| *after >= b && entries.contains(c));
            match hit {
                Some(((_, entries), &at)) => {
                    let slot = at + 4 * entries.iter().position(|e| e == c).unwrap_or(0) as u32;
                    if slot + 4 - starts[b] > POOL_REACH {
                        return Some(b);
                    }
                }
                None => return Some(b),
            }
        }
    }
    None
}

fn layout_function(f: &FunctionModel, options: &LayoutOptions) -> Result<FunctionLayout, LayoutError> {
    let frame = &f.frame;
    let push_n = u32::from(!frame.callee_saved.is_empty());
    let fp_n = u32::from(f.has_fp);
    let total = frame.alloc_total();
    let chunks = stack_alloc_chunks(total);
    let alloc_n = chunks.len() as u32;
    let push_bytes = f.push_bytes();

    let mut blocks = Vec::with_capacity(f.blocks.len());
    let mut sizes = Vec::with_capacity(f.blocks.len());
    let mut access_total = 0;
    for (bi, b) in f.blocks.iter().enumerate() {
        if b.kind == BlockKind::Data {
            blocks.push(PlacedBlock { address: 0, size: b.size, lead: 0, body: 0, access: 0, tail: 0 });
            sizes.push(b.size);
            continue;
        }
        let lead = if bi == 0 { push_n + fp_n + alloc_n } else { 0 };
        let access: u32 = frame
            .accesses
            .iter()
            .filter(|a| a.block == bi)
            .map(|a| a.count * access_cost(frame, f.has_fp, a.offset, options.sp_fp_opt))
            .sum();
        access_total += access;
        let tail = if b.epilogue { alloc_n + push_n } else { 0 };
        let pb =
            PlacedBlock { address: 0, size: 4 * (lead + b.size + access + tail), lead, body: b.size, access, tail };
        sizes.push(pb.size);
        blocks.push(pb);
    }

    let consts: Vec<&[u32]> = f.blocks.iter().map(|b| b.consts.as_slice()).collect();
    let mut forced = BTreeSet::new();
    let mut pools = plan_pools(&sizes, &consts, &forced);
    let mut converged = false;
    for _ in 0..MAX_POOL_ITERATIONS {
        match pool_violation(&sizes, &consts, &pools) {
            None => {
                converged = true;
                break;
            }
            Some(b) => {
                if !forced.insert(b) {
                    break;
                }
                pools = plan_pools(&sizes, &consts, &forced);
            }
        }
    }
    if !converged {
        return Err(LayoutError::PoolNoConvergence(f.name.clone()));
    }

    // Assign offsets and emit line runs and code words.
    let mut lines: Vec<LineRecord> = Vec::new();
    let mut words: Vec<u8> = Vec::new();
    let push_word = |w: u32, words: &mut Vec<u8>| words.extend_from_slice(&w.to_le_bytes());
    let emit_run = |lines: &mut Vec<LineRecord>, at: u32, line: u32, filenum: u32, n: u32| {
        if n == 0 {
            return;
        }
        match lines.last_mut() {
            Some(l) if l.end() == at as u64 && l.line == line && l.filenum == filenum => l.size += 4 * n as u64,
            _ => lines.push(LineRecord { address: at as u64, size: 4 * n as u64, line, filenum }),
        }
    };
    let reg_mask = |regs: &[u8], lr_as_pc: bool| -> u32 {
        regs.iter().map(|&r| if r == LR && lr_as_pc { 1u32 << 15 } else { 1u32 << r }).fold(0, |m, b| m | b)
    };

    let mut cur = 0u32;
    let mut pool_iter = pools.iter().peekable();
    for (bi, b) in f.blocks.iter().enumerate() {
        let pb = &mut blocks[bi];
        pb.address = cur;
        if b.kind == BlockKind::Data {
            for i in 0..b.size / 4 {
                push_word(0xdada_0000 | (bi as u32) << 8 | i & 0xff, &mut words);
            }
        } else {
            let first = b.spans[0];
            let last = *b.spans.last().unwrap_or(&first);
            let mut at = cur;
            // prologue
            emit_run(&mut lines, at, first.line, first.filenum, pb.lead);
            at += 4 * pb.lead;
            if bi == 0 {
                if push_n > 0 {
                    push_word(0xe92d_0000 | reg_mask(&frame.callee_saved, false), &mut words);
                }
                if f.has_fp {
                    push_word(0xe28d_b000 | encode_imm(push_bytes - FP_BIAS), &mut words);
                }
                for &c in &chunks {
                    push_word(0xe24d_d000 | encode_imm(c), &mut words);
                }
            }
            // body
            let nop_slots: BTreeSet<u32> = b.nops.iter().enumerate().map(|(k, &g)| g + k as u32).collect();
            for s in &b.spans {
                emit_run(&mut lines, at, s.line, s.filenum, s.count);
                at += 4 * s.count;
            }
            for p in 0..b.size {
                let w = if nop_slots.contains(&p) {
                    NOP_WORD
                } else {
                    0xe080_0000 | ((bi as u32 & 0xff) << 8) | (p & 0xff)
                };
                push_word(w, &mut words);
            }
            // stack accesses
            for a in frame.accesses.iter().filter(|a| a.block == bi) {
                let c = access_cost(frame, f.has_fp, a.offset, options.sp_fp_opt);
                emit_run(&mut lines, at, a.source_line, first.filenum, a.count * c);
                at += 4 * a.count * c;
                for _ in 0..a.count {
                    if c == 2 {
                        push_word(0xe300_c000 | (a.offset & 0xfff), &mut words);
                        push_word(0xe79d_000c, &mut words);
                    } else {
                        push_word(0xe59d_0000 | (a.offset & 0xfff), &mut words);
                    }
                }
            }
            // epilogue
            emit_run(&mut lines, at, last.line, last.filenum, pb.tail);
            if b.epilogue {
                for &c in &chunks {
                    push_word(0xe28d_d000 | encode_imm(c), &mut words);
                }
                if push_n > 0 {
                    push_word(0xe8bd_0000 | reg_mask(&frame.callee_saved, true), &mut words);
                }
            }
        }
        cur += pb.size;
        while let Some((_, entries)) = pool_iter.next_if(|(after, _)| *after == bi) {
            for &c in entries {
                push_word(c, &mut words);
            }
            cur += 4 * entries.len() as u32;
        }
    }
    let size = cur;
    debug_assert_eq!(words.len() as u32, size);

    // Unwind rules.
    let mut init_rules = RuleMap::new();
    init_rules.set(".cfa", PostfixExpr::reg_plus("sp", 0));
    init_rules.set(".ra", PostfixExpr::reg("lr"));
    let mut deltas = Vec::new();
    if push_n > 0 {
        let mut r = RuleMap::new();
        r.set(".cfa", PostfixExpr::reg_plus("sp", push_bytes as i64));
        let n = frame.callee_saved.len() as i64;
        for (i, &reg) in frame.callee_saved.iter().enumerate() {
            let off = -4 * (n - i as i64);
            if reg == LR {
                r.set(".ra", PostfixExpr::saved_at_cfa(off));
            } else {
                r.set(&reg_name(reg), PostfixExpr::saved_at_cfa(off));
            }
        }
        deltas.push(CfiDelta { address: 4, rules: r });
    }
    if f.has_fp {
        let mut r = RuleMap::new();
        r.set(".cfa", PostfixExpr::reg_plus(&reg_name(FP), FP_BIAS as i64));
        deltas.push(CfiDelta { address: 8, rules: r });
    }
    let body_cfa = |sp_off: u32| {
        let mut r = RuleMap::new();
        r.set(".cfa", PostfixExpr::reg_plus("sp", sp_off as i64));
        r
    };
    if !f.has_fp && alloc_n > 0 {
        deltas.push(CfiDelta { address: 4 * (push_n + alloc_n) as u64, rules: body_cfa(push_bytes + total) });
        if push_n > 0 {
            for (bi, b) in f.blocks.iter().enumerate().filter(|(_, b)| b.epilogue) {
                let pb = &blocks[bi];
                let before_pop = pb.address + pb.size - 4;
                if deltas.last().is_some_and(|d| d.address >= before_pop as u64) {
                    continue;
                }
                deltas.push(CfiDelta { address: before_pop as u64, rules: body_cfa(push_bytes) });
                let next_code =
                    f.blocks[bi + 1..].iter().position(|nb| nb.is_code()).map(|k| blocks[bi + 1 + k].address);
                if let Some(at) = next_code {
                    deltas.push(CfiDelta { address: at as u64, rules: body_cfa(push_bytes + total) });
                }
                let _ = b;
            }
        }
    }

    Ok(FunctionLayout {
        size,
        blocks,
        pools,
        lines,
        init_rules,
        deltas,
        words,
        alloc_instrs: alloc_n,
        access_instrs: access_total,
    })
}

/// Size in bytes of `f` laid out on its own; placement never changes it.
pub fn function_size(f: &FunctionModel, options: &LayoutOptions) -> Result<u32, LayoutError> {
    Ok(layout_function(f, options)?.size)
}

/// Synthetic Breakpad module id derived from the module name.
pub(crate) fn module_id_for(name: &str) -> String {
    format!("Linux arm {:016X}{:016X}0 {name}", fnv1a64(name.as_bytes()), fnv1a64(format!("{name}#id").as_bytes()))
}

/// Place the functions of `model` in `order` and derive the symbol file.
pub fn layout(model: &ProgramModel, order: &[usize], options: &LayoutOptions) -> Result<LayoutResult, LayoutError> {
    model.validate()?;
    let n = model.functions.len();
    let mut seen = vec![false; n];
    if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
        return Err(LayoutError::BadOrder(n));
    }
    assert!(options.base_address.is_multiple_of(16), "base address must be 16-byte aligned");

    let mut per_func: Vec<Option<FunctionLayout>> =
        model.functions.iter().map(|f| layout_function(f, options).map(Some)).collect::<Result<_, _>>()?;

    let mut functions: Vec<Option<PlacedFunction>> = vec![None; n];
    let mut sf = SymbolFile {
        module_id: module_id_for(&model.module_name),
        files: model.files.iter().map(|f| FileRecord { filenum: f.filenum, path: f.path.clone() }).collect(),
        ..SymbolFile::default()
    };
    sf.files.sort_by_key(|f| f.filenum);
    let mut text = Vec::new();
    let mut pool_placements = Vec::new();
    let mut cursor = options.base_address;
    for &fi in order {
        let f = &model.functions[fi];
        let fl = per_func[fi].take().expect("each function placed once");
        let addr = align_up(cursor, f.alignment);
        text.resize((addr - options.base_address) as usize, 0);
        text.extend_from_slice(&fl.words);

        let a64 = addr as u64;
        sf.funcs.push(FuncRecord {
            multiple: false,
            address: a64,
            size: fl.size as u64,
            param_size: 0,
            name: f.name.clone(),
            lines: fl.lines.into_iter().map(|l| LineRecord { address: l.address + a64, ..l }).collect(),
        });
        sf.cfi_regions.push(CfiInitRecord {
            address: a64,
            size: fl.size as u64,
            init_rules: fl.init_rules,
            deltas: fl.deltas.into_iter().map(|d| CfiDelta { address: d.address + a64, rules: d.rules }).collect(),
        });

        let pools: Vec<PoolPlacement> = fl
            .pools
            .iter()
            .map(|(after, entries)| PoolPlacement { function: fi, after_block: *after, size: 4 * entries.len() as u32 })
            .collect();
        pool_placements.extend(pools.iter().cloned());
        functions[fi] = Some(PlacedFunction {
            index: fi,
            address: addr,
            size: fl.size,
            blocks: fl.blocks.into_iter().map(|b| PlacedBlock { address: b.address + addr, ..b }).collect(),
            pools,
            alloc_instrs: fl.alloc_instrs,
            access_instrs: fl.access_instrs,
        });
        cursor = addr + fl.size;
    }
    sf.funcs.sort_by_key(|f| f.address);
    sf.cfi_regions.sort_by_key(|c| c.address);

    Ok(LayoutResult {
        base_address: options.base_address,
        order: order.to_vec(),
        functions: functions.into_iter().map(|f| f.expect("placed")).collect(),
        symfile: sf,
        pool_placements,
        text,
    })
}
