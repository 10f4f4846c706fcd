//! Server-side replication: predict the diversified symbol file from the
//! default one, the opportunity log and the seeds.
//!
//! Only direct effects are replayed: the size of the stack allocation
//! groups and the CFA constants that encode the frame size, NOP insertion,
//! and function order. Changed access costs, moved literal pools and
//! phantom instructions are left for the patch. No record is ever created
//! or removed.

use crate::diversify::{nop_gaps, pad_amount, shuffle_order, LoggedBlock, LoggedFunction, OpportunityLog, SeedTuple};
use crate::progmodel::{stack_alloc_instrs, Ratio, Schemes};
use crate::symfile::{CfiInitRecord, FuncRecord, PostfixExpr, RuleMap, SymbolFile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ReplicationOptions {
    pub nop_probability: Ratio,
    pub schemes: Schemes,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplicateError {
    #[error("log does not match symbol file: {0}")]
    Mismatch(String),
}

/// Bytes added (or removed, when negative) at function offset `at`.
#[derive(Clone, Copy, Debug)]
struct Insertion {
    at: u64,
    bytes: i64,
    /// Grow the record ending at `at` rather than the one starting there.
    attach_prev: bool,
    /// Whether a CFI delta located exactly at `at` moves.
    moves_cfi_at: bool,
}

fn shifted(addr: u64, by: i64) -> u64 {
    addr.wrapping_add(by as u64)
}

fn insertions_for(
    lf: &LoggedFunction,
    pad_new: u32,
    seeds: &SeedTuple,
    options: &ReplicationOptions,
) -> Vec<Insertion> {
    let mut out = Vec::new();
    let push = u64::from(lf.saved > 0);
    let fp = u64::from(lf.has_fp);
    let n_old = stack_alloc_instrs(lf.local_size + lf.padding) as u64;
    let n_new = stack_alloc_instrs(lf.local_size + pad_new) as u64;
    let offsets = lf.block_offsets();
    let d = 4 * (n_new as i64 - n_old as i64);
    if d != 0 {
        let at = 4 * (push + fp + n_old);
        out.push(Insertion { at, bytes: d, attach_prev: at > 0, moves_cfi_at: n_old > 0 });
        for (k, b) in lf.blocks.iter().enumerate() {
            if let LoggedBlock::Code { total, epilogue: true, .. } = b {
                let at = offsets[k] as u64 + 4 * (*total as u64 - push);
                out.push(Insertion { at, bytes: d, attach_prev: true, moves_cfi_at: true });
            }
        }
    }
    if options.schemes.nops {
        let id = lf.identifier();
        for (k, b) in lf.blocks.iter().enumerate() {
            if let LoggedBlock::Code { body, .. } = b {
                let lead = if k == 0 { push + fp + n_old } else { 0 };
                let body_start = offsets[k] as u64 + 4 * lead;
                for g in nop_gaps(&id, k, *body, seeds.nop_seed, options.nop_probability) {
                    out.push(Insertion {
                        at: body_start + 4 * g as u64,
                        bytes: 4,
                        attach_prev: true,
                        moves_cfi_at: true,
                    });
                }
            }
        }
    }
    out
}

fn rescale_cfa(rules: &mut RuleMap, from: i64, to: i64) {
    if let Some(cfa) = rules.get_mut(".cfa") {
        if cfa.as_reg_plus() == Some(("sp", from)) {
            *cfa = PostfixExpr::reg_plus("sp", to);
        }
    }
}

/// Apply in-function insertions to one FUNC and its CFI region, both at
/// their default addresses.
fn replay_function(func: &mut FuncRecord, cfi: &mut CfiInitRecord, ins: &[Insertion]) {
    let base = func.address;
    let total: i64 = ins.iter().map(|i| i.bytes).sum();
    for l in &mut func.lines {
        let s = l.address - base;
        let e = s + l.size;
        let mut shift = 0i64;
        let mut grow = 0i64;
        for i in ins {
            let (shifts, grows) =
                if i.attach_prev { (i.at <= s, s < i.at && i.at <= e) } else { (i.at < s, s <= i.at && i.at < e) };
            if shifts {
                shift += i.bytes;
            } else if grows {
                grow += i.bytes;
            }
        }
        l.address = shifted(l.address, shift);
        l.size = shifted(l.size, grow);
    }
    func.size = shifted(func.size, total);
    cfi.size = shifted(cfi.size, total);
    for d in &mut cfi.deltas {
        let off = d.address - base;
        let shift: i64 = ins.iter().filter(|i| i.at < off || (i.at == off && i.moves_cfi_at)).map(|i| i.bytes).sum();
        d.address = shifted(d.address, shift);
    }
}

fn move_function(func: &mut FuncRecord, cfi: &mut CfiInitRecord, to: u64) {
    let by = to as i64 - func.address as i64;
    func.address = to;
    for l in &mut func.lines {
        l.address = shifted(l.address, by);
    }
    cfi.address = to;
    for d in &mut cfi.deltas {
        d.address = shifted(d.address, by);
    }
}

pub fn replicate(
    default_sf: &SymbolFile,
    log: &OpportunityLog,
    seeds: &SeedTuple,
    options: &ReplicationOptions,
) -> Result<SymbolFile, ReplicateError> {
    let mismatch = |m: String| ReplicateError::Mismatch(m);
    if default_sf.funcs.len() != log.functions.len() {
        return Err(mismatch(format!(
            "{} FUNC records for {} logged functions",
            default_sf.funcs.len(),
            log.functions.len()
        )));
    }
    let mut out = default_sf.clone();
    let mut cfi_regions = std::mem::take(&mut out.cfi_regions);
    let mut cfis: Vec<CfiInitRecord> = Vec::with_capacity(out.funcs.len());
    for (f, lf) in out.funcs.iter().zip(&log.functions) {
        if f.name != lf.name || f.size != lf.size() as u64 {
            return Err(mismatch(format!("FUNC `{}` does not match logged `{}`", f.name, lf.name)));
        }
        let k = cfi_regions
            .iter()
            .position(|c| c.address == f.address && c.size == f.size)
            .ok_or_else(|| mismatch(format!("no CFI region for `{}`", f.name)))?;
        cfis.push(cfi_regions.swap_remove(k));
    }
    if !cfi_regions.is_empty() {
        return Err(mismatch("CFI regions without a function".into()));
    }

    for ((func, cfi), lf) in out.funcs.iter_mut().zip(cfis.iter_mut()).zip(&log.functions) {
        let pad_new =
            if options.schemes.padding { pad_amount(&lf.identifier(), seeds.pad_seed, false) } else { lf.padding };
        let ins = insertions_for(lf, pad_new, seeds, options);
        replay_function(func, cfi, &ins);
        let t_old = lf.local_size + lf.padding;
        if !lf.has_fp && t_old > 0 && pad_new != lf.padding {
            let p = lf.push_bytes() as i64;
            let (from, to) = (p + t_old as i64, p + (lf.local_size + pad_new) as i64);
            rescale_cfa(&mut cfi.init_rules, from, to);
            for d in &mut cfi.deltas {
                rescale_cfa(&mut d.rules, from, to);
            }
        }
    }

    let n = out.funcs.len();
    let order = if options.schemes.shuffle { shuffle_order(n, seeds.shuffle_seed) } else { (0..n).collect() };
    let mut cursor = out.funcs.iter().map(|f| f.address).min().unwrap_or(0);
    for &fi in &order {
        let a = log.functions[fi].alignment as u64;
        let addr = cursor.div_ceil(a) * a;
        move_function(&mut out.funcs[fi], &mut cfis[fi], addr);
        cursor = addr + out.funcs[fi].size;
    }
    out.funcs.sort_by_key(|f| f.address);
    cfis.sort_by_key(|c| c.address);
    out.cfi_regions = cfis;
    Ok(out)
}
