//! Diversification decision processes (stack padding, NOP insertion,
//! function shuffling) and the default/diversified builds.
//!
//! Every process that draws per-function randomness reseeds from a hash of
//! the function identifier, so a desynchronized decision in one function
//! cannot leak into another.

mod log;

pub use log::{DecisionLog, LogError, LoggedBlock, LoggedFunction, OpportunityLog};

use crate::progmodel::{layout, LayoutError, LayoutOptions, LayoutResult, ProgramModel, Ratio, Schemes};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// The SplitMix64 output (finalizer) function.
pub fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SplitMix64.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        splitmix64_mix(self.state)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SeedTuple {
    pub pad_seed: u64,
    pub nop_seed: u64,
    pub shuffle_seed: u64,
}

impl SeedTuple {
    /// Derive a tuple from one 64-bit value; used by tests and metrics.
    pub fn from_master(master: u64) -> Self {
        let mut p = Prng::new(master);
        SeedTuple { pad_seed: p.next_u64(), nop_seed: p.next_u64(), shuffle_seed: p.next_u64() }
    }
}

pub fn function_reseed(identifier: &str, scheme_seed: u64) -> u64 {
    splitmix64_mix(fnv1a64(identifier.as_bytes()) ^ scheme_seed)
}

/// Stack padding for one function: 8 in default mode, otherwise a multiple
/// of 8 in `8..=256` that depends only on the identifier and seed.
pub fn pad_amount(identifier: &str, pad_seed: u64, default_mode: bool) -> u32 {
    if default_mode {
        return 8;
    }
    8 * (1 + (function_reseed(identifier, pad_seed) % 32) as u32)
}

/// Gaps of a block with `n` original instructions that receive a NOP.
pub fn nop_gaps(identifier: &str, block_index: usize, n: u32, nop_seed: u64, p: Ratio) -> Vec<u32> {
    if p.is_zero() || n < 2 {
        return Vec::new();
    }
    let mut rng = Prng::new(function_reseed(&format!("{identifier}#{block_index}"), nop_seed));
    (1..n).filter(|_| p.hits(rng.next_u64())).collect()
}

/// Insert NOPs into every code block. A NOP takes the source line of the
/// instruction before it.
pub fn insert_nops(model: &ProgramModel, nop_seed: u64, probability: Ratio) -> ProgramModel {
    let mut out = model.clone();
    for f in &mut out.functions {
        let id = f.identifier();
        for (k, b) in f.blocks.iter_mut().enumerate() {
            if !b.is_code() {
                continue;
            }
            let n = b.size - b.nops.len() as u32;
            for g in nop_gaps(&id, k, n, nop_seed, probability) {
                let Err(pos) = b.nops.binary_search(&g) else { continue };
                let prev = b.body_index(g - 1);
                let mut start = 0;
                for s in &mut b.spans {
                    if prev < start + s.count {
                        s.count += 1;
                        break;
                    }
                    start += s.count;
                }
                b.nops.insert(pos, g);
                b.size += 1;
            }
        }
    }
    out
}

/// Fisher–Yates over `0..n`; `perm[k]` is the function placed `k`-th.
pub fn shuffle_order(n: usize, shuffle_seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = Prng::new(shuffle_seed);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }
    perm
}

fn default_pad(options: &LayoutOptions) -> u32 {
    if options.default_padding {
        8
    } else {
        0
    }
}

/// Append one phantom instruction to a random code block of a `rate`
/// fraction of functions. Returns the affected block per function.
pub fn inject_desync(model: &mut ProgramModel, seed: u64, rate: Ratio) -> Vec<Option<usize>> {
    model
        .functions
        .iter_mut()
        .map(|f| {
            if rate.is_zero() {
                return None;
            }
            let mut rng = Prng::new(function_reseed(&format!("{}#desync", f.identifier()), seed));
            if !rate.hits(rng.next_u64()) {
                return None;
            }
            let code: Vec<usize> = (0..f.blocks.len()).filter(|&k| f.blocks[k].is_code()).collect();
            let k = code[(rng.next_u64() % code.len() as u64) as usize];
            let b = &mut f.blocks[k];
            if let Some(s) = b.spans.last_mut() {
                s.count += 1;
            }
            b.size += 1;
            Some(k)
        })
        .collect()
}

/// A laid-out build: the model as handed to the layout engine and its
/// result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Build {
    pub model: ProgramModel,
    pub layout: LayoutResult,
}

pub fn build_default(model: &ProgramModel, options: &LayoutOptions) -> Result<(Build, OpportunityLog), LayoutError> {
    let mut m = model.clone();
    let pad = default_pad(options);
    for f in &mut m.functions {
        f.frame.padding = pad;
    }
    let order: Vec<usize> = (0..m.functions.len()).collect();
    let lr = layout(&m, &order, options)?;
    let log = OpportunityLog::from_build(&m, &lr, options);
    Ok((Build { model: m, layout: lr }, log))
}

pub fn build_diversified(
    model: &ProgramModel,
    seeds: &SeedTuple,
    options: &LayoutOptions,
) -> Result<(Build, DecisionLog), LayoutError> {
    let mut m = model.clone();
    let Schemes { padding, nops, shuffle } = options.schemes;
    for f in &mut m.functions {
        f.frame.padding =
            if padding { pad_amount(&f.identifier(), seeds.pad_seed, false) } else { default_pad(options) };
    }
    let desync = inject_desync(&mut m, seeds.nop_seed, options.desync_rate);
    if nops {
        m = insert_nops(&m, seeds.nop_seed, options.nop_probability);
    }
    let order =
        if shuffle { shuffle_order(m.functions.len(), seeds.shuffle_seed) } else { (0..m.functions.len()).collect() };
    let lr = layout(&m, &order, options)?;
    let mut log = OpportunityLog::from_build(&m, &lr, options);
    for (f, d) in log.functions.iter_mut().zip(desync) {
        f.desync = d;
    }
    let decisions = DecisionLog { log, order };
    Ok((Build { model: m, layout: lr }, decisions))
}
