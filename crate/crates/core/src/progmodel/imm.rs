//! ARM data-processing immediates: an 8-bit value rotated right by an even
//! amount.

/// True iff `v == ror(b, 2r)` for some 8-bit `b` and `r` in `0..16`.
pub fn arm_imm_encodable(v: u32) -> bool {
    (0..16).any(|r| v.rotate_left(2 * r) <= 0xff)
}

/// Largest encodable immediate `<= x`.
pub fn largest_encodable_le(x: u32) -> u32 {
    if x <= 0xff {
        return x;
    }
    // Values below 2^24 cannot use a wrapping rotation with bits above the
    // window, so an 8-bit window at an even shift covers every candidate.
    if x < (1 << 24) {
        return (0..=16).step_by(2).map(|s| ((x >> s).min(0xff)) << s).max().unwrap_or(0);
    }
    let mut best = 0;
    for r in 0..16u32 {
        for b in 0..=0xffu32 {
            let v = b.rotate_right(2 * r);
            if v <= x && v > best {
                best = v;
            }
        }
    }
    best
}

/// Number of `sub sp, sp, #imm` instructions needed to allocate `total` bytes,
/// splitting greedily into encodable chunks.
pub fn stack_alloc_instrs(total: u32) -> u32 {
    let mut remaining = total;
    let mut count = 0;
    while remaining > 0 {
        remaining -= largest_encodable_le(remaining);
        count += 1;
    }
    count
}

/// Greedy chunks, largest first.
pub fn stack_alloc_chunks(total: u32) -> Vec<u32> {
    let mut remaining = total;
    let mut chunks = Vec::new();
    while remaining > 0 {
        let c = largest_encodable_le(remaining);
        chunks.push(c);
        remaining -= c;
    }
    chunks
}

/// Largest immediate offset of a single LD/ST.
pub const LDST_MAX_OFFSET: u32 = 4095;
