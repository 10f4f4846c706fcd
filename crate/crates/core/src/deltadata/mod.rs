//! Δdata: seeds, parameters and a patch that turn the replicated symbol
//! file into the exact diversified one, packed into an optionally
//! authenticated container.
//!
//! Container layout:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `DBPD` |
//! | 1 | format version |
//! | 1 | flags, bit 0 = authenticated |
//! | 4 | compressed payload length, little-endian |
//! | n | DEFLATE payload |
//! | 32 | HMAC-SHA-256 over everything before it, when authenticated |
//!
//! The decompressed payload holds the three seeds (u64 LE each), the NOP
//! probability as numerator and denominator (u32 LE each), one option-flag
//! byte, and the patch text.

mod image;
mod patch;

pub use image::{embed, extract, Image, ImageError, DELTA_SECTION};
pub use patch::{apply, apply_text, diff, diff_text, Patch, PatchError, PatchOp};

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use hmac::{Hmac, Mac};
use sha2::Sha256;

use crate::diversify::SeedTuple;
use crate::progmodel::{Ratio, Schemes};
use crate::replicate::ReplicationOptions;

pub const MAGIC: &[u8; 4] = b"DBPD";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const TAG_LEN: usize = 32;
const FLAG_AUTH: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DeltaParams {
    pub nop_probability: Ratio,
    pub default_padding: bool,
    pub sp_fp_opt: bool,
    pub schemes: Schemes,
}

impl DeltaParams {
    pub fn replication(&self) -> ReplicationOptions {
        ReplicationOptions { nop_probability: self.nop_probability, schemes: self.schemes }
    }

    fn flags(&self) -> u8 {
        [self.default_padding, self.sp_fp_opt, self.schemes.padding, self.schemes.nops, self.schemes.shuffle]
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | (u8::from(b) << i))
    }

    fn from_flags(nop_probability: Ratio, f: u8) -> Self {
        let bit = |i: u8| f & (1 << i) != 0;
        DeltaParams {
            nop_probability,
            default_padding: bit(0),
            sp_fp_opt: bit(1),
            schemes: Schemes { padding: bit(2), nops: bit(3), shuffle: bit(4) },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeltaData {
    pub seeds: SeedTuple,
    pub params: DeltaParams,
    pub patch: Patch,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UnpackError {
    #[error("not a Δdata container")]
    BadMagic,
    #[error("unsupported Δdata version {0}")]
    BadVersion(u8),
    #[error("Δdata length mismatch: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },
    #[error("Δdata authentication failed")]
    Auth,
    #[error("Δdata is authenticated but no key was given")]
    KeyRequired,
    #[error("corrupt Δdata payload: {0}")]
    Payload(String),
}

fn mac(key: &[u8], data: &[u8]) -> Hmac<Sha256> {
    let mut m = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    m.update(data);
    m
}

fn payload(dd: &DeltaData) -> Vec<u8> {
    let mut p = Vec::new();
    for s in [dd.seeds.pad_seed, dd.seeds.nop_seed, dd.seeds.shuffle_seed] {
        p.extend_from_slice(&s.to_le_bytes());
    }
    p.extend_from_slice(&dd.params.nop_probability.num.to_le_bytes());
    p.extend_from_slice(&dd.params.nop_probability.den.to_le_bytes());
    p.push(dd.params.flags());
    p.extend_from_slice(dd.patch.to_text().as_bytes());
    p
}

pub fn pack(dd: &DeltaData, key: Option<&[u8]>) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(&payload(dd)).expect("writing to a Vec cannot fail");
    let compressed = enc.finish().expect("writing to a Vec cannot fail");

    let mut out = Vec::with_capacity(HEADER_LEN + compressed.len() + TAG_LEN);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(if key.is_some() { FLAG_AUTH } else { 0 });
    out.extend_from_slice(&(compressed.len() as u32).to_le_bytes());
    out.extend_from_slice(&compressed);
    if let Some(k) = key {
        let tag = mac(k, &out).finalize().into_bytes();
        out.extend_from_slice(&tag);
    }
    out
}

/// Inverse of `pack`. An authenticated container requires the key, and a
/// key rejects an unauthenticated container.
pub fn unpack(bytes: &[u8], key: Option<&[u8]>) -> Result<DeltaData, UnpackError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(UnpackError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(UnpackError::Length { expected: HEADER_LEN, actual: bytes.len() });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(UnpackError::BadVersion(bytes[4]));
    }
    let authed = bytes[5] & FLAG_AUTH != 0;
    if bytes[5] & !FLAG_AUTH != 0 {
        return Err(UnpackError::Payload(format!("unknown flags {:#x}", bytes[5])));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let expected = HEADER_LEN + len + if authed { TAG_LEN } else { 0 };
    if bytes.len() != expected {
        return Err(UnpackError::Length { expected, actual: bytes.len() });
    }
    let body_end = HEADER_LEN + len;
    match (authed, key) {
        (true, Some(k)) => {
            mac(k, &bytes[..body_end]).verify_slice(&bytes[body_end..]).map_err(|_| UnpackError::Auth)?
        }
        (true, None) => return Err(UnpackError::KeyRequired),
        (false, Some(_)) => return Err(UnpackError::Auth),
        (false, None) => {}
    }

    let mut raw = Vec::new();
    DeflateDecoder::new(&bytes[HEADER_LEN..body_end])
        .read_to_end(&mut raw)
        .map_err(|e| UnpackError::Payload(e.to_string()))?;
    if raw.len() < 33 {
        return Err(UnpackError::Payload("truncated parameters".into()));
    }
    let u64_at = |i: usize| u64::from_le_bytes(raw[i..i + 8].try_into().expect("8 bytes"));
    let u32_at = |i: usize| u32::from_le_bytes(raw[i..i + 4].try_into().expect("4 bytes"));
    let seeds = SeedTuple { pad_seed: u64_at(0), nop_seed: u64_at(8), shuffle_seed: u64_at(16) };
    let ratio =
        Ratio::new(u32_at(24), u32_at(28)).ok_or_else(|| UnpackError::Payload("invalid NOP probability".into()))?;
    let params = DeltaParams::from_flags(ratio, raw[32]);
    let text = std::str::from_utf8(&raw[33..]).map_err(|e| UnpackError::Payload(e.to_string()))?;
    let patch = Patch::parse(text).map_err(|e| UnpackError::Payload(e.to_string()))?;
    Ok(DeltaData { seeds, params, patch })
}
