//! On-disk form of a single (layer, head) mask.
//!
//! ```text
//! b"ABMK" | u32 LE header length | JSON header | packed bits (LSB first, row-major)
//! ```

use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ABMK";
const MAX_HEADER: usize = 1 << 16;
const MAX_CELLS: usize = 1 << 28;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskHeader {
    pub shape: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

/// Encodes one `n × n` mask with its replay header.
pub fn encode_mask_file(mask: &Mask, seed: u64) -> Vec<u8> {
    let header = MaskHeader {
        shape: mask.shape().to_vec(),
        k: mask.k(),
        seed,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + mask.keep().len() / 8 + 1);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut byte = 0u8;
    for (i, &b) in mask.keep().iter().enumerate() {
        if b {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            out.push(byte);
            byte = 0;
        }
    }
    if !mask.keep().len().is_multiple_of(8) {
        out.push(byte);
    }
    out
}

/// Decodes a mask file. Malformed input yields [`Error::Format`].
pub fn decode_mask_file(bytes: &[u8]) -> Result<(MaskHeader, Mask)> {
    let bad = |msg: &str| Error::Format(format!("mask file: {msg}"));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if hlen > MAX_HEADER || bytes.len() < 8 + hlen {
        return Err(bad("truncated header"));
    }
    let header: MaskHeader = serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| bad(&e.to_string()))?;
    let cells = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c <= MAX_CELLS)
        .ok_or_else(|| bad("shape too large"))?;
    if header.shape.contains(&0) {
        return Err(bad("zero extent"));
    }
    let body = &bytes[8 + hlen..];
    if body.len() != cells.div_ceil(8) {
        return Err(bad("bit payload length does not match shape"));
    }
    let keep: Vec<bool> = (0..cells).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect();
    let mask = Mask::new(header.shape.clone(), keep, header.k).map_err(|e| bad(&e.to_string()))?;
    Ok((header, mask))
}
