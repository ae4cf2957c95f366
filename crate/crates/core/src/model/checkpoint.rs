//! Flat binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `RFLM`                           |
//! | 4      | 4    | format version (`1`)                   |
//! | 8      | 1    | kind: `0` linear, `1` mlp              |
//! | 9      | 1    | output bias flag                       |
//! | 10     | 4    | `d_in`                                 |
//! | 14     | 4    | `d_out`                                |
//! | 18     | 4    | hidden width (`0` for linear)          |
//! | 22     | 8    | init seed                              |
//! | 30     | 8    | parameter count `P`                    |
//! | 38     | 8·P  | parameters as `f64`                    |

use std::path::Path;

use ndarray::Array1;

use super::{LocalModel, ModelKind};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RFLM";
const VERSION: u32 = 1;
const HEADER: usize = 38;

pub fn encode(model: &LocalModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let (kind, hidden) = match model.kind() {
        ModelKind::Linear => (0u8, 0u32),
        ModelKind::Mlp { hidden } => (1u8, hidden as u32),
    };
    out.push(kind);
    out.push(model.has_bias() as u8);
    out.extend_from_slice(&(model.d_in() as u32).to_le_bytes());
    out.extend_from_slice(&(model.d_out() as u32).to_le_bytes());
    out.extend_from_slice(&hidden.to_le_bytes());
    out.extend_from_slice(&model.seed().to_le_bytes());
    out.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for v in model.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<LocalModel> {
    let bad = |m: &str| Error::Schema(format!("checkpoint: {m}"));
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(bad("missing RFLM header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(bad("unsupported version"));
    }
    let kind = match bytes[8] {
        0 => ModelKind::Linear,
        1 => ModelKind::Mlp {
            hidden: u32_at(18) as usize,
        },
        k => return Err(bad(&format!("unknown model kind {k}"))),
    };
    let bias = bytes[9] != 0;
    let (d_in, d_out) = (u32_at(10) as usize, u32_at(14) as usize);
    let seed = u64_at(22);
    let n = u64_at(30) as usize;
    if bytes.len() != HEADER + 8 * n {
        return Err(bad("truncated parameter block"));
    }
    let params: Array1<f64> = (0..n)
        .map(|k| f64::from_le_bytes(bytes[HEADER + 8 * k..HEADER + 8 * k + 8].try_into().unwrap()))
        .collect();
    LocalModel::from_params(kind, d_in, d_out, bias, seed, params)
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &LocalModel) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<LocalModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
