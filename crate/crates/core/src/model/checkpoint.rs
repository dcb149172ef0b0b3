//! Binary checkpoints.
//!
//! ```text
//! magic   "CPCM"
//! version u32 (= 1)
//! L H e C u32 each
//! tensors f64, row-major, in ModelParams flattened order:
//!         G, lr.wx, lr.wh, lr.b, rl.*, tb.*, bt.*, W
//! ```
//!
//! All integers and reals are little-endian.

use std::fs;
use std::path::Path;

use super::{FeatureConfig, ModelParams};
use crate::error::{CpcError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPCM";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4;

/// Header dimensions of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointDims {
    pub clusters: usize,
    pub cluster_dim: usize,
    pub feature_dim: usize,
    pub class_count: usize,
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let token = params.w.rows();
    let dims = [
        params.g.rows(),
        params.g.cols(),
        token - params.g.cols(),
        params.w.cols(),
    ];
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in params.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(CheckpointDims, ModelParams)> {
    let bad = |m: String| CpcError::format(path, m);
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated checkpoint header".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", word(0))));
    }
    let dims = CheckpointDims {
        clusters: word(1) as usize,
        cluster_dim: word(2) as usize,
        feature_dim: word(3) as usize,
        class_count: word(4) as usize,
    };
    if !(dims.feature_dim + dims.cluster_dim).is_multiple_of(2) {
        return Err(bad("token width e+H is odd".into()));
    }
    let cfg = FeatureConfig {
        feature_dim: dims.feature_dim,
        cluster_dim: dims.cluster_dim,
        class_count: dims.class_count,
        ..FeatureConfig::default()
    };
    let mut params = ModelParams::zeros(&cfg, dims.clusters);
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * params.param_count() {
        return Err(bad(format!(
            "expected {} parameter bytes, found {}",
            8 * params.param_count(),
            body.len()
        )));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter".into()));
    }
    params.set_flat(&flat)?;
    Ok((dims, params))
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| CpcError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointDims, ModelParams)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CpcError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
