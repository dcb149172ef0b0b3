//! Patch-feature providers standing in for a pretrained vision backbone.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! magic   "CPCF"
//! version u32 (= 1)
//! s       u32   patches per record
//! e       u32   features per patch
//! n       u32   record count
//! index   n × { id_len u32, id utf-8 bytes, offset u64 }   absolute byte offset
//! data    n × s·e f32, row-major
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FeatureConfig;
use crate::dataio::RgbImage;
use crate::error::{CpcError, Result};
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"CPCF";
pub const FEATURE_VERSION: u32 = 1;

const STANDARDIZE_EPS: f64 = 1e-8;

/// `s × e` patch tokens of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures(pub Matrix);

impl PatchFeatures {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub enum FeatureProvider {
    /// Flattened `d×d×3` patches times a seed-derived projection, by
    /// default standardized per image.
    RandomProjection {
        seed: u64,
        projection: Matrix,
        standardize: bool,
    },
    /// Precomputed features keyed by image id.
    File(Arc<FeatureFile>),
}

impl FeatureProvider {
    pub fn random_projection(seed: u64, cfg: &FeatureConfig) -> Self {
        let rows = cfg.patch_side * cfg.patch_side * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (rows as f64).sqrt();
        let projection = Matrix::from_fn(rows, cfg.feature_dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        FeatureProvider::RandomProjection {
            seed,
            projection,
            standardize: true,
        }
    }

    /// Same projection without per-image standardization.
    pub fn random_projection_raw(seed: u64, cfg: &FeatureConfig) -> Self {
        match Self::random_projection(seed, cfg) {
            FeatureProvider::RandomProjection { seed, projection, .. } => FeatureProvider::RandomProjection {
                seed,
                projection,
                standardize: false,
            },
            FeatureProvider::File(_) => unreachable!(),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(FeatureProvider::File(Arc::new(FeatureFile::read(path)?)))
    }
}

/// Zero mean, unit variance per feature column.
pub fn standardize_columns(m: &mut Matrix) {
    let rows = m.rows() as f64;
    for c in 0..m.cols() {
        let mean = (0..m.rows()).map(|r| m.get(r, c)).sum::<f64>() / rows;
        let var = (0..m.rows()).map(|r| (m.get(r, c) - mean).powi(2)).sum::<f64>() / rows;
        let inv = 1.0 / (var + STANDARDIZE_EPS).sqrt();
        for r in 0..m.rows() {
            let v = m.get(r, c);
            m.set(r, c, (v - mean) * inv);
        }
    }
}

/// Flatten every `d×d` patch (row-major patches, row-major pixels, RGB).
pub fn flatten_patches(image: &RgbImage, cfg: &FeatureConfig) -> Result<Matrix> {
    let n = cfg.image_side;
    if image.height() != n || image.width() != n {
        return Err(CpcError::Shape(format!(
            "image is {}x{}, config expects {n}x{n}",
            image.height(),
            image.width()
        )));
    }
    let d = cfg.patch_side;
    let g = cfg.grid_side();
    let mut out = Matrix::zeros(g * g, d * d * 3);
    for py in 0..g {
        for px in 0..g {
            let row = out.row_mut(py * g + px);
            let mut k = 0;
            for y in 0..d {
                for x in 0..d {
                    row[k..k + 3].copy_from_slice(image.pixel(py * d + y, px * d + x));
                    k += 3;
                }
            }
        }
    }
    Ok(out)
}

/// Patch tokens `F_v` of one image.
pub fn embed_patches(
    image: &RgbImage,
    image_id: &str,
    cfg: &FeatureConfig,
    provider: &FeatureProvider,
) -> Result<PatchFeatures> {
    match provider {
        FeatureProvider::RandomProjection {
            projection,
            standardize,
            ..
        } => {
            if projection.rows() != cfg.patch_side * cfg.patch_side * 3
                || projection.cols() != cfg.feature_dim
            {
                return Err(CpcError::Shape("projection does not match the feature config".into()));
            }
            let mut f = flatten_patches(image, cfg)?.matmul(projection)?;
            if *standardize {
                standardize_columns(&mut f);
            }
            Ok(PatchFeatures(f))
        }
        FeatureProvider::File(file) => {
            if image.height() != cfg.image_side || image.width() != cfg.image_side {
                return Err(CpcError::Shape(format!(
                    "image is {}x{}, config expects {n}x{n}",
                    image.height(),
                    image.width(),
                    n = cfg.image_side
                )));
            }
            if file.patches != cfg.patch_count() || file.features != cfg.feature_dim {
                return Err(CpcError::Shape(format!(
                    "feature file holds {}x{} records, config expects {}x{}",
                    file.patches,
                    file.features,
                    cfg.patch_count(),
                    cfg.feature_dim
                )));
            }
            file.get(image_id).cloned().map(PatchFeatures).ok_or_else(|| {
                CpcError::InvalidArgument(format!("no feature record for image `{image_id}`"))
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub patches: usize,
    pub features: usize,
    records: HashMap<String, Matrix>,
}

impl FeatureFile {
    pub fn new(patches: usize, features: usize) -> Self {
        Self {
            patches,
            features,
            records: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, m: Matrix) -> Result<()> {
        if m.rows() != self.patches || m.cols() != self.features {
            return Err(CpcError::Shape(format!(
                "record is {}x{}, file holds {}x{}",
                m.rows(),
                m.cols(),
                self.patches,
                self.features
            )));
        }
        self.records.insert(id.into(), m);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Matrix> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records are written in id order; values are narrowed to `f32`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut ids: Vec<&String> = self.records.keys().collect();
        ids.sort();
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [FEATURE_VERSION, self.patches as u32, self.features as u32, ids.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let index_len: usize = ids.iter().map(|id| 4 + id.len() + 8).sum();
        let record_bytes = self.patches * self.features * 4;
        let data_start = out.len() + index_len;
        for (i, id) in ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&((data_start + i * record_bytes) as u64).to_le_bytes());
        }
        for id in &ids {
            for &v in self.records[*id].as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| CpcError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CpcError::io(path, e))?;
        let bad = |m: &str| CpcError::format(path, m.to_string());
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != FEATURE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != FEATURE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let patches = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let features = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let count = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut file = FeatureFile::new(patches, features);
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32().ok_or_else(|| bad("truncated index"))? as usize;
            let id = std::str::from_utf8(cur.take(len).ok_or_else(|| bad("truncated index"))?)
                .map_err(|_| bad("image id is not utf-8"))?
                .to_string();
            let offset = cur.u64().ok_or_else(|| bad("truncated index"))? as usize;
            index.push((id, offset));
        }
        let record_bytes = patches * features * 4;
        for (id, offset) in index {
            let chunk = bytes
                .get(offset..offset + record_bytes)
                .ok_or_else(|| bad(&format!("record `{id}` runs past the end of the file")))?;
            let data: Vec<f64> = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let m = Matrix::new(patches, features, data).map_err(|e| bad(&e.to_string()))?;
            file.records.insert(id, m);
        }
        Ok(file)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
