//! Pixel-level prediction: upsampled patch probabilities, dense CRF
//! refinement and argmax label maps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::CategoryPartition;
use crate::dataio::{write_pgm, LabelMap, RgbImage, Sample};
use crate::error::{CpcError, Result};
use crate::model::{forward, FeatureConfig, FeatureProvider, ModelParams};
use crate::numerics::{bilinear_upsample, ChannelGrid, Matrix};

/// Per-pixel class distributions.
pub type PixelProbMap = ChannelGrid;

/// Per-pixel class indices.
pub type PseudoLabelMap = LabelMap;

const UNARY_CLAMP: f64 = 1e-12;

/// Largest pixel-pair count whose kernel is kept in memory (128 MiB).
const DENSE_KERNEL_LIMIT: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfConfig {
    pub iterations: usize,
    pub w_smooth: f64,
    /// Smoothness kernel bandwidth, pixels.
    pub theta_spatial: f64,
    pub w_appearance: f64,
    /// Appearance kernel color bandwidth on the `[0, 1]` channel scale.
    pub theta_color: f64,
    /// Appearance kernel spatial bandwidth, pixels.
    pub theta_app_spatial: f64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            w_smooth: 3.0,
            theta_spatial: 3.0,
            w_appearance: 10.0,
            theta_color: 0.1,
            theta_app_spatial: 8.0,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_smooth >= 0.0 && self.w_appearance >= 0.0) {
            return Err(CpcError::Config("crf weights must be >= 0".into()));
        }
        for (name, v) in [
            ("theta_spatial", self.theta_spatial),
            ("theta_color", self.theta_color),
            ("theta_app_spatial", self.theta_app_spatial),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CpcError::Config(format!("crf {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Pairwise kernel between two pixels given squared spatial distance and
    /// squared color distance.
    pub fn kernel(&self, d2_space: f64, d2_color: f64) -> f64 {
        let smooth = self.w_smooth * (-d2_space / (2.0 * self.theta_spatial.powi(2))).exp();
        let appearance = self.w_appearance
            * (-d2_space / (2.0 * self.theta_app_spatial.powi(2))
                - d2_color / (2.0 * self.theta_color.powi(2)))
            .exp();
        smooth + appearance
    }
}

/// Reshape `s × C` patch probabilities onto the patch grid, upsample to
/// `out_h × out_w` and renormalize each pixel.
pub fn probmap_from_patches(z: &Matrix, out_h: usize, out_w: usize) -> Result<PixelProbMap> {
    let grid = ChannelGrid::from_patch_matrix(z)?;
    let mut up = bilinear_upsample(&grid, out_h, out_w)?;
    for y in 0..out_h {
        for x in 0..out_w {
            let px = up.pixel_mut(y, x);
            let sum: f64 = px.iter().sum();
            if sum > 0.0 {
                for v in px.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }
    Ok(up)
}

/// Forward one sample and upsample its patch probabilities to
/// `upscale` times the image size.
pub fn predict_pixels(
    sample: &Sample,
    partition: &CategoryPartition,
    params: &ModelParams,
    cfg: &FeatureConfig,
    provider: &FeatureProvider,
    upscale: usize,
) -> Result<PixelProbMap> {
    if upscale == 0 {
        return Err(CpcError::InvalidArgument("upscale factor must be >= 1".into()));
    }
    let out = forward(sample, partition, params, cfg, provider)?;
    probmap_from_patches(
        &out.z,
        sample.image.height() * upscale,
        sample.image.width() * upscale,
    )
}

/// Bilinear resize of an image, used to match an upscaled probability map.
pub fn resize_image(image: &RgbImage, out_h: usize, out_w: usize) -> Result<RgbImage> {
    if image.height() == out_h && image.width() == out_w {
        return Ok(image.clone());
    }
    let grid = ChannelGrid::new(image.height(), image.width(), 3, image.as_slice().to_vec())?;
    let up = bilinear_upsample(&grid, out_h, out_w)?;
    RgbImage::new(out_h, out_w, up.as_slice().to_vec())
}

/// Mean-field inference in a fully connected pairwise model with Potts
/// compatibility. Unaries are `−ln p`; messages sum over every other pixel
/// exactly.
pub fn crf_refine(image: &RgbImage, probs: &PixelProbMap, crf: &CrfConfig) -> Result<PixelProbMap> {
    crf_refine_with_limit(image, probs, crf, DENSE_KERNEL_LIMIT)
}

fn crf_refine_with_limit(
    image: &RgbImage,
    probs: &PixelProbMap,
    crf: &CrfConfig,
    dense_limit: usize,
) -> Result<PixelProbMap> {
    crf.validate()?;
    let (h, w, c) = (probs.height(), probs.width(), probs.channels());
    if image.height() != h || image.width() != w {
        return Err(CpcError::Shape(format!(
            "image is {}x{}, probability map is {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    let unary: Vec<f64> = probs
        .as_slice()
        .iter()
        .map(|&p| -p.clamp(UNARY_CLAMP, 1.0).ln())
        .collect();
    let mut q = probs.clone();
    if crf.iterations == 0 || (crf.w_smooth == 0.0 && crf.w_appearance == 0.0) {
        return Ok(q);
    }
    let n = h * w;
    // Spatial factors depend only on the offset; index by |dy|·w + |dx|.
    let mut smooth_lut = vec![0.0; n];
    let mut app_lut = vec![0.0; n];
    for dy in 0..h {
        for dx in 0..w {
            let d2 = (dy * dy + dx * dx) as f64;
            smooth_lut[dy * w + dx] = crf.w_smooth * (-d2 / (2.0 * crf.theta_spatial.powi(2))).exp();
            app_lut[dy * w + dx] =
                crf.w_appearance * (-d2 / (2.0 * crf.theta_app_spatial.powi(2))).exp();
        }
    }
    let color_scale = 1.0 / (2.0 * crf.theta_color.powi(2));
    let pixels = image.as_slice();
    // Kernel values k_ij for one i; k_ii = 0.
    let kernel_row = |i: usize, row: &mut [f64]| {
        let (yi, xi) = (i / w, i % w);
        let ci = &pixels[3 * i..3 * i + 3];
        for yj in 0..h {
            let base = yi.abs_diff(yj) * w;
            for xj in 0..w {
                let j = yj * w + xj;
                let cj = &pixels[3 * j..3 * j + 3];
                let dc = (ci[0] - cj[0]).powi(2) + (ci[1] - cj[1]).powi(2) + (ci[2] - cj[2]).powi(2);
                let off = base + xi.abs_diff(xj);
                row[j] = smooth_lut[off] + app_lut[off] * (-dc * color_scale).exp();
            }
        }
        row[i] = 0.0;
    };
    let dense = (n * n <= dense_limit).then(|| {
        let mut k = vec![0.0; n * n];
        k.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| kernel_row(i, row));
        k
    });
    let update = |i: usize, row: &[f64], prev_t: &[f64], out: &mut [f64]| {
        let total = sum4(row);
        // Potts energy for label l: Σ_j k_ij (1 − Q_j(l)).
        let energy: Vec<f64> = (0..c)
            .map(|l| unary[c * i + l] + (total - dot4(row, &prev_t[l * n..(l + 1) * n])))
            .collect();
        let lo = energy.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut z = 0.0;
        for (o, e) in out.iter_mut().zip(&energy) {
            *o = (lo - e).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    };
    for _ in 0..crf.iterations {
        // Channel-major copy of Q so each message is a contiguous dot product.
        let mut prev_t = vec![0.0; n * c];
        for (j, px) in q.as_slice().chunks_exact(c).enumerate() {
            for (l, &v) in px.iter().enumerate() {
                prev_t[l * n + j] = v;
            }
        }
        let next = q.as_mut_slice();
        match &dense {
            Some(k) => next
                .par_chunks_mut(c)
                .enumerate()
                .for_each(|(i, out)| update(i, &k[i * n..(i + 1) * n], &prev_t, out)),
            None => next.par_chunks_mut(c).enumerate().for_each_init(
                || vec![0.0; n],
                |row, (i, out)| {
                    kernel_row(i, row);
                    update(i, row, &prev_t, out);
                },
            ),
        }
    }
    Ok(q)
}

/// Four-lane sum in a fixed order.
fn sum4(a: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.chunks_exact(4);
    let rest = chunks.remainder();
    for x in chunks {
        for k in 0..4 {
            acc[k] += x[k];
        }
    }
    rest.iter().fold((acc[0] + acc[1]) + (acc[2] + acc[3]), |s, v| s + v)
}

/// Four-lane dot product in a fixed order.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    ra.iter()
        .zip(rb)
        .fold((acc[0] + acc[1]) + (acc[2] + acc[3]), |s, (x, y)| s + x * y)
}

/// Per-pixel argmax; ties resolve to the lowest class index.
pub fn argmax_labels(probs: &PixelProbMap) -> Result<PseudoLabelMap> {
    if probs.channels() > 256 {
        return Err(CpcError::InvalidArgument("more than 256 classes".into()));
    }
    let mut out = LabelMap::filled(probs.height(), probs.width(), 0);
    for y in 0..probs.height() {
        for x in 0..probs.width() {
            let px = probs.pixel(y, x);
            let mut best = 0;
            for (l, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = l;
                }
            }
            out.set(y, x, best as u8);
        }
    }
    Ok(out)
}

/// Write a mask as PGM plus a JSON palette mapping class index to name.
pub fn write_mask(mask: &PseudoLabelMap, class_names: &[String], path: &Path) -> Result<()> {
    write_pgm(path, mask)?;
    let palette: BTreeMap<usize, &str> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (i, n.as_str()))
        .collect();
    let json = serde_json::to_string_pretty(&palette).expect("palette serializes");
    let side = path.with_extension("palette.json");
    fs::write(&side, json).map_err(|e| CpcError::io(&side, e))
}
