//! Dense row-major kernels and the elementary differentiable pieces shared by
//! the model, the losses and inference, plus the central-difference gradient
//! checker every hand-written adjoint is validated against.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CpcError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(CpcError::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(CpcError::NonFinite(format!("matrix entry {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CpcError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(CpcError::Shape(format!(
                "matmul {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(CpcError::Shape(format!(
                "t_matmul {}x{}ᵀ · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(other.row(r)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(CpcError::Shape(format!(
                "matmul_t {}x{} · {}x{}ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |r, c| {
            dot(self.row(r), other.row(c))
        }))
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Row-wise softmax.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(CpcError::NonFinite("softmax input".into()));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        softmax_into(m.row(r), out.row_mut(r));
    }
    Ok(out)
}

/// Cosine of the angle between `a` and `b`. Zero-norm inputs are rejected.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CpcError::Shape(format!(
            "cosine similarity of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(CpcError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity mapped from `[-1, 1]` onto `[0, 1]`.
pub fn normalized_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok((1.0 + cosine_similarity(a, b)?) / 2.0)
}

/// Gradients of [`normalized_similarity`] with respect to both arguments.
pub fn normalized_similarity_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(CpcError::ZeroNorm);
    }
    let s = dot(a, b) / (na * nb);
    // dS/da = b/(|a||b|) - S a/|a|², halved by the [0,1] rescaling.
    let da = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| 0.5 * (y / (na * nb) - s * x / (na * na)))
        .collect();
    let db = b
        .iter()
        .zip(a)
        .map(|(&y, &x)| 0.5 * (x / (na * nb) - s * y / (nb * nb)))
        .collect();
    Ok(((1.0 + s) / 2.0, da, db))
}

/// Result of [`topk_select`]: indices in ascending order with their values.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl TopK {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Clamp a requested `k` to the available count, warning when it shrinks.
pub fn clamp_k(k: usize, available: usize) -> usize {
    if k > available {
        log::warn!("top-k: k={k} exceeds {available} candidates, using k={available}");
        available
    } else {
        k
    }
}

/// The `k` largest entries of `v`. Ties prefer the lower index.
pub fn topk_select(v: &[f64], k: usize) -> Result<TopK> {
    if v.is_empty() {
        return Err(CpcError::InvalidArgument("top-k of an empty vector".into()));
    }
    if k == 0 {
        return Err(CpcError::InvalidArgument("top-k requires k >= 1".into()));
    }
    let k = clamp_k(k, v.len());
    let rank = |&a: &usize, &b: &usize| -> Ordering { v[b].total_cmp(&v[a]).then(a.cmp(&b)) };
    let mut order: Vec<usize> = (0..v.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, rank);
        order.truncate(k);
    }
    order.sort_unstable();
    let values = order.iter().map(|&i| v[i]).collect();
    Ok(TopK {
        indices: order,
        values,
    })
}

/// A `height × width × channels` grid stored pixel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ChannelGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() {
            return Err(CpcError::Shape(format!(
                "{height}x{width}x{channels} grid needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Reshape an `s × C` patch matrix onto its `√s × √s` grid.
    pub fn from_patch_matrix(m: &Matrix) -> Result<Self> {
        let side = exact_sqrt(m.rows()).ok_or_else(|| {
            CpcError::Shape(format!("{} patches do not form a square grid", m.rows()))
        })?;
        Self::new(side, side, m.cols(), m.as_slice().to_vec())
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel_min_max(&self, c: usize) -> (f64, f64) {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels.max(1))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

pub fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Source coordinate for output index `i` under corner-aligned sampling:
/// the first and last source cells land exactly on the first and last output
/// pixels. A single output pixel samples the source center.
#[inline]
fn aligned_source(i: usize, out: usize, src: usize) -> f64 {
    if out == 1 {
        (src - 1) as f64 / 2.0
    } else {
        i as f64 * (src - 1) as f64 / (out - 1) as f64
    }
}

/// Bilinear upsampling with corner-aligned sampling.
pub fn bilinear_upsample(grid: &ChannelGrid, out_h: usize, out_w: usize) -> Result<ChannelGrid> {
    if out_h < 1 || out_w < 1 {
        return Err(CpcError::InvalidArgument(format!(
            "upsample target {out_h}x{out_w}"
        )));
    }
    if grid.height == 0 || grid.width == 0 {
        return Err(CpcError::InvalidArgument("upsample of an empty grid".into()));
    }
    let channels = grid.channels;
    let mut out = ChannelGrid::filled(out_h, out_w, channels, 0.0);
    for y in 0..out_h {
        let sy = aligned_source(y, out_h, grid.height);
        let y0 = (sy.floor() as usize).min(grid.height - 1);
        let y1 = (y0 + 1).min(grid.height - 1);
        let fy = sy - y0 as f64;
        for x in 0..out_w {
            let sx = aligned_source(x, out_w, grid.width);
            let x0 = (sx.floor() as usize).min(grid.width - 1);
            let x1 = (x0 + 1).min(grid.width - 1);
            let fx = sx - x0 as f64;
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let (p00, p01, p10, p11) = (
                grid.pixel(y0, x0),
                grid.pixel(y0, x1),
                grid.pixel(y1, x0),
                grid.pixel(y1, x1),
            );
            let dst = out.pixel_mut(y, x);
            for c in 0..channels {
                dst[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Central-difference derivative estimates for every parameter.
pub fn central_differences<F>(loss_fn: &F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if !(step > 0.0) {
        return Err(CpcError::InvalidArgument(format!("step {step}")));
    }
    (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut p = params.to_vec();
            p[i] = params[i] + step;
            let plus = loss_fn(&p)?;
            p[i] = params[i] - step;
            let minus = loss_fn(&p)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(CpcError::NonFinite(format!(
                    "loss at perturbation of parameter {i}"
                )));
            }
            Ok((plus - minus) / (2.0 * step))
        })
        .collect()
}

/// Compare `analytic_grad` against central differences of `loss_fn`.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(
    loss_fn: &F,
    params: &[f64],
    analytic_grad: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if params.len() != analytic_grad.len() {
        return Err(CpcError::Shape(format!(
            "{} params vs {} gradient entries",
            params.len(),
            analytic_grad.len()
        )));
    }
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(CpcError::NonFinite("loss at the check point".into()));
    }
    let numeric = central_differences(loss_fn, params, step)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param_index: 0,
        analytic: analytic_grad.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        checked: params.len(),
    };
    for (i, (&a, &n)) in analytic_grad.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    Ok(report)
}
