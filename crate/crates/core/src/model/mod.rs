//! Patch classifier: patch features, cluster token, HV-BiLSTM refinement,
//! linear softmax classifier and top-k pooling, with exact adjoints.

pub mod checkpoint;
pub mod features;
pub mod lstm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{build_cluster_vector, CategoryPartition, ClusterVector};
use crate::dataio::Sample;
use crate::error::{CpcError, Result};
use crate::numerics::{clamp_k, softmax_rows, topk_select, Matrix};

pub use features::{embed_patches, FeatureFile, FeatureProvider, PatchFeatures};
pub use lstm::{hv_bilstm_backward, hv_bilstm_forward, HvBiLstm, HvCache, LstmParams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Image height and width `n`.
    pub image_side: usize,
    /// Patch height and width `d`.
    pub patch_side: usize,
    /// Patch token width `e`.
    pub feature_dim: usize,
    /// Cluster token width `H`. Zero disables the cluster pathway.
    pub cluster_dim: usize,
    /// Classifier outputs `C`, background included.
    pub class_count: usize,
    pub top_k: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            patch_side: 8,
            feature_dim: 16,
            cluster_dim: 8,
            class_count: 5,
            top_k: 6,
        }
    }
}

impl FeatureConfig {
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// `s = (n/d)²`
    pub fn patch_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// `e + H`
    pub fn token_dim(&self) -> usize {
        self.feature_dim + self.cluster_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CpcError::Config(m));
        if self.image_side == 0 || self.patch_side == 0 {
            return bad("image_side and patch_side must be >= 1".into());
        }
        if !self.image_side.is_multiple_of(self.patch_side) {
            return bad(format!(
                "image_side {} is not divisible by patch_side {}",
                self.image_side, self.patch_side
            ));
        }
        if self.feature_dim == 0 || self.class_count == 0 || self.top_k == 0 {
            return bad("feature_dim, class_count and top_k must be >= 1".into());
        }
        if !self.token_dim().is_multiple_of(2) {
            return bad(format!(
                "feature_dim + cluster_dim = {} must be even",
                self.token_dim()
            ));
        }
        if self.top_k > self.patch_count() {
            log::warn!(
                "top_k {} exceeds the {} patches per image and will be clamped",
                self.top_k,
                self.patch_count()
            );
        }
        Ok(())
    }
}

/// Learnable parameters. Flattened order is `G`, the four LSTM passes
/// (left→right, right→left, top→bottom, bottom→top, each `wx`, `wh`, `b`),
/// then `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `L × H` cluster projection.
    pub g: Matrix,
    pub lstm: HvBiLstm,
    /// `(e+H) × C` classifier.
    pub w: Matrix,
}

impl ModelParams {
    pub fn zeros(cfg: &FeatureConfig, clusters: usize) -> Self {
        Self {
            g: Matrix::zeros(clusters, cfg.cluster_dim),
            lstm: HvBiLstm::zeros(cfg.token_dim()),
            w: Matrix::zeros(cfg.token_dim(), cfg.class_count),
        }
    }

    /// Uniform in `[-a, a]` with `a = 1/√fan_in` per matrix. Biases use the
    /// fan-in of their gate.
    pub fn init(cfg: &FeatureConfig, clusters: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::zeros(cfg, clusters);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = cfg.token_dim();
        let fill = |m: &mut Matrix, fan_in: usize, rng: &mut ChaCha8Rng| {
            let a = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in m.as_mut_slice() {
                *v = rng.random_range(-a..=a);
            }
        };
        fill(&mut p.g, clusters, &mut rng);
        for pass in p.lstm.passes_mut() {
            let hidden = pass.hidden();
            fill(&mut pass.wx, width, &mut rng);
            fill(&mut pass.wh, hidden, &mut rng);
            fill(&mut pass.b, width + hidden, &mut rng);
        }
        fill(&mut p.w, width, &mut rng);
        Ok(p)
    }

    pub fn clusters(&self) -> usize {
        self.g.rows()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.g];
        for pass in self.lstm.passes() {
            out.extend(pass.tensors());
        }
        out.push(&self.w);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.g];
        for pass in self.lstm.passes_mut() {
            out.extend(pass.tensors_mut());
        }
        out.push(&mut self.w);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|m| m.as_slice().len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(CpcError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.as_slice().len();
            t.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        z
    }

    /// `self += factor · other`
    pub fn add_scaled(&mut self, other: &ModelParams, factor: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += factor * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Shapes must match `cfg` and a partition of `clusters` clusters.
    pub fn check_shapes(&self, cfg: &FeatureConfig, clusters: usize) -> Result<()> {
        let expected = Self::zeros(cfg, clusters);
        for (i, (a, b)) in self.tensors().iter().zip(expected.tensors()).enumerate() {
            if a.rows() != b.rows() || a.cols() != b.cols() {
                return Err(CpcError::Shape(format!(
                    "parameter tensor {i} is {}x{}, config expects {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
        }
        Ok(())
    }

    /// FNV-1a over the parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.as_slice() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// `F_c = uᵀG`
pub fn project_cluster_token(u: &ClusterVector, g: &Matrix) -> Result<Vec<f64>> {
    if u.len() != g.rows() {
        return Err(CpcError::Shape(format!(
            "cluster vector has {} entries, G has {} rows",
            u.len(),
            g.rows()
        )));
    }
    let mut out = vec![0.0; g.cols()];
    for (i, &bit) in u.bits().iter().enumerate() {
        if bit == 1 {
            for (o, &v) in out.iter_mut().zip(g.row(i)) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// Append `f_c` to every patch token.
pub fn concat_tokens(f_v: &PatchFeatures, f_c: &[f64]) -> Matrix {
    let m = f_v.matrix();
    let e = m.cols();
    let width = e + f_c.len();
    let mut out = Matrix::zeros(m.rows(), width);
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        row[..e].copy_from_slice(m.row(r));
        row[e..].copy_from_slice(f_c);
    }
    out
}

/// `Z = softmax(F_out · W)`
pub fn classify_patches(f_out: &Matrix, w: &Matrix) -> Result<Matrix> {
    softmax_rows(&f_out.matmul(w)?)
}

/// Per-class mean of the `k` largest column entries, with the chosen rows.
pub fn topk_pool(z: &Matrix, k: usize) -> Result<(Vec<f64>, Vec<Vec<usize>>)> {
    let mut p = Vec::with_capacity(z.cols());
    let mut picked = Vec::with_capacity(z.cols());
    for c in 0..z.cols() {
        let top = topk_select(&z.column(c), k)?;
        p.push(top.mean());
        picked.push(top.indices);
    }
    Ok((p, picked))
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    pub u: ClusterVector,
    pub f_in: Matrix,
    pub lstm: HvCache,
    pub f_out: Matrix,
    pub z: Matrix,
    /// Rows chosen by top-k pooling, per class.
    pub topk: Vec<Vec<usize>>,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `s × C` patch probabilities.
    pub z: Matrix,
    /// Pooled image-level probabilities, length `C`.
    pub p: Vec<f64>,
    pub cache: ForwardCache,
}

/// Forward pass from precomputed patch features.
pub fn forward_features(
    f_v: &PatchFeatures,
    u: &ClusterVector,
    params: &ModelParams,
    cfg: &FeatureConfig,
) -> Result<ModelOutput> {
    let m = f_v.matrix();
    if m.rows() != cfg.patch_count() || m.cols() != cfg.feature_dim {
        return Err(CpcError::Shape(format!(
            "patch features are {}x{}, config expects {}x{}",
            m.rows(),
            m.cols(),
            cfg.patch_count(),
            cfg.feature_dim
        )));
    }
    if params.g.cols() != cfg.cluster_dim || params.w.cols() != cfg.class_count {
        return Err(CpcError::Shape("parameters do not match the feature config".into()));
    }
    let f_c = project_cluster_token(u, &params.g)?;
    let f_in = concat_tokens(f_v, &f_c);
    let (f_out, lstm_cache) = hv_bilstm_forward(&f_in, &params.lstm)?;
    let z = classify_patches(&f_out, &params.w)?;
    let k = clamp_k(cfg.top_k, z.rows());
    let (p, topk) = topk_pool(&z, k)?;
    Ok(ModelOutput {
        z: z.clone(),
        p,
        cache: ForwardCache {
            fingerprint: params.fingerprint(),
            u: u.clone(),
            f_in,
            lstm: lstm_cache,
            f_out,
            z,
            topk,
            k,
        },
    })
}

/// Full forward pass for one sample.
pub fn forward(
    sample: &Sample,
    partition: &CategoryPartition,
    params: &ModelParams,
    cfg: &FeatureConfig,
    provider: &FeatureProvider,
) -> Result<ModelOutput> {
    let f_v = embed_patches(&sample.image, &sample.image_id, cfg, provider)?;
    let u = build_cluster_vector(&sample.labels, partition)?;
    forward_features(&f_v, &u, params, cfg)
}

/// Reverse-mode adjoints of [`forward_features`].
///
/// `d_z` and `d_p` are loss gradients w.r.t. `Z` and the pooled `p`;
/// `d_f_out` optionally adds a direct gradient on `F_out` (the contrastive
/// term acts there). Fails with [`CpcError::StaleCache`] when `params`
/// changed since the forward pass.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    d_z: &Matrix,
    d_p: &[f64],
    d_f_out: Option<&Matrix>,
) -> Result<ModelParams> {
    if params.fingerprint() != cache.fingerprint {
        return Err(CpcError::StaleCache);
    }
    let (s, c) = (cache.z.rows(), cache.z.cols());
    if d_z.rows() != s || d_z.cols() != c || d_p.len() != c {
        return Err(CpcError::Shape("loss gradients do not match the forward pass".into()));
    }
    let mut dz = d_z.clone();
    let inv_k = 1.0 / cache.k as f64;
    for (class, rows) in cache.topk.iter().enumerate() {
        for &r in rows {
            let v = dz.get(r, class) + d_p[class] * inv_k;
            dz.set(r, class, v);
        }
    }
    let mut d_logits = Matrix::zeros(s, c);
    for r in 0..s {
        let zr = cache.z.row(r);
        let dr = dz.row(r);
        let inner: f64 = zr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (out, (&zv, &dv)) in d_logits.row_mut(r).iter_mut().zip(zr.iter().zip(dr)) {
            *out = zv * (dv - inner);
        }
    }
    let mut grads = params.zeros_like();
    grads.w = cache.f_out.t_matmul(&d_logits)?;
    let mut d_out = d_logits.matmul_t(&params.w)?;
    if let Some(extra) = d_f_out {
        if extra.rows() != s || extra.cols() != d_out.cols() {
            return Err(CpcError::Shape("F_out gradient has the wrong shape".into()));
        }
        d_out.add_assign(extra);
    }
    let d_in = hv_bilstm_backward(&cache.f_in, &params.lstm, &cache.lstm, &d_out, &mut grads.lstm);
    let e = cache.f_in.cols() - params.g.cols();
    let mut d_fc = vec![0.0; params.g.cols()];
    for r in 0..s {
        for (acc, &v) in d_fc.iter_mut().zip(&d_in.row(r)[e..]) {
            *acc += v;
        }
    }
    for (i, &bit) in cache.u.bits().iter().enumerate() {
        if bit == 1 {
            grads.g.row_mut(i).copy_from_slice(&d_fc);
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn toy_cfg() -> FeatureConfig {
        FeatureConfig {
            image_side: 8,
            patch_side: 2,
            feature_dim: 4,
            cluster_dim: 2,
            class_count: 3,
            top_k: 2,
        }
    }

    fn toy_features(cfg: &FeatureConfig, seed: u64) -> PatchFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PatchFeatures(Matrix::from_fn(cfg.patch_count(), cfg.feature_dim, |_, _| {
            rng.random_range(-1.0..1.0)
        }))
    }

    #[test]
    fn cluster_token_examples() {
        let g = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let both = ClusterVector::new(vec![1, 1]).unwrap();
        assert_eq!(project_cluster_token(&both, &g).unwrap(), vec![4.0, 6.0]);
        let second = ClusterVector::new(vec![0, 1]).unwrap();
        assert_eq!(project_cluster_token(&second, &g).unwrap(), vec![3.0, 4.0]);
        let none = ClusterVector::new(vec![0, 0]).unwrap();
        assert_eq!(project_cluster_token(&none, &g).unwrap(), vec![0.0, 0.0]);
        let short = ClusterVector::new(vec![1]).unwrap();
        assert!(project_cluster_token(&short, &g).is_err());
    }

    #[test]
    fn concat_examples() {
        let f = PatchFeatures(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = concat_tokens(&f, &[9.0]);
        assert_eq!(out.as_slice(), &[1.0, 2.0, 9.0, 3.0, 4.0, 9.0]);
        assert_eq!(concat_tokens(&f, &[]), f.0);
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let f = Matrix::from_fn(4, 2, |r, c| (r + c) as f64);
        let z = classify_patches(&f, &Matrix::zeros(2, 4)).unwrap();
        assert!(z.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let big = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![800.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let z = classify_patches(&big, &w).unwrap();
        assert!((z.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_pool_examples() {
        let z = Matrix::from_rows(&[vec![0.9], vec![0.5], vec![0.2], vec![0.1]]).unwrap();
        assert!((topk_pool(&z, 2).unwrap().0[0] - 0.7).abs() < 1e-15);
        assert_eq!(topk_pool(&z, 1).unwrap().0[0], 0.9);
        assert!((topk_pool(&z, 4).unwrap().0[0] - 0.425).abs() < 1e-15);
        assert_eq!(topk_pool(&z, 2).unwrap().1[0], vec![0, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(toy_cfg().validate().is_ok());
        let mut c = toy_cfg();
        c.patch_side = 3;
        assert!(c.validate().is_err());
        let mut c = toy_cfg();
        c.cluster_dim = 1;
        assert!(c.validate().is_err());
        let mut c = toy_cfg();
        c.top_k = 0;
        assert!(c.validate().is_err());
        assert_eq!(FeatureConfig { image_side: 64, patch_side: 16, ..toy_cfg() }.patch_count(), 16);
    }

    #[test]
    fn flat_round_trip() {
        let cfg = toy_cfg();
        let p = ModelParams::init(&cfg, 3, 5).unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.param_count());
        let mut q = p.zeros_like();
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&flat[1..]).is_err());
        assert_eq!(ModelParams::init(&cfg, 3, 5).unwrap(), p);
        assert_ne!(ModelParams::init(&cfg, 3, 6).unwrap(), p);
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let cfg = toy_cfg();
        let p = ModelParams::init(&cfg, 3, 1).unwrap();
        let a = 1.0 / (cfg.token_dim() as f64).sqrt();
        assert!(p.w.as_slice().iter().all(|v| v.abs() <= a));
        assert!(p.lstm.left_right.wx.as_slice().iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn forward_composes_stages() {
        let cfg = toy_cfg();
        let params = ModelParams::init(&cfg, 3, 2).unwrap();
        let f = toy_features(&cfg, 7);
        let u = ClusterVector::new(vec![1, 0, 1]).unwrap();
        let out = forward_features(&f, &u, &params, &cfg).unwrap();
        assert_eq!((out.z.rows(), out.z.cols()), (16, 3));
        assert_eq!(out.p.len(), 3);

        let fc = project_cluster_token(&u, &params.g).unwrap();
        let fin = concat_tokens(&f, &fc);
        let (fout, _) = hv_bilstm_forward(&fin, &params.lstm).unwrap();
        let z = classify_patches(&fout, &params.w).unwrap();
        let (p, _) = topk_pool(&z, 2).unwrap();
        assert_eq!(out.z, z);
        assert_eq!(out.p, p);
        for r in 0..16 {
            assert!((out.z.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let again = forward_features(&f, &u, &params, &cfg).unwrap();
        assert_eq!(again.z, out.z);
    }

    #[test]
    fn zero_cluster_dim_matches_cluster_free_model() {
        let cfg = FeatureConfig { cluster_dim: 0, ..toy_cfg() };
        let params = ModelParams::init(&cfg, 3, 2).unwrap();
        let f = toy_features(&cfg, 1);
        let a = forward_features(&f, &ClusterVector::new(vec![1, 0, 0]).unwrap(), &params, &cfg).unwrap();
        let b = forward_features(&f, &ClusterVector::new(vec![0, 1, 1]).unwrap(), &params, &cfg).unwrap();
        assert_eq!(a.cache.f_in, f.0);
        assert_eq!(a.z, b.z);
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn zero_upstream_gradients_give_zero() {
        let cfg = toy_cfg();
        let params = ModelParams::init(&cfg, 3, 2).unwrap();
        let u = ClusterVector::new(vec![1, 1, 0]).unwrap();
        let out = forward_features(&toy_features(&cfg, 3), &u, &params, &cfg).unwrap();
        let g = backward(&params, &out.cache, &Matrix::zeros(16, 3), &[0.0; 3], None).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = toy_cfg();
        let mut params = ModelParams::init(&cfg, 3, 2).unwrap();
        let u = ClusterVector::new(vec![1, 1, 0]).unwrap();
        let out = forward_features(&toy_features(&cfg, 3), &u, &params, &cfg).unwrap();
        params.w.set(0, 0, 0.123);
        assert!(matches!(
            backward(&params, &out.cache, &Matrix::zeros(16, 3), &[0.0; 3], None),
            Err(CpcError::StaleCache)
        ));
    }

    /// Gradients of a fixed linear functional of `(Z, p, F_out)` against
    /// central differences.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = toy_cfg();
        for seed in 0..3u64 {
            let params = ModelParams::init(&cfg, 3, seed).unwrap();
            let f = toy_features(&cfg, 100 + seed);
            let u = ClusterVector::new(vec![1, 0, 1]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let cz = Matrix::from_fn(16, 3, |_, _| rng.random_range(-1.0..1.0));
            let cp: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cf = Matrix::from_fn(16, 6, |_, _| rng.random_range(-1.0..1.0));
            let objective = |flat: &[f64]| -> Result<f64> {
                let mut p = params.clone();
                p.set_flat(flat)?;
                let out = forward_features(&f, &u, &p, &cfg)?;
                let dz: f64 = out.z.as_slice().iter().zip(cz.as_slice()).map(|(a, b)| a * b).sum();
                let dp: f64 = out.p.iter().zip(&cp).map(|(a, b)| a * b).sum();
                let df: f64 = out.cache.f_out.as_slice().iter().zip(cf.as_slice()).map(|(a, b)| a * b).sum();
                Ok(dz + dp + df)
            };
            let out = forward_features(&f, &u, &params, &cfg).unwrap();
            let grads = backward(&params, &out.cache, &cz, &cp, Some(&cf)).unwrap();
            let report = finite_diff_check(&objective, &params.to_flat(), &grads.to_flat(), 1e-5).unwrap();
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");
            // Rows of G for inactive clusters receive nothing.
            assert!(grads.g.row(1).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn unselected_patch_does_not_move_pooled_value() {
        let cfg = toy_cfg();
        let params = ModelParams::init(&cfg, 3, 4).unwrap();
        let u = ClusterVector::new(vec![1, 0, 0]).unwrap();
        let out = forward_features(&toy_features(&cfg, 4), &u, &params, &cfg).unwrap();
        let mut dp = vec![0.0; 3];
        dp[1] = 1.0;
        let mut dz_equiv = Matrix::zeros(16, 3);
        for &r in &out.cache.topk[1] {
            dz_equiv.set(r, 1, 0.5);
        }
        let a = backward(&params, &out.cache, &Matrix::zeros(16, 3), &dp, None).unwrap();
        let b = backward(&params, &out.cache, &dz_equiv, &[0.0; 3], None).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pooled_value_lies_within_column(seed in 0u64..1000, k in 1usize..20) {
            let cfg = toy_cfg();
            let params = ModelParams::init(&cfg, 2, seed).unwrap();
            let u = ClusterVector::new(vec![1, 1]).unwrap();
            let out = forward_features(&toy_features(&cfg, seed), &u, &params, &cfg).unwrap();
            let (p, _) = topk_pool(&out.z, k).unwrap();
            let (p_next, _) = topk_pool(&out.z, k + 1).unwrap();
            for c in 0..3 {
                let col = out.z.column(c);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo - 1e-15 <= p[c] && p[c] <= hi + 1e-15);
                prop_assert!(p_next[c] <= p[c] + 1e-15);
            }
        }
    }
}
