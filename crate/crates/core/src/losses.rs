//! Multi-label classification loss, patch contrastive error and their sum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CpcError, Result};
use crate::numerics::{normalized_similarity_grad, Matrix};

/// Probability clamp applied before logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

/// Binary cross-entropy averaged over classes, with its gradient w.r.t. `p`.
/// The gradient is zero where the clamp is active.
pub fn mce_loss(p: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if p.len() != y.len() {
        return Err(CpcError::Shape(format!(
            "{} probabilities for {} labels",
            p.len(),
            y.len()
        )));
    }
    if p.is_empty() {
        return Err(CpcError::InvalidArgument("mce over zero classes".into()));
    }
    let inv_c = 1.0 / p.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (c, (&pc, &yc)) in p.iter().zip(y).enumerate() {
        if !pc.is_finite() {
            return Err(CpcError::NonFinite(format!("p[{c}] = {pc}")));
        }
        let q = pc.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= inv_c * (yc * q.ln() + (1.0 - yc) * (1.0 - q).ln());
        if q == pc {
            grad[c] = -inv_c * (yc / q - (1.0 - yc) / (1.0 - q));
        }
    }
    Ok((loss, grad))
}

/// Patches whose class-`c` probability is confidently high or low.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidenceSplit {
    pub class_id: usize,
    pub high: Vec<usize>,
    pub low: Vec<usize>,
}

pub fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.5 && eps < 1.0 {
        Ok(())
    } else {
        Err(CpcError::Config(format!("confidence threshold {eps} must lie in (0.5, 1)")))
    }
}

/// `high = {i : Z_ic > ε}`, `low = {i : Z_ic < 1 − ε}`.
pub fn split_confidence(z: &Matrix, class_id: usize, eps: f64) -> Result<ConfidenceSplit> {
    check_eps(eps)?;
    if class_id >= z.cols() {
        return Err(CpcError::InvalidArgument(format!(
            "class {class_id} out of range for {} classes",
            z.cols()
        )));
    }
    let mut high = Vec::new();
    let mut low = Vec::new();
    for i in 0..z.rows() {
        let v = z.get(i, class_id);
        if v > eps {
            high.push(i);
        } else if v < 1.0 - eps {
            low.push(i);
        }
    }
    Ok(ConfidenceSplit {
        class_id,
        high,
        low,
    })
}

/// Ordered high-high pair count `N⁺` and high-low count `N⁻`.
pub fn pair_counts(split: &ConfidenceSplit) -> (usize, usize) {
    let h = split.high.len();
    (h * h.saturating_sub(1), h * split.low.len())
}

/// Contrastive error for one class and its gradient w.r.t. `F_out`.
///
/// High pairs are pulled together via `(1 − S̄)/N⁺` over ordered pairs; high
/// and low patches are pushed apart via `S̄/N⁻`. A term without pairs is 0.
pub fn pce_loss_class(split: &ConfidenceSplit, f_out: &Matrix) -> Result<(f64, Matrix)> {
    let mut grad = Matrix::zeros(f_out.rows(), f_out.cols());
    let (n_pos, n_neg) = pair_counts(split);
    let mut loss = 0.0;
    if n_pos > 0 {
        // Each unordered pair appears twice among the ordered ones.
        let w = 2.0 / n_pos as f64;
        for (a, &i) in split.high.iter().enumerate() {
            for &j in &split.high[a + 1..] {
                let (s, di, dj) = normalized_similarity_grad(f_out.row(i), f_out.row(j))?;
                loss += w * (1.0 - s);
                axpy(grad.row_mut(i), -w, &di);
                axpy(grad.row_mut(j), -w, &dj);
            }
        }
    }
    if n_neg > 0 {
        let w = 1.0 / n_neg as f64;
        for &m in &split.high {
            for &n in &split.low {
                let (s, dm, dn) = normalized_similarity_grad(f_out.row(m), f_out.row(n))?;
                loss += w * s;
                axpy(grad.row_mut(m), w, &dm);
                axpy(grad.row_mut(n), w, &dn);
            }
        }
    }
    Ok((loss, grad))
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub eps: f64,
    pub lambda_pce: f64,
    /// Include class 0 (background) in the classification loss.
    pub background_in_mce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eps: 0.85,
            lambda_pce: 0.01,
            background_in_mce: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mce: f64,
    pub pce_per_class: Vec<f64>,
    pub total: f64,
    pub lambda_pce: f64,
    /// `(N⁺, N⁻)` per class.
    pub pair_counts: Vec<(usize, usize)>,
}

impl LossBreakdown {
    pub fn pce_sum(&self) -> f64 {
        self.pce_per_class.iter().sum()
    }
}

/// Loss gradients w.r.t. the pooled probabilities and the refined tokens.
/// Confidence sets are constants, so nothing flows into `Z` directly.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub d_p: Vec<f64>,
    pub d_f_out: Matrix,
}

/// `L = L_MCE + λ Σ_c PCE_c` over every class.
pub fn total_loss(
    p: &[f64],
    y: &[f64],
    z: &Matrix,
    f_out: &Matrix,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGrads)> {
    check_eps(cfg.eps)?;
    if z.cols() != p.len() || z.rows() != f_out.rows() {
        return Err(CpcError::Shape("Z, p and F_out disagree".into()));
    }
    let from = usize::from(!cfg.background_in_mce);
    if from >= p.len().min(y.len()) {
        return Err(CpcError::InvalidArgument("no classes left for the classification loss".into()));
    }
    let (mce, tail) = mce_loss(&p[from..], &y[from..])?;
    let mut d_p = vec![0.0; p.len()];
    d_p[from..].copy_from_slice(&tail);

    let per_class: Vec<(f64, Matrix, (usize, usize))> = (0..z.cols())
        .into_par_iter()
        .map(|c| {
            let split = split_confidence(z, c, cfg.eps)?;
            let counts = pair_counts(&split);
            let (l, g) = pce_loss_class(&split, f_out)?;
            Ok((l, g, counts))
        })
        .collect::<Result<_>>()?;

    let mut d_f_out = Matrix::zeros(f_out.rows(), f_out.cols());
    let mut pce_per_class = Vec::with_capacity(per_class.len());
    let mut counts = Vec::with_capacity(per_class.len());
    for (l, mut g, n) in per_class {
        pce_per_class.push(l);
        counts.push(n);
        if cfg.lambda_pce != 0.0 && (n.0 > 0 || n.1 > 0) {
            g.scale(cfg.lambda_pce);
            d_f_out.add_assign(&g);
        }
    }
    let total = mce + cfg.lambda_pce * pce_per_class.iter().sum::<f64>();
    if !total.is_finite() {
        return Err(CpcError::NonFinite("total loss".into()));
    }
    Ok((
        LossBreakdown {
            mce,
            pce_per_class,
            total,
            lambda_pce: cfg.lambda_pce,
            pair_counts: counts,
        },
        LossGrads { d_p, d_f_out },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;

    /// Literal double-sum form of the contrastive error, written independently.
    fn pce_oracle(z: &[Vec<f64>], f: &[Vec<f64>], c: usize, eps: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            (1.0 + d / (na * nb)) / 2.0
        };
        let high: Vec<usize> = (0..z.len()).filter(|&i| z[i][c] > eps).collect();
        let low: Vec<usize> = (0..z.len()).filter(|&i| z[i][c] < 1.0 - eps).collect();
        let mut pos = 0.0;
        let mut n_pos = 0;
        for &i in &high {
            for &j in &high {
                if i != j {
                    pos += 1.0 - cos(&f[i], &f[j]);
                    n_pos += 1;
                }
            }
        }
        let mut neg = 0.0;
        let mut n_neg = 0;
        for &m in &high {
            for &n in &low {
                neg += cos(&f[m], &f[n]);
                n_neg += 1;
            }
        }
        let a = if n_pos == 0 { 0.0 } else { pos / n_pos as f64 };
        let b = if n_neg == 0 { 0.0 } else { neg / n_neg as f64 };
        a + b
    }

    #[test]
    fn mce_examples() {
        let (l, _) = mce_loss(&[1.0 - 1e-12, 1e-12], &[1.0, 0.0]).unwrap();
        assert!(l.abs() < 1e-11);
        let (l, _) = mce_loss(&[0.5], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, _) = mce_loss(&[0.8, 0.2], &[1.0, 0.0]).unwrap();
        assert!((l - (-(0.8f64).ln())).abs() < 1e-15);
        assert!(mce_loss(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn mce_gradient_and_clamp() {
        let p = [0.3, 0.9, 0.6];
        let y = [1.0, 0.0, 1.0];
        let (_, g) = mce_loss(&p, &y).unwrap();
        let f = |x: &[f64]| mce_loss(x, &y).map(|r| r.0);
        let report = finite_diff_check(&f, &p, &g, 1e-7).unwrap();
        assert!(report.passes(1e-6), "{report:?}");
        let (l, g) = mce_loss(&[0.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!(l.is_finite());
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn split_examples() {
        let z = Matrix::from_rows(&[vec![0.9], vec![0.5], vec![0.05]]).unwrap();
        let s = split_confidence(&z, 0, 0.85).unwrap();
        assert_eq!((s.high, s.low), (vec![0], vec![2]));
        let z = Matrix::from_rows(&[vec![0.5], vec![0.5]]).unwrap();
        let s = split_confidence(&z, 0, 0.85).unwrap();
        assert!(s.high.is_empty() && s.low.is_empty());
        let z = Matrix::from_rows(&[vec![0.7], vec![0.3]]).unwrap();
        let s = split_confidence(&z, 0, 0.6).unwrap();
        assert_eq!((s.high, s.low), (vec![0], vec![1]));
        for eps in [0.5, 1.0, 0.2, f64::NAN] {
            assert!(split_confidence(&z, 0, eps).is_err());
        }
    }

    #[test]
    fn pce_examples() {
        let split = |high: Vec<usize>, low: Vec<usize>| ConfidenceSplit {
            class_id: 0,
            high,
            low,
        };
        let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(pce_loss_class(&split(vec![0, 1], vec![]), &same).unwrap().0.abs() < 1e-15);
        assert!((pce_loss_class(&split(vec![0], vec![1]), &same).unwrap().0 - 1.0).abs() < 1e-15);
        let ortho = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((pce_loss_class(&split(vec![0, 1], vec![]), &ortho).unwrap().0 - 0.5).abs() < 1e-15);
        let zero = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            pce_loss_class(&split(vec![0, 1], vec![]), &zero),
            Err(CpcError::ZeroNorm)
        ));
    }

    #[test]
    fn total_loss_identities() {
        let z = Matrix::from_rows(&[
            vec![0.9, 0.05, 0.05],
            vec![0.8, 0.1, 0.1],
            vec![0.02, 0.96, 0.02],
            vec![0.95, 0.03, 0.02],
        ])
        .unwrap();
        let f = Matrix::from_rows(&[
            vec![1.0, 0.2, -0.3],
            vec![0.5, 1.0, 0.1],
            vec![-0.4, 0.3, 1.0],
            vec![0.7, -0.6, 0.2],
        ])
        .unwrap();
        let p = [0.9, 0.6, 0.1];
        let y = [1.0, 1.0, 0.0];
        let cfg = LossConfig {
            eps: 0.85,
            lambda_pce: 0.01,
            background_in_mce: true,
        };
        let (b, _) = total_loss(&p, &y, &z, &f, &cfg).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|r| z.row(r).to_vec()).collect();
        let feats: Vec<Vec<f64>> = (0..4).map(|r| f.row(r).to_vec()).collect();
        let oracle: f64 = (0..3).map(|c| pce_oracle(&rows, &feats, c, 0.85)).sum();
        assert!((b.pce_sum() - oracle).abs() < 1e-12);
        assert!((b.total - (b.mce + 0.01 * oracle)).abs() < 1e-12);
        assert_eq!(b.pair_counts[0], (2, 2));

        let (b0, _) = total_loss(&p, &y, &z, &f, &LossConfig { lambda_pce: 0.0, ..cfg }).unwrap();
        assert_eq!(b0.total, b0.mce);

        let flat = Matrix::from_fn(4, 3, |_, _| 1.0 / 3.0);
        let (b1, g1) = total_loss(&p, &y, &flat, &f, &LossConfig { lambda_pce: 5.0, ..cfg }).unwrap();
        assert_eq!(b1.total, b1.mce);
        assert!(g1.d_f_out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn background_toggle_drops_class_zero() {
        let z = Matrix::from_fn(4, 3, |_, _| 1.0 / 3.0);
        let f = Matrix::from_fn(4, 2, |r, c| (r + c + 1) as f64);
        let p = [0.9, 0.6, 0.1];
        let y = [1.0, 1.0, 0.0];
        let cfg = LossConfig {
            background_in_mce: false,
            ..LossConfig::default()
        };
        let (b, g) = total_loss(&p, &y, &z, &f, &cfg).unwrap();
        assert!((b.mce - mce_loss(&p[1..], &y[1..]).unwrap().0).abs() < 1e-15);
        assert_eq!(g.d_p[0], 0.0);
    }

    #[test]
    fn pce_gradient_matches_finite_differences() {
        let f = Matrix::from_rows(&[
            vec![1.0, 0.2, -0.3],
            vec![0.5, 1.0, 0.1],
            vec![-0.4, 0.3, 1.0],
            vec![0.7, -0.6, 0.2],
        ])
        .unwrap();
        let split = ConfidenceSplit {
            class_id: 0,
            high: vec![0, 1, 3],
            low: vec![2],
        };
        let (_, g) = pce_loss_class(&split, &f).unwrap();
        let loss = |x: &[f64]| {
            let m = Matrix::new(4, 3, x.to_vec())?;
            pce_loss_class(&split, &m).map(|r| r.0)
        };
        let report = finite_diff_check(&loss, f.as_slice(), g.as_slice(), 1e-6).unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    fn embeddings() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> {
        (2usize..7, 1usize..4).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(prop::collection::vec(0.1f64..2.0, d), n),
                prop::collection::vec(0..n, 0..n),
                prop::collection::vec(0..n, 0..n),
            )
                .prop_map(|(f, h, l)| {
                    let mut high: Vec<usize> = h;
                    high.sort_unstable();
                    high.dedup();
                    let mut low: Vec<usize> = l.into_iter().filter(|i| !high.contains(i)).collect();
                    low.sort_unstable();
                    low.dedup();
                    (f, high, low)
                })
        })
    }

    proptest! {
        #[test]
        fn pce_is_bounded_and_scale_invariant((f, high, low) in embeddings(), scale in 0.01f64..100.0) {
            let m = Matrix::from_rows(&f).unwrap();
            let split = ConfidenceSplit { class_id: 0, high, low };
            let (l, _) = pce_loss_class(&split, &m).unwrap();
            prop_assert!((0.0..=2.0 + 1e-12).contains(&l));
            let mut scaled = m.clone();
            scaled.scale(scale);
            let (ls, _) = pce_loss_class(&split, &scaled).unwrap();
            prop_assert!((l - ls).abs() < 1e-12);
        }

        #[test]
        fn mce_is_nonnegative_and_permutation_equivariant(
            p in prop::collection::vec(0.0f64..=1.0, 2..6),
            bits in prop::collection::vec(any::<bool>(), 6),
            a in 0usize..6, b in 0usize..6,
        ) {
            let y: Vec<f64> = bits[..p.len()].iter().map(|&v| f64::from(u8::from(v))).collect();
            let (l, _) = mce_loss(&p, &y).unwrap();
            prop_assert!(l >= 0.0);
            let (a, b) = (a % p.len(), b % p.len());
            let mut p2 = p.clone();
            let mut y2 = y.clone();
            p2.swap(a, b);
            y2.swap(a, b);
            let (l2, _) = mce_loss(&p2, &y2).unwrap();
            prop_assert!((l - l2).abs() < 1e-12);
        }
    }
}
