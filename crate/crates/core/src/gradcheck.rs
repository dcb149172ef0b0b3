//! End-to-end gradient check of the training objective on small random
//! configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterVector;
use crate::error::{CpcError, Result};
use crate::losses::LossConfig;
use crate::model::{forward_features, FeatureConfig, ModelParams, PatchFeatures};
use crate::numerics::{finite_diff_check, GradCheckReport, Matrix};
use crate::trainer::{sample_loss, sample_objective, PreparedSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Patch grid side; the toy image is `grid_side × grid_side` one-pixel patches.
    pub grid_side: usize,
    pub feature_dim: usize,
    pub cluster_dim: usize,
    pub clusters: usize,
    pub class_count: usize,
    pub top_k: usize,
    pub eps: f64,
    pub lambda_pce: f64,
    pub step: f64,
    pub tolerance: f64,
    pub seeds: Vec<u64>,
    /// Scale applied to the classifier so that some patches are confident
    /// enough to enter the contrastive sets.
    pub classifier_gain: f64,
    /// Minimum distance of every `Z_ic` from `ε` and `1 − ε`.
    pub boundary_guard: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            grid_side: 4,
            feature_dim: 8,
            cluster_dim: 4,
            clusters: 3,
            class_count: 4,
            top_k: 2,
            eps: 0.6,
            lambda_pce: 0.01,
            step: 1e-5,
            tolerance: 1e-4,
            seeds: vec![0, 1, 2, 3, 4],
            classifier_gain: 15.0,
            boundary_guard: 1e-3,
        }
    }
}

impl GradCheckConfig {
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            image_side: self.grid_side,
            patch_side: 1,
            feature_dim: self.feature_dim,
            cluster_dim: self.cluster_dim,
            class_count: self.class_count,
            top_k: self.top_k,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            eps: self.eps,
            lambda_pce: self.lambda_pce,
            background_in_mce: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_config().validate()?;
        crate::losses::check_eps(self.eps)?;
        if self.clusters == 0 || self.seeds.is_empty() {
            return Err(CpcError::Config("gradcheck needs >= 1 cluster and >= 1 seed".into()));
        }
        if !(self.step > 0.0 && self.tolerance > 0.0) {
            return Err(CpcError::Config("gradcheck step and tolerance must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// `None` when the seed was skipped by the boundary guard.
    pub report: Option<GradCheckReport>,
    /// `(N⁺, N⁻)` summed over classes, to show the contrastive term was live.
    pub pair_counts: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub outcomes: Vec<SeedOutcome>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckSummary {
    pub fn checked_seeds(&self) -> usize {
        self.outcomes.iter().filter(|o| o.report.is_some()).count()
    }

    /// The seed with the largest relative error, with its report.
    pub fn worst(&self) -> Option<(u64, &GradCheckReport)> {
        self.outcomes
            .iter()
            .filter_map(|o| o.report.as_ref().map(|r| (o.seed, r)))
            .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
    }
}

/// Random parameters, features and labels for one seed.
pub fn toy_problem(cfg: &GradCheckConfig, seed: u64) -> Result<(ModelParams, PreparedSample)> {
    let fcfg = cfg.feature_config();
    let mut params = ModelParams::init(&fcfg, cfg.clusters, seed)?;
    params.w.scale(cfg.classifier_gain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let features = Matrix::from_fn(fcfg.patch_count(), fcfg.feature_dim, |_, _| {
        rng.random_range(-1.0..1.0)
    });
    let mut bits: Vec<u8> = (0..cfg.clusters).map(|_| u8::from(rng.random_bool(0.5))).collect();
    bits[rng.random_range(0..cfg.clusters)] = 1;
    let mut y: Vec<f64> = (0..fcfg.class_count)
        .map(|_| f64::from(u8::from(rng.random_bool(0.5))))
        .collect();
    y[0] = 1.0;
    Ok((
        params,
        PreparedSample {
            image_id: format!("toy-{seed}"),
            features: PatchFeatures(features),
            u: ClusterVector::new(bits)?,
            y,
            image_size: (cfg.grid_side, cfg.grid_side),
            gt_mask: None,
        },
    ))
}

fn near_boundary(z: &Matrix, eps: f64, guard: f64) -> bool {
    z.as_slice()
        .iter()
        .any(|&v| (v - eps).abs() < guard || (v - (1.0 - eps)).abs() < guard)
}

/// Check one seed. `sabotage` perturbs the analytic gradient to confirm the
/// check can fail.
pub fn check_seed(cfg: &GradCheckConfig, seed: u64, sabotage: bool) -> Result<SeedOutcome> {
    let fcfg = cfg.feature_config();
    let lcfg = cfg.loss_config();
    let (params, sample) = toy_problem(cfg, seed)?;
    let out = forward_features(&sample.features, &sample.u, &params, &fcfg)?;
    let (breakdown, grads) = sample_objective(&params, &sample, &fcfg, &lcfg)?;
    let pair_counts = breakdown
        .pair_counts
        .iter()
        .fold((0, 0), |acc, &(p, n)| (acc.0 + p, acc.1 + n));
    if near_boundary(&out.z, cfg.eps, cfg.boundary_guard) {
        log::info!("gradcheck seed {seed}: a probability sits within the boundary guard, skipped");
        return Ok(SeedOutcome {
            seed,
            report: None,
            pair_counts,
        });
    }
    let mut analytic = grads.to_flat();
    if sabotage {
        let i = analytic
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        analytic[i] *= 1.01;
    }
    let objective = |flat: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        p.set_flat(flat)?;
        Ok(sample_loss(&p, &sample, &fcfg, &lcfg)?.total)
    };
    let report = finite_diff_check(&objective, &params.to_flat(), &analytic, cfg.step)?;
    Ok(SeedOutcome {
        seed,
        report: Some(report),
        pair_counts,
    })
}

pub fn run_gradcheck(cfg: &GradCheckConfig, sabotage: bool) -> Result<GradCheckSummary> {
    cfg.validate()?;
    let outcomes: Vec<SeedOutcome> = cfg
        .seeds
        .iter()
        .map(|&s| check_seed(cfg, s, sabotage))
        .collect::<Result<_>>()?;
    let max_rel_error = outcomes
        .iter()
        .filter_map(|o| o.report.as_ref().map(|r| r.max_rel_error))
        .fold(0.0, f64::max);
    let any_checked = outcomes.iter().any(|o| o.report.is_some());
    Ok(GradCheckSummary {
        passed: any_checked && max_rel_error <= cfg.tolerance,
        outcomes,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_passes() {
        let s = run_gradcheck(&GradCheckConfig::default(), false).unwrap();
        assert!(s.passed, "{s:?}");
        assert!(s.checked_seeds() >= 1);
    }

    #[test]
    fn contrastive_term_is_exercised() {
        let s = run_gradcheck(&GradCheckConfig::default(), false).unwrap();
        assert!(s.outcomes.iter().any(|o| o.pair_counts.0 > 0 && o.pair_counts.1 > 0), "{s:?}");
    }

    #[test]
    fn sabotaged_gradient_fails() {
        let cfg = GradCheckConfig {
            seeds: vec![0],
            ..Default::default()
        };
        let s = run_gradcheck(&cfg, true).unwrap();
        assert!(!s.passed);
    }
}
