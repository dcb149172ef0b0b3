//! Deterministic mini-batch training.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{build_cluster_vector, CategoryList, CategoryPartition, ClusterVector};
use crate::dataio::{label_vector, LabelMap, Sample};
use crate::error::{CpcError, Result};
use crate::evaluation::ConfusionMatrix;
use crate::inference::{argmax_labels, probmap_from_patches};
use crate::losses::{check_eps, total_loss, LossBreakdown, LossConfig};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{
    backward, embed_patches, forward_features, FeatureConfig, FeatureProvider, ModelParams,
    PatchFeatures,
};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub stage1_epochs: usize,
    /// Confidence threshold ε for the contrastive term.
    pub eps: f64,
    pub lambda_pce: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Include background (class 0) in the classification loss.
    pub background_in_mce: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr_stage1: 1e-3,
            lr_stage2: 1e-4,
            stage1_epochs: 2,
            eps: 0.85,
            lambda_pce: 0.01,
            seed: 0,
            optimizer: Optimizer::default(),
            max_steps: None,
            background_in_mce: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CpcError::Config("epochs and batch_size must be >= 1".into()));
        }
        for (name, lr) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(CpcError::Config(format!("{name} must be >= 0, got {lr}")));
            }
        }
        check_eps(self.eps)?;
        if !(self.lambda_pce >= 0.0 && self.lambda_pce.is_finite()) {
            return Err(CpcError::Config(format!("lambda_pce must be >= 0, got {}", self.lambda_pce)));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(CpcError::Config("adam needs 0 <= beta < 1 and eps > 0".into()));
            }
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            eps: self.eps,
            lambda_pce: self.lambda_pce,
            background_in_mce: self.background_in_mce,
        }
    }
}

/// Learning rate of `epoch` (zero-based).
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.stage1_epochs {
        cfg.lr_stage1
    } else {
        cfg.lr_stage2
    }
}

pub fn init_params(
    cfg: &TrainConfig,
    partition: &CategoryPartition,
    feature_cfg: &FeatureConfig,
) -> Result<ModelParams> {
    ModelParams::init(feature_cfg, partition.len(), cfg.seed)
}

/// A sample reduced to what training needs.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image_id: String,
    pub features: PatchFeatures,
    pub u: ClusterVector,
    pub y: Vec<f64>,
    pub image_size: (usize, usize),
    pub gt_mask: Option<LabelMap>,
}

pub fn prepare_samples(
    samples: &[Sample],
    partition: &CategoryPartition,
    categories: &CategoryList,
    feature_cfg: &FeatureConfig,
    provider: &FeatureProvider,
) -> Result<Vec<PreparedSample>> {
    if samples.is_empty() {
        return Err(CpcError::EmptyDataset);
    }
    if feature_cfg.class_count != categories.len() + 1 {
        return Err(CpcError::Config(format!(
            "class_count {} does not equal {} categories plus background",
            feature_cfg.class_count,
            categories.len()
        )));
    }
    samples
        .par_iter()
        .map(|s| {
            Ok(PreparedSample {
                image_id: s.image_id.clone(),
                features: embed_patches(&s.image, &s.image_id, feature_cfg, provider)?,
                u: build_cluster_vector(&s.labels, partition)?,
                y: label_vector(&s.labels, categories)?,
                image_size: (s.image.height(), s.image.width()),
                gt_mask: s.gt_mask.clone(),
            })
        })
        .collect()
}

/// Loss of one sample and its gradient w.r.t. every parameter.
pub fn sample_objective(
    params: &ModelParams,
    sample: &PreparedSample,
    feature_cfg: &FeatureConfig,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, ModelParams)> {
    let out = forward_features(&sample.features, &sample.u, params, feature_cfg)?;
    let (breakdown, grads) = total_loss(&out.p, &sample.y, &out.z, &out.cache.f_out, loss_cfg)?;
    let d_z = Matrix::zeros(out.z.rows(), out.z.cols());
    let g = backward(params, &out.cache, &d_z, &grads.d_p, Some(&grads.d_f_out))?;
    Ok((breakdown, g))
}

/// Loss of one sample without gradients.
pub fn sample_loss(
    params: &ModelParams,
    sample: &PreparedSample,
    feature_cfg: &FeatureConfig,
    loss_cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let out = forward_features(&sample.features, &sample.u, params, feature_cfg)?;
    Ok(total_loss(&out.p, &sample.y, &out.z, &out.cache.f_out, loss_cfg)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanLoss {
    pub mce: f64,
    pub pce_sum: f64,
    pub total: f64,
}

/// Mean losses over a whole dataset, accumulated in sample order.
pub fn dataset_loss(
    params: &ModelParams,
    samples: &[PreparedSample],
    feature_cfg: &FeatureConfig,
    loss_cfg: &LossConfig,
) -> Result<MeanLoss> {
    let parts: Vec<LossBreakdown> = samples
        .par_iter()
        .map(|s| sample_loss(params, s, feature_cfg, loss_cfg))
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut m = MeanLoss {
        mce: 0.0,
        pce_sum: 0.0,
        total: 0.0,
    };
    for b in &parts {
        m.mce += b.mce / n;
        m.pce_sum += b.pce_sum() / n;
        m.total += b.total / n;
    }
    Ok(m)
}

/// Argmax of the upsampled patch predictions (no CRF) scored against the
/// ground-truth masks of those samples that carry one.
pub fn probe_miou(
    params: &ModelParams,
    samples: &[PreparedSample],
    feature_cfg: &FeatureConfig,
) -> Result<Option<f64>> {
    let scored: Vec<ConfusionMatrix> = samples
        .par_iter()
        .filter(|s| s.gt_mask.is_some())
        .map(|s| {
            let out = forward_features(&s.features, &s.u, params, feature_cfg)?;
            let probs = probmap_from_patches(&out.z, s.image_size.0, s.image_size.1)?;
            let pred = argmax_labels(&probs)?;
            let mut cm = ConfusionMatrix::new(feature_cfg.class_count, None);
            cm.accumulate(&pred, s.gt_mask.as_ref().expect("filtered"))?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    if scored.is_empty() {
        return Ok(None);
    }
    let mut total = ConfusionMatrix::new(feature_cfg.class_count, None);
    for cm in &scored {
        total.merge(cm)?;
    }
    Ok(Some(total.miou()?.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub mce: f64,
    pub pce_sum: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_mce: f64,
    pub mean_total: f64,
    pub probe_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            LogRecord::Epoch(_) => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            LogRecord::Step(_) => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| CpcError::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| CpcError::io(path, e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Write `epoch_NNN.cpcm` here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Score argmax pseudo-labels against ground truth after every epoch.
    pub probe: bool,
}

struct AdamState {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

fn apply_update(
    params: &mut ModelParams,
    grad: &ModelParams,
    lr: f64,
    optimizer: &Optimizer,
    adam: &mut AdamState,
) {
    match *optimizer {
        Optimizer::Sgd => params.add_scaled(grad, -lr),
        Optimizer::Adam { beta1, beta2, eps } => {
            adam.t += 1;
            let c1 = 1.0 - beta1.powi(adam.t);
            let c2 = 1.0 - beta2.powi(adam.t);
            let tensors = params
                .tensors_mut()
                .into_iter()
                .zip(grad.tensors())
                .zip(adam.m.tensors_mut())
                .zip(adam.v.tensors_mut());
            for (((p, g), m), v) in tensors {
                let it = p
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(m.as_mut_slice())
                    .zip(v.as_mut_slice());
                for (((p, &g), m), v) in it {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Seed-derived sample order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Train from freshly initialized parameters.
pub fn train(
    samples: &[PreparedSample],
    partition: &CategoryPartition,
    cfg: &TrainConfig,
    feature_cfg: &FeatureConfig,
    opts: &TrainOptions,
) -> Result<(ModelParams, TrainLog)> {
    let params = init_params(cfg, partition, feature_cfg)?;
    train_from(params, samples, cfg, feature_cfg, opts)
}

/// Continue training `params`.
pub fn train_from(
    mut params: ModelParams,
    samples: &[PreparedSample],
    cfg: &TrainConfig,
    feature_cfg: &FeatureConfig,
    opts: &TrainOptions,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    feature_cfg.validate()?;
    if samples.is_empty() {
        return Err(CpcError::EmptyDataset);
    }
    params.check_shapes(feature_cfg, params.clusters())?;
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| CpcError::io(dir, e))?;
    }
    let loss_cfg = cfg.loss_config();
    let mut adam = AdamState {
        m: params.zeros_like(),
        v: params.zeros_like(),
        t: 0,
    };
    let mut log = TrainLog::default();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        let (mut sum_mce, mut sum_total, mut epoch_steps) = (0.0, 0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let results: Vec<(LossBreakdown, ModelParams)> = batch
                .par_iter()
                .map(|&i| {
                    sample_objective(&params, &samples[i], feature_cfg, &loss_cfg).map_err(|e| {
                        if e.is_numeric() {
                            log::error!("step {step}, sample `{}`: {e}", samples[i].image_id);
                            CpcError::Diverged {
                                step,
                                sample: samples[i].image_id.clone(),
                            }
                        } else {
                            e
                        }
                    })
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad = params.zeros_like();
            let mut rec = StepRecord {
                step,
                epoch,
                lr,
                mce: 0.0,
                pce_sum: 0.0,
                total: 0.0,
                grad_norm: 0.0,
            };
            for (&i, (b, g)) in batch.iter().zip(&results) {
                if !b.total.is_finite() || !g.is_finite() {
                    return Err(CpcError::Diverged {
                        step,
                        sample: samples[i].image_id.clone(),
                    });
                }
                grad.add_scaled(g, scale);
                rec.mce += b.mce * scale;
                rec.pce_sum += b.pce_sum() * scale;
                rec.total += b.total * scale;
            }
            rec.grad_norm = grad.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt();
            apply_update(&mut params, &grad, lr, &cfg.optimizer, &mut adam);
            if !params.is_finite() {
                return Err(CpcError::Diverged {
                    step,
                    sample: samples[batch[0]].image_id.clone(),
                });
            }
            sum_mce += rec.mce;
            sum_total += rec.total;
            epoch_steps += 1;
            log.records.push(LogRecord::Step(rec));
            step += 1;
        }
        finish_epoch(&mut log, &params, samples, feature_cfg, opts, epoch, epoch_steps, sum_mce, sum_total)?;
    }
    if cfg.max_steps.is_some_and(|m| step >= m) {
        // Close out an epoch cut short by the step budget.
        let last = log.epochs().last().map(|e| e.epoch + 1).unwrap_or(0);
        let tail: Vec<&StepRecord> = log.steps().filter(|s| s.epoch >= last).collect();
        if !tail.is_empty() {
            let n = tail.len();
            let (m, t) = tail.iter().fold((0.0, 0.0), |acc, s| (acc.0 + s.mce, acc.1 + s.total));
            finish_epoch(&mut log, &params, samples, feature_cfg, opts, last, n, m, t)?;
        }
    }
    Ok((params, log))
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    log: &mut TrainLog,
    params: &ModelParams,
    samples: &[PreparedSample],
    feature_cfg: &FeatureConfig,
    opts: &TrainOptions,
    epoch: usize,
    steps: usize,
    sum_mce: f64,
    sum_total: f64,
) -> Result<()> {
    let probe = if opts.probe {
        probe_miou(params, samples, feature_cfg)?
    } else {
        None
    };
    let n = steps.max(1) as f64;
    log.records.push(LogRecord::Epoch(EpochRecord {
        epoch,
        steps,
        mean_mce: sum_mce / n,
        mean_total: sum_total / n,
        probe_miou: probe,
    }));
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(params, dir.join(format!("epoch_{epoch:03}.cpcm")))?;
    }
    Ok(())
}
