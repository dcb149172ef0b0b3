//! Command implementations behind the `cpc` binary.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use cpc_core::clustering::{
    self_refine_traced, write_transcript, CategoryList, CategoryPartition, ChatClient, HttpChatClient,
    MockClient, MockFixtures, PromptTemplates, Recording, RefineOutcome,
};
use cpc_core::dataio::{class_names, gen_synthetic, load_dataset, read_manifest, read_pgm, Sample};
use cpc_core::evaluation::{ConfusionMatrix, EvalReport};
use cpc_core::gradcheck::{run_gradcheck, GradCheckSummary};
use cpc_core::inference::{argmax_labels, crf_refine, predict_pixels, resize_image, write_mask};
use cpc_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use cpc_core::model::{FeatureProvider, ModelParams};
use cpc_core::trainer::{dataset_loss, prepare_samples, train, MeanLoss, TrainLog, TrainOptions};
use cpc_core::{CpcError, Result};
use rayon::prelude::*;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "cpc", version, about = "Weakly supervised segmentation with category clusters")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Worker thread cap; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Group categories into clusters with an LLM and write the partition.
    Cluster,
    /// Write a synthetic dataset.
    GenData,
    /// Train and write the final checkpoint and a JSONL log.
    Train,
    /// Write one mask and palette per image.
    Infer,
    /// Score predicted masks against ground truth.
    Eval,
    /// Compare analytic and finite-difference gradients on the toy model.
    Gradcheck {
        /// Perturb the analytic gradient so the check must fail.
        #[arg(long, hide = true)]
        sabotage: bool,
    },
}

/// Exit code for an error: 1 config, 2 I/O or external, 3 numeric.
pub fn exit_code(err: &CpcError) -> i32 {
    match err {
        CpcError::Config(_) => 1,
        e if e.is_numeric() => 3,
        CpcError::StaleCache => 3,
        _ => 2,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CpcError + '_ {
    move |e| CpcError::io(path, e)
}

/// Split `--section.key=value` overrides from the arguments clap parses.
pub fn split_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<(String, toml::Value)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for a in args {
        match a.to_str().and_then(config::parse_override) {
            Some(o) => overrides.push(o),
            None => rest.push(a),
        }
    }
    (rest, overrides)
}

/// Parse arguments, run the command and return the process exit code.
pub fn run_main(args: impl IntoIterator<Item = OsString>) -> i32 {
    let (rest, overrides) = split_overrides(args.into_iter().collect());
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli, &overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Load the configuration and run the command inside a sized thread pool.
pub fn execute(cli: &Cli, overrides: &[(String, toml::Value)]) -> Result<i32> {
    let cfg = RunConfig::load(cli.config.as_deref(), overrides)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CpcError::Config("--threads must be >= 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CpcError::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cli.command, &cfg))
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<i32> {
    match command {
        Command::Cluster => {
            let out = cmd_cluster(cfg)?;
            println!(
                "partition: {} clusters, {} refine calls, converged {}",
                out.partition.len(),
                out.refine_calls,
                out.converged
            );
            println!("wrote {}", cfg.paths.partition.display());
        }
        Command::GenData => {
            let manifest = cmd_gen_data(cfg)?;
            println!("wrote {} images, manifest {}", cfg.synth.count, manifest.display());
        }
        Command::Train => {
            let out = cmd_train(cfg)?;
            println!(
                "steps {} final mce {:.6} pce {:.6} total {:.6}",
                out.log.steps().count(),
                out.final_loss.mce,
                out.final_loss.pce_sum,
                out.final_loss.total
            );
            println!("wrote {}", cfg.paths.checkpoint.display());
        }
        Command::Infer => {
            let masks = cmd_infer(cfg)?;
            println!("wrote {} masks to {}", masks.len(), cfg.paths.predictions_dir().display());
        }
        Command::Eval => {
            let report = cmd_eval(cfg)?;
            for (name, iou) in &report.per_class {
                println!("{name:>16} {iou:.4}");
            }
            println!("mIoU {:.4}", report.miou);
        }
        Command::Gradcheck { sabotage } => {
            let s = cmd_gradcheck(cfg, *sabotage)?;
            for o in &s.outcomes {
                match &o.report {
                    Some(r) => println!(
                        "seed {}: max rel error {:.3e} at parameter {} (pairs {}+/{}-)",
                        o.seed, r.max_rel_error, r.worst_param_index, o.pair_counts.0, o.pair_counts.1
                    ),
                    None => println!("seed {}: skipped, probability near a threshold", o.seed),
                }
            }
            if let Some((seed, r)) = s.worst() {
                println!(
                    "max rel error {:.3e} (seed {seed}, parameter {}), tolerance {:.1e}",
                    s.max_rel_error, r.worst_param_index, s.tolerance
                );
            }
            if !s.passed {
                eprintln!("gradcheck failed");
                return Ok(3);
            }
            println!("gradcheck passed");
        }
    }
    Ok(0)
}

/// Run self-refinement and write the partition and a transcript of every query.
pub fn cmd_cluster(cfg: &RunConfig) -> Result<RefineOutcome> {
    cfg.llm.validate()?;
    let categories = CategoryList::from_file(&cfg.paths.categories)?;
    let templates = PromptTemplates::load(
        cfg.paths.generate_prompt.as_deref(),
        cfg.paths.refine_prompt.as_deref(),
    )?;
    let out_dir = &cfg.paths.output_dir;
    let outcome = if cfg.llm.is_mock() {
        let path = cfg
            .llm
            .fixture_path
            .as_ref()
            .ok_or_else(|| CpcError::Config("mock llm needs llm.fixture_path".into()))?;
        run_refine(MockClient::new(MockFixtures::load(path)?), &categories, &templates, cfg)?
    } else {
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let client = HttpChatClient::from_env(&cfg.llm)?.with_transcript(out_dir.join("llm_raw.jsonl"));
        run_refine(client, &categories, &templates, cfg)?
    };
    cfg.write_snapshot(out_dir, "cluster")?;
    if let Some(dir) = cfg.paths.partition.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    outcome.0.partition.save(&cfg.paths.partition)?;
    write_transcript(out_dir.join("cluster_transcript.jsonl"), &outcome.1)?;
    Ok(outcome.0)
}

fn run_refine<C: ChatClient>(
    client: C,
    categories: &CategoryList,
    templates: &PromptTemplates,
    cfg: &RunConfig,
) -> Result<(RefineOutcome, Vec<cpc_core::clustering::TranscriptEntry>)> {
    let mut rec = Recording::new(client);
    let out = self_refine_traced(&mut rec, categories, templates, &cfg.llm)?;
    Ok((out, rec.into_entries()))
}

/// Write the synthetic dataset into `paths.data_dir`; returns the manifest path.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.synth.validate()?;
    let manifest = gen_synthetic(&cfg.synth, &cfg.paths.data_dir)?;
    cfg.write_snapshot(&cfg.paths.data_dir, "gen-data")?;
    Ok(manifest)
}

struct ModelInputs {
    categories: CategoryList,
    partition: CategoryPartition,
    samples: Vec<Sample>,
    provider: FeatureProvider,
}

fn load_model_inputs(cfg: &RunConfig) -> Result<ModelInputs> {
    cfg.validate_model()?;
    let categories = CategoryList::from_file(&cfg.paths.categories)?;
    cfg.check_class_count(categories.len())?;
    let partition = CategoryPartition::load(&cfg.paths.partition, &categories)?;
    let samples = load_dataset(&cfg.paths.manifest, &categories)?;
    let provider = cfg.provider()?;
    Ok(ModelInputs {
        categories,
        partition,
        samples,
        provider,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
    /// Dataset-mean losses of the final parameters.
    pub final_loss: MeanLoss,
}

/// Train, then write the final checkpoint, per-epoch checkpoints and the log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let inputs = load_model_inputs(cfg)?;
    let prepared = prepare_samples(
        &inputs.samples,
        &inputs.partition,
        &inputs.categories,
        &cfg.feature,
        &inputs.provider,
    )?;
    let out_dir = &cfg.paths.output_dir;
    let opts = TrainOptions {
        checkpoint_dir: Some(out_dir.join("checkpoints")),
        probe: true,
    };
    cfg.write_snapshot(out_dir, "train")?;
    let (params, log) = train(&prepared, &inputs.partition, &cfg.train, &cfg.feature, &opts)?;
    let final_loss = dataset_loss(&params, &prepared, &cfg.feature, &cfg.train.loss_config())?;
    if let Some(dir) = cfg.paths.checkpoint.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    save_checkpoint(&params, &cfg.paths.checkpoint)?;
    log.write_jsonl(out_dir.join("train_log.jsonl"))?;
    Ok(TrainOutcome {
        params,
        log,
        final_loss,
    })
}

fn load_params(cfg: &RunConfig, clusters: usize) -> Result<ModelParams> {
    let (dims, params) = load_checkpoint(&cfg.paths.checkpoint)?;
    let f = &cfg.feature;
    if dims.clusters != clusters
        || dims.cluster_dim != f.cluster_dim
        || dims.feature_dim != f.feature_dim
        || dims.class_count != f.class_count
    {
        return Err(CpcError::Shape(format!(
            "checkpoint {} has L={} H={} e={} C={}, configuration needs L={clusters} H={} e={} C={}",
            cfg.paths.checkpoint.display(),
            dims.clusters,
            dims.cluster_dim,
            dims.feature_dim,
            dims.class_count,
            f.cluster_dim,
            f.feature_dim,
            f.class_count
        )));
    }
    params.check_shapes(f, clusters)?;
    Ok(params)
}

/// Predict, refine with the CRF and write `<image_id>.pgm` masks.
pub fn cmd_infer(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let inputs = load_model_inputs(cfg)?;
    let params = load_params(cfg, inputs.partition.len())?;
    let names = class_names(&inputs.categories);
    let dir = cfg.paths.predictions_dir();
    let up = cfg.infer.upscale;
    // One image at a time: the CRF parallelizes internally and holds a dense kernel.
    let masks: Vec<_> = inputs
        .samples
        .iter()
        .map(|s| {
            let probs = predict_pixels(s, &inputs.partition, &params, &cfg.feature, &inputs.provider, up)?;
            let image = resize_image(&s.image, s.image.height() * up, s.image.width() * up)?;
            let refined = crf_refine(&image, &probs, &cfg.crf)?;
            Ok((s.image_id.clone(), argmax_labels(&refined)?))
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    cfg.write_snapshot(&cfg.paths.output_dir, "infer")?;
    masks
        .iter()
        .map(|(id, mask)| {
            let path = dir.join(format!("{id}.pgm"));
            write_mask(mask, &names, &path)?;
            Ok(path)
        })
        .collect()
}

/// Score `<predictions>/<image_id>.pgm` against the ground truth of every
/// manifest entry and write `eval_report.json`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let categories = CategoryList::from_file(&cfg.paths.categories)?;
    let names = class_names(&categories);
    let entries = read_manifest(&cfg.paths.manifest)?;
    if entries.is_empty() {
        return Err(CpcError::EmptyDataset);
    }
    let base = cfg.paths.manifest.parent().unwrap_or(Path::new("."));
    let pred_dir = cfg.paths.predictions_dir();
    let parts: Vec<ConfusionMatrix> = entries
        .par_iter()
        .map(|e| {
            let gt_path = match (&cfg.paths.ground_truth, &e.gt_mask_path) {
                (Some(dir), _) => dir.join(format!("{}.pgm", e.image_id)),
                (None, Some(p)) if p.is_absolute() => p.clone(),
                (None, Some(p)) => base.join(p),
                (None, None) => {
                    return Err(CpcError::format(
                        &cfg.paths.manifest,
                        format!("image `{}` has no ground-truth mask", e.image_id),
                    ))
                }
            };
            let gt = read_pgm(&gt_path)?;
            let pred = read_pgm(pred_dir.join(format!("{}.pgm", e.image_id)))?;
            let mut cm = ConfusionMatrix::new(names.len(), None);
            cm.accumulate(&pred, &gt)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(names.len(), None);
    for cm in &parts {
        total.merge(cm)?;
    }
    let report = EvalReport::from_confusion(&total, &names)?;
    let out_dir = &cfg.paths.output_dir;
    cfg.write_snapshot(out_dir, "eval")?;
    report.write(out_dir.join("eval_report.json"))?;
    Ok(report)
}

/// Run the finite-difference check; non-finite values are errors.
pub fn cmd_gradcheck(cfg: &RunConfig, sabotage: bool) -> Result<GradCheckSummary> {
    let s = run_gradcheck(&cfg.gradcheck, sabotage)?;
    if !s.max_rel_error.is_finite() {
        return Err(CpcError::NonFinite("gradcheck relative error".into()));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&CpcError::Config("x".into())), 1);
        assert_eq!(exit_code(&CpcError::io("p", std::io::Error::other("x"))), 2);
        assert_eq!(exit_code(&CpcError::Transport("x".into())), 2);
        assert_eq!(exit_code(&CpcError::NonFinite("x".into())), 3);
        assert_eq!(
            exit_code(&CpcError::Diverged {
                step: 0,
                sample: "a".into()
            }),
            3
        );
    }

    #[test]
    fn overrides_are_split_from_clap_args() {
        let args: Vec<OsString> = ["cpc", "--train.eps=0.7", "--threads", "2", "train"]
            .iter()
            .map(OsString::from)
            .collect();
        let (rest, ov) = split_overrides(args);
        assert_eq!(rest, ["cpc", "--threads", "2", "train"].map(OsString::from).to_vec());
        assert_eq!(ov.len(), 1);
        let cli = Cli::try_parse_from(rest).unwrap();
        assert_eq!(cli.threads, Some(2));
        assert!(matches!(cli.command, Command::Train));
    }
}
