//! Run configuration: one TOML file with a section per component, plus
//! `--section.key=value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use cpc_core::clustering::LlmClientConfig;
use cpc_core::dataio::SynthConfig;
use cpc_core::gradcheck::GradCheckConfig;
use cpc_core::inference::CrfConfig;
use cpc_core::model::{FeatureConfig, FeatureProvider};
use cpc_core::trainer::TrainConfig;
use cpc_core::{CpcError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    RandomProjection,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Projection seed for `random-projection`.
    pub seed: u64,
    /// Standardize `random-projection` features per image.
    pub standardize: bool,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::RandomProjection,
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Output masks at this multiple of the input resolution.
    pub upscale: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { upscale: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory `gen-data` writes the synthetic dataset into.
    pub data_dir: PathBuf,
    pub categories: PathBuf,
    pub manifest: PathBuf,
    pub partition: PathBuf,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    /// Feature file for the `file` provider.
    pub features: Option<PathBuf>,
    /// Masks scored by `eval`; defaults to `<output_dir>/masks`.
    pub predictions: Option<PathBuf>,
    /// Ground-truth masks named `<image_id>.pgm`; defaults to the manifest's masks.
    pub ground_truth: Option<PathBuf>,
    pub generate_prompt: Option<PathBuf>,
    pub refine_prompt: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            categories: "data/categories.txt".into(),
            manifest: "data/manifest.json".into(),
            partition: "out/partition.json".into(),
            checkpoint: "out/model.cpcm".into(),
            output_dir: "out".into(),
            features: None,
            predictions: None,
            ground_truth: None,
            generate_prompt: None,
            refine_prompt: None,
        }
    }
}

impl PathsConfig {
    pub fn predictions_dir(&self) -> PathBuf {
        self.predictions
            .clone()
            .unwrap_or_else(|| self.output_dir.join("masks"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub feature: FeatureConfig,
    pub provider: ProviderConfig,
    pub train: TrainConfig,
    pub crf: CrfConfig,
    pub infer: InferConfig,
    pub synth: SynthConfig,
    pub llm: LlmClientConfig,
    pub gradcheck: GradCheckConfig,
    pub paths: PathsConfig,
}


/// Parse a `--section.key=value` argument into a dotted key and a value.
pub fn parse_override(arg: &str) -> Option<(String, toml::Value)> {
    let body = arg.strip_prefix("--")?;
    let (key, raw) = body.split_once('=')?;
    if !key.contains('.') || key.starts_with('.') || key.ends_with('.') {
        return None;
    }
    Some((key.to_string(), parse_value(raw)))
}

/// TOML literal if `raw` parses as one, else a plain string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CpcError::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    Ok(())
}

impl RunConfig {
    /// Load `path` (or defaults when `None`) and apply overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CpcError::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CpcError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            apply_override(&mut table, k, v.clone())?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CpcError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CpcError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Cross-field checks shared by every command that touches the model.
    pub fn validate_model(&self) -> Result<()> {
        self.feature.validate()?;
        if self.train.eps <= 0.5 || self.train.eps >= 1.0 {
            return Err(CpcError::Config(format!(
                "epsilon must exceed 0.5 and be below 1, got {}",
                self.train.eps
            )));
        }
        self.train.validate()?;
        self.crf.validate()?;
        if self.infer.upscale == 0 {
            return Err(CpcError::Config("infer.upscale must be >= 1".into()));
        }
        if self.provider.kind == ProviderKind::File && self.paths.features.is_none() {
            return Err(CpcError::Config("provider `file` needs paths.features".into()));
        }
        Ok(())
    }

    /// Category count must match the classifier width.
    pub fn check_class_count(&self, categories: usize) -> Result<()> {
        if self.feature.class_count != categories + 1 {
            return Err(CpcError::Config(format!(
                "feature.class_count is {} but {categories} categories plus background need {}",
                self.feature.class_count,
                categories + 1
            )));
        }
        Ok(())
    }

    pub fn provider(&self) -> Result<FeatureProvider> {
        match self.provider.kind {
            ProviderKind::RandomProjection if self.provider.standardize => Ok(
                FeatureProvider::random_projection(self.provider.seed, &self.feature),
            ),
            ProviderKind::RandomProjection => Ok(FeatureProvider::random_projection_raw(
                self.provider.seed,
                &self.feature,
            )),
            ProviderKind::File => {
                let path = self
                    .paths
                    .features
                    .as_ref()
                    .ok_or_else(|| CpcError::Config("provider `file` needs paths.features".into()))?;
                FeatureProvider::from_file(path)
            }
        }
    }

    /// Write the resolved configuration next to a command's outputs.
    pub fn write_snapshot(&self, dir: &Path, command: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| CpcError::io(dir, e))?;
        let path = dir.join(format!("{command}.resolved.toml"));
        fs::write(&path, self.to_toml()).map_err(|e| CpcError::io(&path, e))?;
        Ok(path)
    }
}
