//! Experiment configuration: one strict-schema JSON document describing the
//! data source, preprocessing, model, training, evaluation and explanation
//! settings. Unknown keys are rejected and all paths are resolved relative
//! to the config file.

use crate::error::{CliError, CODE_CONFIG};
use neurovol::nets::NetConfig;
use neurovol::training::TrainConfig;
use neurovol::volume::{AgeDistribution, PhantomSpec};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub model: Option<NetConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub explain: ExplainSection,
    pub output_dir: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub manifest: Option<String>,
    #[serde(default)]
    pub phantom: Option<PhantomSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub n: usize,
    #[serde(default = "default_sex_ratio")]
    pub sex_ratio: f64,
    #[serde(default = "default_age_distribution")]
    pub age_distribution: AgeDistribution,
    #[serde(default = "default_cohort_tag")]
    pub cohort: String,
    pub spec: PhantomSpec,
}

fn default_sex_ratio() -> f64 {
    0.5
}
fn default_age_distribution() -> AgeDistribution {
    AgeDistribution::Uniform
}
fn default_cohort_tag() -> String {
    "synth".to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Center-crop target (D, H, W); omitted means no crop.
    #[serde(default)]
    pub crop: Option<[usize; 3]>,
    #[serde(default = "default_true")]
    pub znormalize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { crop: None, znormalize: true }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_bootstrap_seed")]
    pub bootstrap_seed: u64,
    #[serde(default = "default_bootstrap_samples")]
    pub bootstrap_samples: usize,
}

fn default_bootstrap_seed() -> u64 {
    7
}
fn default_bootstrap_samples() -> usize {
    1000
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { bootstrap_seed: default_bootstrap_seed(), bootstrap_samples: default_bootstrap_samples() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
    #[serde(default = "default_mosaic_gap")]
    pub mosaic_gap: usize,
}

fn default_k() -> usize {
    5
}
fn default_threshold() -> f32 {
    neurovol::explain::DEFAULT_SALIENCY_THRESHOLD
}
fn default_mosaic_gap() -> usize {
    10
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self { k: default_k(), threshold: default_threshold(), mosaic_gap: default_mosaic_gap() }
    }
}

/// A loaded config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    /// Raw bytes for hashing into the run manifest.
    pub raw: Vec<u8>,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read(path)
            .map_err(|e| CliError::new(CODE_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_slice(&raw)
            .map_err(|e| CliError::new(CODE_CONFIG, format!("config {}: {e}", path.display())))?;
        if config.data.manifest.is_some() == config.data.phantom.is_some() {
            return Err(CliError::new(
                CODE_CONFIG,
                "config data section must set exactly one of `manifest` or `phantom`",
            ));
        }
        if let Some(p) = &config.data.phantom {
            p.spec
                .validate()
                .map_err(|e| CliError::new(CODE_CONFIG, format!("phantom spec: {e}")))?;
            if !(0.0..=1.0).contains(&p.sex_ratio) {
                return Err(CliError::new(CODE_CONFIG, format!("sex_ratio {} outside [0, 1]", p.sex_ratio)));
            }
        }
        config.train.validate().map_err(|e| CliError::new(CODE_CONFIG, format!("train section: {e}")))?;
        let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(Self { config, base_dir, raw })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        match override_dir {
            Some(d) => d.to_path_buf(),
            None => self.resolve(&self.config.output_dir),
        }
    }

    pub fn crop_target(&self) -> Option<(usize, usize, usize)> {
        self.config.preprocess.crop.map(|c| (c[0], c[1], c[2]))
    }
}
