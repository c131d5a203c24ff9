//! The run configuration: one JSON document with a section per pipeline
//! stage. Unknown keys are rejected and missing keys take their defaults.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::inference::InferConfig;
use crate::metrics::MetricsConfig;
use crate::net::UNetConfig;
use crate::patch_plan::{PatchSpec, DEFAULT_FG_PROBABILITY};
use crate::preprocess::PreprocessConfig;
use crate::synth::SynthConfig;
use crate::trainer::{OptimizerConfig, TrainRunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub folds: usize,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    /// Probability that a sampled training patch is centred on foreground.
    pub fg_probability: f64,
    /// Validation Dice every this many epochs; 0 disables it.
    pub validate_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            folds: 5,
            epochs: 50,
            iterations_per_epoch: 25,
            fg_probability: DEFAULT_FG_PROBABILITY,
            validate_every: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory of input images.
    pub images: Option<PathBuf>,
    /// Directory of reference label masks, matched to images by file stem.
    pub labels: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every random stream in a run is derived from this value.
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub patch: PatchSpec,
    pub net: UNetConfig,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub train: TrainSection,
    pub infer: InferConfig,
    pub metrics: MetricsConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Desk-scale preset for the synthetic sphere benchmark: 0.5 mm
    /// spacing kept as is, a 3-level network with 4 base channels, and
    /// 32^3 patches in batches of 2.
    pub fn synthetic() -> Self {
        RunConfig {
            seed: 2024,
            preprocess: PreprocessConfig {
                target_spacing: [0.5; 3],
                ..Default::default()
            },
            patch: PatchSpec {
                patch_size: [32; 3],
                batch_size: 2,
                num_resolutions: 3,
                ..Default::default()
            },
            net: UNetConfig::toy(3, 4),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.metrics.validate()?;
        self.synth.validate()?;
        if self.train.folds < 2 {
            return Err(Error::Config(format!(
                "train.folds must be at least 2, got {}",
                self.train.folds
            )));
        }
        self.train_config().validate()
    }

    /// The trainer's view of this config.
    pub fn train_config(&self) -> TrainRunConfig {
        TrainRunConfig {
            epochs: self.train.epochs,
            iterations_per_epoch: self.train.iterations_per_epoch,
            patch: self.patch,
            net: self.net.clone(),
            optimizer: self.optimizer,
            augment: self.augment,
            fg_probability: self.train.fg_probability,
            validate_every: self.train.validate_every,
            validation: self.infer,
            seed: self.seed,
        }
    }

    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Pretty JSON with every default spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn json_schema() -> String {
        let schema = schemars::schema_for!(RunConfig);
        serde_json::to_string_pretty(&schema).expect("schema serialises")
    }
}
