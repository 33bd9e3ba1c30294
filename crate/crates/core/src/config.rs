//! Run configuration files (TOML).
//!
//! Every section is optional. Model hyperparameters, the feature set and the
//! time-signature filter fall back to the chosen experiment preset; explicit
//! values in the file win over the preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{PaddingMode, TrackSelection, DEFAULT_CHUNK_LEN};
use crate::experiment::Experiment;
use crate::features::FeatureConfig;
use crate::generation::GenConfig;
use crate::midi::TimeSignature;
use crate::nn::{LossConfig, OptConfig};
use crate::training::{GridSpec, SplitSpec, TrainConfig};

/// Environment variable naming the default corpus directory.
pub const DATA_ENV: &str = "TEMPOSTRUCT_DATA";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Directory of MIDI files; defaults to `$TEMPOSTRUCT_DATA`.
    pub root: Option<PathBuf>,
    /// Manifest written by `ingest`, used instead of rescanning `root`.
    pub manifest: Option<PathBuf>,
    /// Train on a stratified subset of about this many pieces.
    pub subset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub seed: u64,
    pub time_signature: Option<TimeSignature>,
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self {
            train_fraction: s.train_fraction,
            seed: s.seed,
            time_signature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingSection {
    pub tracks: TrackSelection,
    pub chunk_len: usize,
    pub padding: PaddingMode,
}

impl Default for EncodingSection {
    fn default() -> Self {
        Self {
            tracks: TrackSelection::Auto,
            chunk_len: DEFAULT_CHUNK_LEN,
            padding: PaddingMode::Masked,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: Option<usize>,
    pub hidden_size: Option<usize>,
    pub dropout_keep: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Melody weight of the loss.
    pub alpha: f64,
    /// Grid cells trained in parallel.
    pub jobs: usize,
    pub grid: GridSpec,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: t.seed,
            alpha: t.loss.alpha,
            jobs: 1,
            grid: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub experiment: Option<Experiment>,
    pub corpus: CorpusSection,
    pub split: SplitSection,
    pub encoding: EncodingSection,
    pub features: Option<FeatureConfig>,
    pub model: ModelSection,
    pub optimizer: OptConfig,
    pub training: TrainingSection,
    pub generation: GenConfig,
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub experiment: Experiment,
    pub corpus: CorpusSection,
    pub split: SplitSpec,
    pub tracks: TrackSelection,
    pub jobs: usize,
    pub train: TrainConfig,
    pub grid: GridSpec,
    pub generation: GenConfig,
}

impl RunConfigFile {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Applies the experiment preset and command-line overrides.
    /// `experiment` and `seed` win over the file.
    pub fn resolve(&self, experiment: Option<Experiment>, seed: Option<u64>) -> Result<ResolvedConfig, ConfigError> {
        let experiment = experiment.or(self.experiment).unwrap_or(Experiment::Baseline);
        let preset = TrainConfig::for_experiment(experiment);
        let t = &self.training;
        let train = TrainConfig {
            num_layers: self.model.num_layers.unwrap_or(preset.num_layers),
            hidden_size: self.model.hidden_size.unwrap_or(preset.hidden_size),
            dropout_keep: self.model.dropout_keep.unwrap_or(preset.dropout_keep),
            features: self.features.unwrap_or(preset.features),
            loss: LossConfig { alpha: t.alpha },
            optimizer: self.optimizer,
            batch_size: t.batch_size,
            chunk_len: self.encoding.chunk_len,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: seed.unwrap_or(t.seed),
            padding: self.encoding.padding,
        };
        train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let split = SplitSpec {
            train_fraction: self.split.train_fraction,
            seed: self.split.seed,
            time_signature: self.split.time_signature.or(experiment.time_signature_filter()),
        };
        if !(split.train_fraction > 0.0 && split.train_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "split.train_fraction {} outside (0, 1)",
                split.train_fraction
            )));
        }
        if t.jobs == 0 {
            return Err(ConfigError::Invalid("training.jobs must be at least 1".into()));
        }
        let generation = GenConfig {
            seed: seed.unwrap_or(self.generation.seed),
            ..self.generation.clone()
        };
        generation.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut corpus = self.corpus.clone();
        if corpus.root.is_none() {
            corpus.root = std::env::var_os(DATA_ENV).map(PathBuf::from);
        }
        Ok(ResolvedConfig {
            experiment,
            corpus,
            split,
            tracks: self.encoding.tracks.clone(),
            jobs: t.jobs,
            train,
            grid: t.grid.clone(),
            generation,
        })
    }
}

impl ResolvedConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }
}
