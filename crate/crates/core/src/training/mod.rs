//! Corpus splitting, the training loop with early stopping, and grid search.

mod data;
mod grid;
mod run;
mod split;
mod trainer;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::corpus::CorpusError;
use crate::encoding::{EncodeError, PaddingMode, DEFAULT_CHUNK_LEN};
use crate::experiment::Experiment;
use crate::features::{FeatureConfig, FeatureError};
use crate::harmony::HarmonyError;
use crate::nn::{LossConfig, ModelShape, NnError, OptConfig};

pub use data::{load_split, prepare_data, LoadedSplit, PreparedData};
pub use grid::{grid_search, GridCell, GridReport, GridRun, GridSpec};
pub use run::{run_epochs, EarlyStopping, EpochMetrics, EpochRunner, RunRecord, StopDecision};
pub use split::{split_corpus, stratified_subset, Split, SplitSpec};
pub use trainer::{evaluate, train, train_prepared, TrainOutcome, CHECKPOINT_FILE, METRICS_FILE};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no songs left after filtering")]
    EmptyCorpus,
    #[error("loss became {loss} in epoch {epoch}")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Harmony(#[from] HarmonyError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TrainError {
        let path = path.into();
        move |source| TrainError::Io { path, source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub dropout_keep: f64,
    pub features: FeatureConfig,
    pub loss: LossConfig,
    pub optimizer: OptConfig,
    pub batch_size: usize,
    pub chunk_len: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub padding: PaddingMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_experiment(Experiment::Baseline)
    }
}

impl TrainConfig {
    /// Feature set and best reported grid cell of `experiment`.
    pub fn for_experiment(experiment: Experiment) -> Self {
        let r = experiment.reference();
        Self {
            num_layers: r.num_layers,
            hidden_size: r.hidden_size,
            dropout_keep: r.dropout_keep,
            features: experiment.features(),
            loss: LossConfig::default(),
            optimizer: OptConfig::default(),
            batch_size: 32,
            chunk_len: DEFAULT_CHUNK_LEN,
            max_epochs: 200,
            patience: 15,
            seed: 0,
            padding: PaddingMode::Masked,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.chunk_len < 2 {
            return bad(format!("chunk_len {} is below 2", self.chunk_len));
        }
        if self.optimizer.learning_rate.is_nan()
            || self.optimizer.learning_rate <= 0.0
            || !(0.0..1.0).contains(&self.optimizer.decay)
        {
            return bad("learning_rate must be positive and decay in [0, 1)".into());
        }
        self.features.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn shape(&self, input_dim: usize, harmony_classes: usize) -> ModelShape {
        ModelShape {
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            input_dim,
            melody_classes: crate::encoding::MELODY_CLASSES,
            harmony_classes,
            dropout_keep: self.dropout_keep,
        }
    }
}
