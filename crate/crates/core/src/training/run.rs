use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,valid_loss,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.3}",
            self.epoch, self.train_loss, self.valid_loss, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stop_epoch: usize,
    /// Whether the patience rule, rather than `max_epochs`, ended the run.
    pub stopped_early: bool,
    pub checkpoint_path: Option<PathBuf>,
}

impl RunRecord {
    pub fn best(&self) -> Option<&EpochMetrics> {
        self.epochs.iter().find(|m| m.epoch == self.best_epoch)
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|m| m.seconds).sum::<f64>() / self.epochs.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(EpochMetrics::CSV_HEADER);
        out.push('\n');
        for m in &self.epochs {
            let _ = writeln!(out, "{}", m.csv_row());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` epochs pass without a strictly lower validation
/// loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, valid_loss: f64) -> StopDecision {
        if valid_loss < self.best_loss {
            self.best_loss = valid_loss;
            self.best_epoch = epoch;
            StopDecision::Improved
        } else if epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// One model under training, driven epoch by epoch by [`run_epochs`].
pub trait EpochRunner {
    /// One pass over the training data; returns the mean training loss.
    fn train_epoch(&mut self, epoch: usize) -> Result<f64, TrainError>;

    /// Validation loss with dropout disabled.
    fn validate(&mut self) -> Result<f64, TrainError>;

    /// Called after each epoch, before any improvement callback.
    fn on_epoch(&mut self, _metrics: &EpochMetrics) -> Result<(), TrainError> {
        Ok(())
    }

    /// Called when `epoch` sets a new best validation loss. Returns the path
    /// of a saved checkpoint, if any.
    fn on_improvement(&mut self, _epoch: usize, _valid_loss: f64) -> Result<Option<PathBuf>, TrainError> {
        Ok(None)
    }
}

pub fn run_epochs<R: EpochRunner + ?Sized>(
    runner: &mut R,
    max_epochs: usize,
    patience: usize,
) -> Result<RunRecord, TrainError> {
    if patience == 0 {
        return Err(TrainError::InvalidConfig("patience must be at least 1".into()));
    }
    let mut stopper = EarlyStopping::new(patience);
    let mut record = RunRecord {
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid_loss: f64::INFINITY,
        stop_epoch: 0,
        stopped_early: false,
        checkpoint_path: None,
    };
    for epoch in 1..=max_epochs {
        let start = Instant::now();
        let train_loss = runner.train_epoch(epoch)?;
        let valid_loss = runner.validate()?;
        for loss in [train_loss, valid_loss] {
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, loss });
            }
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss,
            valid_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.5} valid {valid_loss:.5} ({:.1}s)",
            metrics.seconds
        );
        record.epochs.push(metrics);
        record.stop_epoch = epoch;
        runner.on_epoch(&metrics)?;
        match stopper.observe(epoch, valid_loss) {
            StopDecision::Improved => {
                record.best_epoch = epoch;
                record.best_valid_loss = valid_loss;
                if let Some(path) = runner.on_improvement(epoch, valid_loss)? {
                    record.checkpoint_path = Some(path);
                }
            }
            StopDecision::Stop => {
                record.stopped_early = true;
                break;
            }
            StopDecision::Continue => {}
        }
    }
    Ok(record)
}
