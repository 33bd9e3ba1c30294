use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::PreparedData;
use super::run::RunRecord;
use super::trainer::{train_prepared, TrainOutcome};
use super::{TrainConfig, TrainError};
use crate::checkpoint::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub num_layers: Vec<usize>,
    pub hidden_sizes: Vec<usize>,
    pub dropout_keeps: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            num_layers: vec![1, 2],
            hidden_sizes: vec![100, 150, 200],
            dropout_keeps: vec![0.75, 0.5, 0.3],
        }
    }
}

impl GridSpec {
    /// A grid holding only `config`'s own hyperparameters.
    pub fn single(config: &TrainConfig) -> Self {
        Self {
            num_layers: vec![config.num_layers],
            hidden_sizes: vec![config.hidden_size],
            dropout_keeps: vec![config.dropout_keep],
        }
    }

    /// Cells in layers-major order. Cell `i` trains with seed
    /// `seed + i * GOLDEN`, so cell 0 reuses the base seed.
    pub fn cells(&self, seed: u64) -> Vec<GridCell> {
        const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
        let mut cells = Vec::new();
        for &num_layers in &self.num_layers {
            for &hidden_size in &self.hidden_sizes {
                for &dropout_keep in &self.dropout_keeps {
                    let index = cells.len();
                    cells.push(GridCell {
                        index,
                        num_layers,
                        hidden_size,
                        dropout_keep,
                        seed: seed.wrapping_add((index as u64).wrapping_mul(GOLDEN)),
                    });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub dropout_keep: f64,
    pub seed: u64,
}

impl GridCell {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            dropout_keep: self.dropout_keep,
            seed: self.seed,
            ..base.clone()
        }
    }

    pub fn dir_name(&self) -> String {
        format!(
            "cell{:02}-l{}-h{}-k{}",
            self.index, self.num_layers, self.hidden_size, self.dropout_keep
        )
    }
}

#[derive(Debug, Clone)]
pub struct GridRun {
    pub cell: GridCell,
    pub config: TrainConfig,
    /// The run record, or the error that ended the run.
    pub result: Result<RunRecord, String>,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    /// Successful runs by ascending best validation loss, then failures in
    /// cell order.
    pub runs: Vec<GridRun>,
    pub best_checkpoint: Option<Checkpoint>,
}

impl GridReport {
    pub fn best(&self) -> Option<&GridRun> {
        self.runs.first().filter(|r| r.result.is_ok())
    }

    pub fn best_config(&self) -> Option<&TrainConfig> {
        self.best().map(|r| &r.config)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GridRun> {
        self.runs.iter().filter(|r| r.result.is_err())
    }

    pub fn all_failed(&self) -> bool {
        self.runs.iter().all(|r| r.result.is_err())
    }

    pub const CSV_HEADER: &'static str = "layers,hidden,keep,train_loss,valid_loss,time_per_epoch";

    /// Ranked summary; failed cells report NaN losses.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for run in &self.runs {
            let c = &run.cell;
            let (train, valid, secs) = match &run.result {
                Ok(rec) => (
                    rec.best().map_or(f64::NAN, |m| m.train_loss),
                    rec.best_valid_loss,
                    rec.mean_epoch_seconds(),
                ),
                Err(_) => (f64::NAN, f64::NAN, f64::NAN),
            };
            let _ = writeln!(
                out,
                "{},{},{},{train:.5},{valid:.5},{secs:.2}",
                c.num_layers, c.hidden_size, c.dropout_keep
            );
        }
        out
    }
}

/// Trains every cell of `grid` on shared data, `jobs` cells at a time. A cell
/// that fails is recorded and the remaining cells still run.
pub fn grid_search(
    grid: &GridSpec,
    base: &TrainConfig,
    data: &PreparedData,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<GridReport, TrainError> {
    let cells = grid.cells(base.seed);
    if cells.is_empty() {
        return Err(TrainError::InvalidConfig("grid has no cells".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| TrainError::InvalidConfig(format!("thread pool: {e}")))?;
    let outcomes: Vec<(GridCell, TrainConfig, Result<TrainOutcome, TrainError>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let config = cell.apply(base);
                let dir: Option<PathBuf> = out_dir.map(|d| d.join(cell.dir_name()));
                log::info!("grid cell {}: {}", cell.index, cell.dir_name());
                let result = train_prepared(&config, data, dir.as_deref());
                if let Err(e) = &result {
                    log::warn!("grid cell {} failed: {e}", cell.index);
                }
                (*cell, config, result)
            })
            .collect()
    });

    let mut best: Option<(f64, Checkpoint)> = None;
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (cell, config, result) in outcomes {
        match result {
            Ok(outcome) => {
                let loss = outcome.record.best_valid_loss;
                if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                    best = Some((loss, outcome.checkpoint));
                }
                ok.push(GridRun {
                    cell,
                    config,
                    result: Ok(outcome.record),
                });
            }
            Err(e) => failed.push(GridRun {
                cell,
                config,
                result: Err(e.to_string()),
            }),
        }
    }
    ok.sort_by(|a, b| {
        let la = a.result.as_ref().map_or(f64::INFINITY, |r| r.best_valid_loss);
        let lb = b.result.as_ref().map_or(f64::INFINITY, |r| r.best_valid_loss);
        la.total_cmp(&lb).then(a.cell.index.cmp(&b.cell.index))
    });
    ok.extend(failed);
    Ok(GridReport {
        runs: ok,
        best_checkpoint: best.map(|(_, c)| c),
    })
}
