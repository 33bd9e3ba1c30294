use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{prepare_data, PreparedData};
use super::run::{run_epochs, EpochMetrics, EpochRunner, RunRecord};
use super::{TrainConfig, TrainError};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::encoding::{pad_and_batch_with, Batch, EncodedSequence, QuantizedSong};
use crate::nn::{dual_softmax_loss, LossConfig, ModelParams, OptState, StateBundle};

/// RNG stream ids; each consumer gets its own stream of the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// Parameters from the best validation epoch.
    pub checkpoint: Checkpoint,
}

/// Position-weighted mean loss over all supervised positions, dropout off.
pub fn evaluate(params: &ModelParams<f32>, batches: &[Batch], loss: &LossConfig) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut state = StateBundle::zeros(params.shape.num_layers, 0, params.shape.hidden_size);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in batches {
        if batch.supervised() == 0 {
            continue;
        }
        let out = params.forward_batch(batch, &state, false, &mut rng)?;
        let l = dual_softmax_loss(
            out.logits.view(),
            batch.melody_targets.view(),
            batch.harmony_targets.view(),
            batch.mask.view(),
            params.shape.melody_classes,
            loss,
        )?;
        total += l.total;
        count += l.count;
        state = out.state;
    }
    if count == 0 {
        return Err(TrainError::InvalidConfig(
            "validation set has no supervised positions".into(),
        ));
    }
    Ok(total / count as f64)
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    data: &'a PreparedData,
    params: ModelParams<f32>,
    opt: OptState<f32>,
    valid_batches: Vec<Batch>,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    best: Option<ModelParams<f32>>,
    out_dir: Option<&'a Path>,
    metrics: Option<File>,
}

impl Trainer<'_> {
    fn checkpoint(&self, params: ModelParams<f32>) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                shape: params.shape,
                features: self.data.features,
                chords: self.data.dictionary.to_strings(),
                loss: self.config.loss,
                config: serde_json::to_value(self.config).expect("config serializes"),
            },
            params,
        }
    }

    /// Song groups for one epoch: songs shuffled, bucketed by chunk count,
    /// then the groups shuffled.
    fn epoch_groups(&mut self) -> Vec<Vec<usize>> {
        let train = &self.data.train;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let chunk = self.config.chunk_len;
        order.sort_by_key(|&i| train[i].len().div_ceil(chunk));
        let mut groups: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
        groups.shuffle(&mut self.shuffle_rng);
        groups
    }
}

impl EpochRunner for Trainer<'_> {
    fn train_epoch(&mut self, epoch: usize) -> Result<f64, TrainError> {
        let mut total = 0.0;
        let mut count = 0usize;
        let data = self.data;
        for indices in self.epoch_groups() {
            let group: Vec<&EncodedSequence> = indices.iter().map(|&i| &data.train[i]).collect();
            let batches = pad_and_batch_with(&group, self.config.chunk_len, group.len(), self.config.padding)?;
            let shape = self.params.shape;
            let mut state = StateBundle::zeros(shape.num_layers, group.len(), shape.hidden_size);
            for batch in &batches {
                if batch.supervised() == 0 {
                    break;
                }
                let out = self.params.forward_batch(batch, &state, true, &mut self.dropout_rng)?;
                let loss = dual_softmax_loss(
                    out.logits.view(),
                    batch.melody_targets.view(),
                    batch.harmony_targets.view(),
                    batch.mask.view(),
                    shape.melody_classes,
                    &self.config.loss,
                )?;
                if !loss.loss.is_finite() {
                    return Err(TrainError::DivergedLoss { epoch, loss: loss.loss });
                }
                let mut grads = self.params.backward(&out.cache, loss.grad.view())?;
                self.opt.step(&mut self.params, &mut grads);
                total += loss.total;
                count += loss.count;
                state = out.state;
            }
        }
        if count == 0 {
            return Err(TrainError::InvalidConfig(
                "training set has no supervised positions".into(),
            ));
        }
        Ok(total / count as f64)
    }

    fn validate(&mut self) -> Result<f64, TrainError> {
        evaluate(&self.params, &self.valid_batches, &self.config.loss)
    }

    fn on_epoch(&mut self, metrics: &EpochMetrics) -> Result<(), TrainError> {
        if let (Some(file), Some(dir)) = (self.metrics.as_mut(), self.out_dir) {
            writeln!(file, "{}", metrics.csv_row())
                .and_then(|_| file.flush())
                .map_err(TrainError::io(dir.join(METRICS_FILE)))?;
        }
        Ok(())
    }

    fn on_improvement(&mut self, _epoch: usize, _valid_loss: f64) -> Result<Option<PathBuf>, TrainError> {
        self.best = Some(self.params.clone());
        match self.out_dir {
            Some(dir) => {
                let path = dir.join(CHECKPOINT_FILE);
                self.checkpoint(self.params.clone()).save(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

/// Trains on already encoded data. With `out_dir`, per-epoch metrics go to
/// `metrics.csv` and the best parameters to `best.ckpt` there.
pub fn train_prepared(
    config: &TrainConfig,
    data: &PreparedData,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.valid.is_empty() {
        return Err(TrainError::InvalidConfig("validation set is empty".into()));
    }
    let shape = config.shape(data.input_dim(), data.dictionary.len());
    shape.validate()?;
    let params = ModelParams::init(shape, &mut stream(config.seed, STREAM_INIT))?;
    let valid_batches = pad_and_batch_with(&data.valid, config.chunk_len, config.batch_size, config.padding)?;
    let metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(TrainError::io(dir))?;
            let path = dir.join(METRICS_FILE);
            let mut f = File::create(&path).map_err(TrainError::io(&path))?;
            writeln!(f, "{}", EpochMetrics::CSV_HEADER).map_err(TrainError::io(&path))?;
            Some(f)
        }
        None => None,
    };
    let mut trainer = Trainer {
        config,
        data,
        opt: OptState::new(config.optimizer, &params),
        params,
        valid_batches,
        shuffle_rng: stream(config.seed, STREAM_SHUFFLE),
        dropout_rng: stream(config.seed, STREAM_DROPOUT),
        best: None,
        out_dir,
        metrics,
    };
    let record = run_epochs(&mut trainer, config.max_epochs, config.patience)?;
    let best = trainer.best.take().expect("first epoch always improves on infinity");
    let checkpoint = trainer.checkpoint(best);
    Ok(TrainOutcome { record, checkpoint })
}

/// Builds the chord dictionary from `train`, encodes both sets and trains.
pub fn train(
    config: &TrainConfig,
    train: &[QuantizedSong],
    valid: &[QuantizedSong],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let data = prepare_data(train, valid, &config.features)?;
    train_prepared(config, &data, out_dir)
}
