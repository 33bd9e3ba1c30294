//! Central-difference verification of the analytic BPTT gradients.

use ndarray::{Array, Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{dual_softmax_loss, LossConfig};
use super::lstm::StateBundle;
use super::params::{ModelParams, ModelShape, Weights};
use super::NnError;
use crate::encoding::Batch;

pub const GRAD_CHECK_EPSILON: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
/// Coordinates checked per tensor (all of them for smaller tensors).
pub const GRAD_CHECK_SAMPLES: usize = 200;
/// Denominator floor for the relative error. Central differences at
/// `GRAD_CHECK_EPSILON` carry about 1e-10 of round-off, so coordinates whose
/// gradient is smaller than this are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor name, coordinates checked, max relative error)`
    pub per_tensor: Vec<(String, usize, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_CHECK_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn mean_loss(params: &ModelParams<f64>, batch: &Batch, cfg: &LossConfig) -> Result<f64, NnError> {
    let state = StateBundle::zeros(params.shape.num_layers, batch.lanes(), params.shape.hidden_size);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = params.forward_batch(batch, &state, false, &mut rng)?;
    Ok(dual_softmax_loss(
        out.logits.view(),
        batch.melody_targets.view(),
        batch.harmony_targets.view(),
        batch.mask.view(),
        params.shape.melody_classes,
        cfg,
    )?
    .loss)
}

pub fn grad_check(
    params: &ModelParams<f64>,
    batch: &Batch,
    cfg: &LossConfig,
    seed: u64,
) -> Result<GradCheckReport, NnError> {
    grad_check_with(params, batch, cfg, seed, |_| {})
}

/// Like [`grad_check`], but lets `tamper` modify the analytic gradients before
/// they are compared.
pub fn grad_check_with(
    params: &ModelParams<f64>,
    batch: &Batch,
    cfg: &LossConfig,
    seed: u64,
    tamper: impl FnOnce(&mut Weights<f64>),
) -> Result<GradCheckReport, NnError> {
    if params.shape.dropout_keep < 1.0 {
        return Err(NnError::DropoutInGradCheck(params.shape.dropout_keep));
    }
    let state = StateBundle::zeros(params.shape.num_layers, batch.lanes(), params.shape.hidden_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = params.forward_batch(batch, &state, false, &mut rng)?;
    let loss = dual_softmax_loss(
        out.logits.view(),
        batch.melody_targets.view(),
        batch.harmony_targets.view(),
        batch.mask.view(),
        params.shape.melody_classes,
        cfg,
    )?;
    let mut analytic = params.backward(&out.cache, loss.grad.view())?;
    tamper(&mut analytic);

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_tensor: Vec::new(),
    };
    let tensors = analytic.tensors();
    for (k, (name, _, grad)) in tensors.iter().enumerate() {
        let n = grad.len();
        let picks = sample(&mut rng, n, n.min(GRAD_CHECK_SAMPLES)).into_vec();
        let mut worst: f64 = 0.0;
        for idx in picks {
            let original = params.weights.tensors()[k].2[idx];
            let mut eval = |v: f64| -> Result<f64, NnError> {
                probe.weights_mut().tensors_mut()[k].1[idx] = v;
                mean_loss(&probe, batch, cfg)
            };
            let plus = eval(original + GRAD_CHECK_EPSILON)?;
            let minus = eval(original - GRAD_CHECK_EPSILON)?;
            eval(original)?;
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_EPSILON);
            worst = worst.max(relative_error(grad[idx], numeric));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_tensor.push((name.clone(), n.min(GRAD_CHECK_SAMPLES), worst));
    }
    Ok(report)
}

/// A small random model and batch: hidden 8, `T = 12`, `B = 3`, 35 melody and
/// 23 harmony classes, random real-valued inputs and a few unsupervised
/// positions.
pub fn fixture(num_layers: usize, seed: u64) -> (ModelParams<f64>, Batch) {
    let (steps, lanes, dim) = (12, 3, 16);
    let shape = ModelShape {
        num_layers,
        hidden_size: 8,
        input_dim: dim,
        melody_classes: 35,
        harmony_classes: 23,
        dropout_keep: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(shape, &mut rng).expect("valid fixture shape");
    // Larger weights than the default init make the recurrent path matter.
    for (_, t) in params.weights_mut().tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.4..0.4);
        }
    }
    let inputs: Array3<f32> = Array::from_shape_simple_fn((steps, lanes, dim), || rng.random_range(-1.0..1.0));
    let melody_targets = Array2::from_shape_simple_fn((steps, lanes), || rng.random_range(0..35));
    let harmony_targets = Array2::from_shape_simple_fn((steps, lanes), || rng.random_range(0..23));
    let mut mask = Array2::from_elem((steps, lanes), true);
    mask[[11, 0]] = false;
    mask[[3, 2]] = false;
    let batch = Batch {
        inputs,
        melody_targets,
        harmony_targets,
        mask,
        carryover: vec![false; lanes],
        chunk_index: 0,
    };
    (params, batch)
}
