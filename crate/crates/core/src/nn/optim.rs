use serde::{Deserialize, Serialize};

use super::params::{ModelParams, Weights};
use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay: 0.9,
            epsilon: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut Weights<F>, max_norm: Option<f64>) -> f64 {
    let norm = grads.sum_of_squares().sqrt();
    if let Some(max) = max_norm {
        if norm > max && norm > 0.0 {
            grads.scale(F::of(max / norm));
        }
    }
    norm
}

/// RMSProp: `s = decay * s + (1 - decay) * g^2`, `p -= lr * g / sqrt(s + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<F> {
    pub config: OptConfig,
    pub mean_square: Weights<F>,
}

impl<F: Scalar> OptState<F> {
    pub fn new(config: OptConfig, params: &ModelParams<F>) -> Self {
        Self {
            config,
            mean_square: params.weights.zeros_like(),
        }
    }

    /// Clips `grads` in place, then applies one update. Returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &mut Weights<F>) -> f64 {
        let norm = clip_global_norm(grads, self.config.clip_norm);
        let decay = F::of(self.config.decay);
        let keep = F::of(1.0 - self.config.decay);
        let lr = F::of(self.config.learning_rate);
        let eps = F::of(self.config.epsilon);
        let weights = params.weights_mut();
        for (((_, p), (_, s)), (_, _, g)) in weights
            .tensors_mut()
            .into_iter()
            .zip(self.mean_square.tensors_mut())
            .zip(grads.tensors())
        {
            for ((p, s), &g) in p.iter_mut().zip(s.iter_mut()).zip(g) {
                *s = decay * *s + keep * g * g;
                *p -= lr * g / (*s + eps).sqrt();
            }
        }
        norm
    }
}
