use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Scalar};

pub const INIT_SCALE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub input_dim: usize,
    pub melody_classes: usize,
    pub harmony_classes: usize,
    pub dropout_keep: f64,
}

impl ModelShape {
    pub fn output_dim(&self) -> usize {
        self.melody_classes + self.harmony_classes
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.to_string()));
        if !(1..=2).contains(&self.num_layers) {
            return bad("num_layers must be 1 or 2");
        }
        if self.hidden_size == 0 || self.input_dim == 0 {
            return bad("hidden_size and input_dim must be positive");
        }
        if self.melody_classes == 0 || self.harmony_classes == 0 {
            return bad("both heads need at least one class");
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad("dropout_keep must lie in (0, 1]");
        }
        Ok(())
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden_size
        }
    }
}

/// Gate blocks are stacked in the order input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    /// `4H x in`
    pub w_input: Array2<F>,
    /// `4H x H`
    pub w_recurrent: Array2<F>,
    /// `4H`
    pub bias: Array1<F>,
}

impl<F: Scalar> LayerParams<F> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Array2::zeros((4 * hidden, input)),
            w_recurrent: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_recurrent.ncols()
    }

    pub fn input(&self) -> usize {
        self.w_input.ncols()
    }
}

/// A full set of model tensors. Used both for parameters and for their
/// gradients or optimizer accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub layers: Vec<LayerParams<F>>,
    /// `(M + H) x hidden`
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
}

impl<F: Scalar> Weights<F> {
    pub fn zeros(shape: &ModelShape) -> Self {
        Self {
            layers: (0..shape.num_layers)
                .map(|l| LayerParams::zeros(shape.layer_input(l), shape.hidden_size))
                .collect(),
            w_out: Array2::zeros((shape.output_dim(), shape.hidden_size)),
            b_out: Array1::zeros(shape.output_dim()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.input(), l.hidden()))
                .collect(),
            w_out: Array2::zeros(self.w_out.raw_dim()),
            b_out: Array1::zeros(self.b_out.raw_dim()),
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{i}.w_input"),
                l.w_input.shape().to_vec(),
                slice(&l.w_input),
            ));
            out.push((
                format!("layer{i}.w_recurrent"),
                l.w_recurrent.shape().to_vec(),
                slice(&l.w_recurrent),
            ));
            out.push((format!("layer{i}.bias"), l.bias.shape().to_vec(), slice(&l.bias)));
        }
        out.push(("output.weight".into(), self.w_out.shape().to_vec(), slice(&self.w_out)));
        out.push(("output.bias".into(), self.b_out.shape().to_vec(), slice(&self.b_out)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.w_input"), slice_mut(&mut l.w_input)));
            out.push((format!("layer{i}.w_recurrent"), slice_mut(&mut l.w_recurrent)));
            out.push((format!("layer{i}.bias"), slice_mut(&mut l.bias)));
        }
        out.push(("output.weight".into(), slice_mut(&mut self.w_out)));
        out.push(("output.bias".into(), slice_mut(&mut self.b_out)));
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, _, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, s)| s.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }

    pub fn scale(&mut self, factor: F) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, s)| s.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> Weights<G> {
        let c1 = |a: &Array1<F>| a.mapv(|v| G::of(v.as_f64()));
        let c2 = |a: &Array2<F>| a.mapv(|v| G::of(v.as_f64()));
        Weights {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w_input: c2(&l.w_input),
                    w_recurrent: c2(&l.w_recurrent),
                    bias: c1(&l.bias),
                })
                .collect(),
            w_out: c2(&self.w_out),
            b_out: c1(&self.b_out),
        }
    }
}

fn slice<F, D: ndarray::Dimension>(a: &ndarray::Array<F, D>) -> &[F] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice_mut<F, D: ndarray::Dimension>(a: &mut ndarray::Array<F, D>) -> &mut [F] {
    a.as_slice_mut().expect("parameters are contiguous")
}

/// Model parameters plus their architecture. `version` advances on every
/// in-place update so stale forward caches can be detected.
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub shape: ModelShape,
    pub weights: Weights<F>,
    version: u64,
}

/// Equality of architecture and values; the version counter is ignored.
impl<F: PartialEq> PartialEq for ModelParams<F> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.weights == other.weights
    }
}

impl<F: Scalar> ModelParams<F> {
    /// Uniform(-0.08, 0.08) matrices, zero biases except the forget gate at 1.
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Result<Self, NnError> {
        shape.validate()?;
        let mut weights = Weights::zeros(&shape);
        let h = shape.hidden_size;
        let mut uniform = |a: &mut [F]| {
            for v in a {
                *v = F::of(rng.random_range(-INIT_SCALE..INIT_SCALE));
            }
        };
        for l in &mut weights.layers {
            uniform(slice_mut(&mut l.w_input));
            uniform(slice_mut(&mut l.w_recurrent));
            l.bias.slice_mut(ndarray::s![h..2 * h]).fill(F::of(FORGET_BIAS));
        }
        uniform(slice_mut(&mut weights.w_out));
        Ok(Self {
            shape,
            weights,
            version: 0,
        })
    }

    pub fn from_weights(shape: ModelShape, weights: Weights<F>) -> Result<Self, NnError> {
        shape.validate()?;
        let expected = Weights::<F>::zeros(&shape);
        let a = expected.tensors();
        let b = weights.tensors();
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.0 != y.0 || x.1 != y.1) {
            return Err(NnError::ShapeMismatch("weights do not match model shape".into()));
        }
        Ok(Self {
            shape,
            weights,
            version: 0,
        })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access to the weights; invalidates outstanding caches.
    pub fn weights_mut(&mut self) -> &mut Weights<F> {
        self.version += 1;
        &mut self.weights
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            shape: self.shape,
            weights: self.weights.cast(),
            version: 0,
        }
    }
}
