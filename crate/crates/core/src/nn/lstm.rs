use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use super::params::{LayerParams, ModelParams, Weights};
use super::{sigmoid, NnError, Scalar};
use crate::encoding::Batch;

/// Per-layer `(h, c)`, each `lanes x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBundle<F> {
    pub layers: Vec<(Array2<F>, Array2<F>)>,
}

impl<F: Scalar> StateBundle<F> {
    pub fn zeros(num_layers: usize, lanes: usize, hidden: usize) -> Self {
        Self {
            layers: (0..num_layers)
                .map(|_| (Array2::zeros((lanes, hidden)), Array2::zeros((lanes, hidden))))
                .collect(),
        }
    }

    pub fn lanes(&self) -> usize {
        self.layers.first().map_or(0, |(h, _)| h.nrows())
    }

    /// Zeroes every lane whose flag is false.
    pub fn reset_lanes(&mut self, keep: &[bool]) {
        for (h, c) in &mut self.layers {
            for (lane, &k) in keep.iter().enumerate() {
                if !k {
                    h.row_mut(lane).fill(F::zero());
                    c.row_mut(lane).fill(F::zero());
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(h, c)| h.iter().chain(c.iter()).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<F> {
    /// Layer input, `TB x in`.
    input: Array2<F>,
    /// Gate activations, `T x B x 4H`.
    gates: Array3<F>,
    /// `T+1 x B x H`, index 0 is the incoming state.
    h: Array3<F>,
    c: Array3<F>,
    tanh_c: Array3<F>,
    /// Inverted-dropout multipliers on the layer output, `TB x H`.
    dropout: Option<Array2<F>>,
}

/// Activations saved by [`ModelParams::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    version: u64,
    steps: usize,
    lanes: usize,
    layers: Vec<LayerCache<F>>,
    /// Input to the output projection, `TB x H`.
    top: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    /// `T x B x (M + H)`
    pub logits: Array3<F>,
    pub state: StateBundle<F>,
    pub cache: ForwardCache<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput<F> {
    pub h: Array2<F>,
    pub c: Array2<F>,
    /// Pre-activations `x W_in^T + h W_rec^T + b`, `B x 4H`.
    pub preactivations: Array2<F>,
    /// Activated gates (i, f, g, o), `B x 4H`.
    pub gates: Array2<F>,
}

/// Applies gate nonlinearities to one lane in place and writes the new cell
/// and hidden state.
#[inline]
fn activate_lane<F: Scalar>(z: &mut [F], c_prev: &[F], c: &mut [F], tanh_c: &mut [F], h: &mut [F]) {
    let n = c.len();
    let (zi, rest) = z.split_at_mut(n);
    let (zf, rest) = rest.split_at_mut(n);
    let (zg, zo) = rest.split_at_mut(n);
    for k in 0..n {
        let i = sigmoid(zi[k]);
        let f = sigmoid(zf[k]);
        let g = zg[k].tanh();
        let o = sigmoid(zo[k]);
        zi[k] = i;
        zf[k] = f;
        zg[k] = g;
        zo[k] = o;
        let ck = f * c_prev[k] + i * g;
        let tc = ck.tanh();
        c[k] = ck;
        tanh_c[k] = tc;
        h[k] = o * tc;
    }
}

/// One LSTM step for a batch of lanes.
pub fn lstm_cell_forward<F: Scalar>(
    x: ArrayView2<F>,
    h: ArrayView2<F>,
    c: ArrayView2<F>,
    layer: &LayerParams<F>,
) -> Result<CellOutput<F>, NnError> {
    let hidden = layer.hidden();
    if x.ncols() != layer.input() {
        return Err(NnError::ShapeMismatch(format!(
            "input width {} != {}",
            x.ncols(),
            layer.input()
        )));
    }
    if h.dim() != (x.nrows(), hidden) || c.dim() != h.dim() {
        return Err(NnError::ShapeMismatch("state does not match lanes x hidden".into()));
    }
    let mut z = x.dot(&layer.w_input.t()) + &layer.bias;
    general_mat_mul(F::one(), &h, &layer.w_recurrent.t(), F::one(), &mut z);
    let pre = z.clone();
    let lanes = x.nrows();
    let mut h_out = Array2::zeros((lanes, hidden));
    let mut c_out = Array2::zeros((lanes, hidden));
    let mut tanh_c = vec![F::zero(); hidden];
    let c = c.as_standard_layout();
    for b in 0..lanes {
        activate_lane(
            z.row_mut(b).into_slice().expect("row is contiguous"),
            c.row(b).to_slice().expect("row is contiguous"),
            c_out.row_mut(b).into_slice().expect("row is contiguous"),
            &mut tanh_c,
            h_out.row_mut(b).into_slice().expect("row is contiguous"),
        );
    }
    Ok(CellOutput {
        h: h_out,
        c: c_out,
        preactivations: pre,
        gates: z,
    })
}

impl<F: Scalar> ModelParams<F> {
    /// Runs the stack over a `T x B x D` chunk. Lanes with `carryover = false`
    /// start from a zero state. During training each layer's output is
    /// multiplied by an inverted-dropout mask.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        inputs: ArrayView3<F>,
        carryover: &[bool],
        state: &StateBundle<F>,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput<F>, NnError> {
        let (steps, lanes, dim) = inputs.dim();
        let shape = &self.shape;
        if dim != shape.input_dim {
            return Err(NnError::ShapeMismatch(format!(
                "input width {dim} != model input {}",
                shape.input_dim
            )));
        }
        if carryover.len() != lanes {
            return Err(NnError::ShapeMismatch("carryover flags != lanes".into()));
        }
        let hidden = shape.hidden_size;
        let mut init = if state.lanes() == lanes && state.layers.len() == shape.num_layers {
            state.clone()
        } else {
            StateBundle::zeros(shape.num_layers, lanes, hidden)
        };
        init.reset_lanes(carryover);

        let keep = shape.dropout_keep;
        let drop = training && keep < 1.0;
        let scale = F::of(1.0 / keep);

        let mut x = inputs
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((steps * lanes, dim))
            .expect("standard layout");
        let mut caches = Vec::with_capacity(shape.num_layers);
        let mut final_state = Vec::with_capacity(shape.num_layers);

        for (layer, (h0, c0)) in self.weights.layers.iter().zip(init.layers) {
            let mut z_all = x.dot(&layer.w_input.t()) + &layer.bias;
            let mut gates = Array3::zeros((steps, lanes, 4 * hidden));
            let mut h = Array3::zeros((steps + 1, lanes, hidden));
            let mut c = Array3::zeros((steps + 1, lanes, hidden));
            let mut tanh_c = Array3::zeros((steps, lanes, hidden));
            h.index_axis_mut(Axis(0), 0).assign(&h0);
            c.index_axis_mut(Axis(0), 0).assign(&c0);

            for t in 0..steps {
                let mut z = z_all.slice_mut(s![t * lanes..(t + 1) * lanes, ..]);
                general_mat_mul(
                    F::one(),
                    &h.index_axis(Axis(0), t),
                    &layer.w_recurrent.t(),
                    F::one(),
                    &mut z,
                );
                let (h_prev_next, c_prev_next) = (
                    h.multi_slice_mut((s![t, .., ..], s![t + 1, .., ..])),
                    c.multi_slice_mut((s![t, .., ..], s![t + 1, .., ..])),
                );
                let (_, mut h_next) = h_prev_next;
                let (c_prev, mut c_next) = c_prev_next;
                let mut tc = tanh_c.index_axis_mut(Axis(0), t);
                for b in 0..lanes {
                    activate_lane(
                        z.row_mut(b).into_slice().expect("row is contiguous"),
                        c_prev.row(b).to_slice().expect("row is contiguous"),
                        c_next.row_mut(b).into_slice().expect("row is contiguous"),
                        tc.row_mut(b).into_slice().expect("row is contiguous"),
                        h_next.row_mut(b).into_slice().expect("row is contiguous"),
                    );
                }
                gates.index_axis_mut(Axis(0), t).assign(&z);
            }

            final_state.push((
                h.index_axis(Axis(0), steps).to_owned(),
                c.index_axis(Axis(0), steps).to_owned(),
            ));
            let mut out = h
                .slice(s![1.., .., ..])
                .to_owned()
                .into_shape_with_order((steps * lanes, hidden))
                .expect("standard layout");
            let dropout = if drop {
                let mask = Array2::from_shape_simple_fn((steps * lanes, hidden), || {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        F::zero()
                    }
                });
                out *= &mask;
                Some(mask)
            } else {
                None
            };
            caches.push(LayerCache {
                input: std::mem::replace(&mut x, out),
                gates,
                h,
                c,
                tanh_c,
                dropout,
            });
        }

        let logits = (x.dot(&self.weights.w_out.t()) + &self.weights.b_out)
            .into_shape_with_order((steps, lanes, shape.output_dim()))
            .expect("standard layout");
        Ok(ForwardOutput {
            logits,
            state: StateBundle { layers: final_state },
            cache: ForwardCache {
                version: self.version(),
                steps,
                lanes,
                layers: caches,
                top: x,
            },
        })
    }

    /// [`forward`](Self::forward) on a [`Batch`].
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        state: &StateBundle<F>,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput<F>, NnError> {
        let inputs = batch.inputs.mapv(|v| F::of(f64::from(v)));
        self.forward(inputs.view(), &batch.carryover, state, training, rng)
    }

    /// Exact gradients through the chunk. The incoming state is treated as a
    /// constant, so gradients stop at the chunk boundary.
    pub fn backward(&self, cache: &ForwardCache<F>, dlogits: ArrayView3<F>) -> Result<Weights<F>, NnError> {
        if cache.version != self.version() {
            return Err(NnError::StaleCache {
                cache: cache.version,
                params: self.version(),
            });
        }
        let (steps, lanes) = (cache.steps, cache.lanes);
        let k = self.shape.output_dim();
        if dlogits.dim() != (steps, lanes, k) || cache.layers.len() != self.weights.layers.len() {
            return Err(NnError::ShapeMismatch("gradient does not match cached forward".into()));
        }
        let hidden = self.shape.hidden_size;
        let rows = steps * lanes;
        let dl = dlogits
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, k))
            .expect("standard layout");

        let mut grads = self.weights.zeros_like();
        grads.w_out = dl.t().dot(&cache.top);
        grads.b_out = dl.sum_axis(Axis(0));
        let mut dy = dl.dot(&self.weights.w_out);

        for (l, (layer, lc)) in self.weights.layers.iter().zip(&cache.layers).enumerate().rev() {
            if let Some(mask) = &lc.dropout {
                dy *= mask;
            }
            let mut dz_all = Array2::<F>::zeros((rows, 4 * hidden));
            let mut dh_next = Array2::<F>::zeros((lanes, hidden));
            let mut dc_next = Array2::<F>::zeros((lanes, hidden));
            for t in (0..steps).rev() {
                let mut dz = dz_all.slice_mut(s![t * lanes..(t + 1) * lanes, ..]);
                let dy_t = dy.slice(s![t * lanes..(t + 1) * lanes, ..]);
                let gates = lc.gates.index_axis(Axis(0), t);
                let tanh_c = lc.tanh_c.index_axis(Axis(0), t);
                let c_prev = lc.c.index_axis(Axis(0), t);
                for b in 0..lanes {
                    let g = gates.row(b);
                    let g = g.as_slice().expect("row is contiguous");
                    let dz_row = dz.row_mut(b).into_slice().expect("row is contiguous");
                    let (dzi, rest) = dz_row.split_at_mut(hidden);
                    let (dzf, rest) = rest.split_at_mut(hidden);
                    let (dzg, dzo) = rest.split_at_mut(hidden);
                    for j in 0..hidden {
                        let (i, f, gg, o) = (g[j], g[hidden + j], g[2 * hidden + j], g[3 * hidden + j]);
                        let tc = tanh_c[[b, j]];
                        let dh = dy_t[[b, j]] + dh_next[[b, j]];
                        let dc = dh * o * (F::one() - tc * tc) + dc_next[[b, j]];
                        dzo[j] = dh * tc * o * (F::one() - o);
                        dzi[j] = dc * gg * i * (F::one() - i);
                        dzg[j] = dc * i * (F::one() - gg * gg);
                        dzf[j] = dc * c_prev[[b, j]] * f * (F::one() - f);
                        dc_next[[b, j]] = dc * f;
                    }
                }
                dh_next = dz.dot(&layer.w_recurrent);
            }
            let h_prev =
                lc.h.slice(s![..steps, .., ..])
                    .to_owned()
                    .into_shape_with_order((rows, hidden))
                    .expect("standard layout");
            let g = &mut grads.layers[l];
            g.w_recurrent = dz_all.t().dot(&h_prev);
            g.w_input = dz_all.t().dot(&lc.input);
            g.bias = dz_all.sum_axis(Axis(0));
            if l > 0 {
                dy = dz_all.dot(&layer.w_input);
            }
        }
        Ok(grads)
    }
}
