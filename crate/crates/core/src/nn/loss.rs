use ndarray::{Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use super::{NnError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Melody coefficient; harmony gets `1 - alpha`.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if (0.0..=1.0).contains(&self.alpha) {
            Ok(())
        } else {
            Err(NnError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)))
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    /// Mean loss over supervised positions.
    pub loss: f64,
    /// Summed loss, for aggregating over many batches.
    pub total: f64,
    pub count: usize,
    /// Gradient of the mean loss with respect to the logits.
    pub grad: Array3<F>,
}

/// Writes `softmax(z)` into `out` and returns `-log softmax(z)[target]`.
fn softmax_nll<F: Scalar>(z: ArrayView1<F>, target: usize, mut out: ArrayViewMut1<F>) -> f64 {
    let max = z.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(z.iter()) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.mapv_inplace(|v| v / sum);
    (max + sum.ln() - z[target]).as_f64()
}

/// Weighted negative log-likelihood of the melody head (`logits[..M]`) and the
/// harmony head (`logits[M..]`), averaged over positions where `mask` is set.
pub fn dual_softmax_loss<F: Scalar>(
    logits: ArrayView3<F>,
    melody_targets: ArrayView2<usize>,
    harmony_targets: ArrayView2<usize>,
    mask: ArrayView2<bool>,
    melody_classes: usize,
    cfg: &LossConfig,
) -> Result<LossOutput<F>, NnError> {
    let (steps, lanes, k) = logits.dim();
    if melody_targets.dim() != (steps, lanes)
        || harmony_targets.dim() != (steps, lanes)
        || mask.dim() != (steps, lanes)
        || melody_classes == 0
        || melody_classes >= k
    {
        return Err(NnError::ShapeMismatch("targets or mask do not match logits".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(NnError::EmptyMask);
    }
    let m = melody_classes;
    let alpha = cfg.alpha;
    let mut grad = Array3::<F>::zeros((steps, lanes, k));
    let mut total = 0.0;
    let inv = 1.0 / count as f64;
    let (wm, wh) = (F::of(alpha * inv), F::of((1.0 - alpha) * inv));

    for t in 0..steps {
        for b in 0..lanes {
            if !mask[[t, b]] {
                continue;
            }
            let (mt, ht) = (melody_targets[[t, b]], harmony_targets[[t, b]]);
            if mt >= m || ht >= k - m {
                return Err(NnError::ShapeMismatch(format!("target ({mt}, {ht}) out of range")));
            }
            let z = logits.slice(ndarray::s![t, b, ..]);
            let mut g = grad.slice_mut(ndarray::s![t, b, ..]);
            let (gm, gh) = g.view_mut().split_at(ndarray::Axis(0), m);
            let lm = softmax_nll(z.slice(ndarray::s![..m]), mt, gm);
            let lh = softmax_nll(z.slice(ndarray::s![m..]), ht, gh);
            total += alpha * lm + (1.0 - alpha) * lh;
            g[mt] -= F::one();
            g[m + ht] -= F::one();
            for (j, v) in g.iter_mut().enumerate() {
                *v *= if j < m { wm } else { wh };
            }
        }
    }
    Ok(LossOutput {
        loss: total * inv,
        total,
        count,
        grad,
    })
}

/// Mean cross-entropy of one head (`logits[.., .., range]`) on its own.
pub fn head_cross_entropy<F: Scalar>(
    logits: ArrayView3<F>,
    targets: ArrayView2<usize>,
    mask: ArrayView2<bool>,
    range: std::ops::Range<usize>,
) -> f64 {
    let (steps, lanes, _) = logits.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..steps {
        for b in 0..lanes {
            if !mask[[t, b]] {
                continue;
            }
            let z = logits.slice(ndarray::s![t, b, range.clone()]);
            let mut scratch = ndarray::Array1::zeros(z.len());
            total += softmax_nll(z, targets[[t, b]], scratch.view_mut());
            count += 1;
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const M: usize = 35;
    const H: usize = 23;

    fn random_case(seed: u64) -> (Array3<f64>, Array2<usize>, Array2<usize>, Array2<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Array::from_shape_simple_fn((5, 3, M + H), || rng.random_range(-4.0..4.0));
        let mt = Array::from_shape_simple_fn((5, 3), || rng.random_range(0..M));
        let ht = Array::from_shape_simple_fn((5, 3), || rng.random_range(0..H));
        let mask = Array::from_shape_simple_fn((5, 3), || rng.random_bool(0.7));
        (logits, mt, ht, mask)
    }

    #[test]
    fn uniform_logits() {
        let logits = Array3::<f64>::zeros((2, 2, M + H));
        let t = Array2::zeros((2, 2));
        let mask = Array2::from_elem((2, 2), true);
        let out = dual_softmax_loss(
            logits.view(),
            t.view(),
            t.view(),
            mask.view(),
            M,
            &LossConfig::default(),
        )
        .unwrap();
        let expected = 0.5 * (M as f64).ln() + 0.5 * (H as f64).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 3.3454).abs() < 1e-3);
    }

    #[test]
    fn saturated_prediction_has_zero_loss() {
        let mut logits = Array3::<f64>::zeros((1, 1, M + H));
        logits[[0, 0, 4]] = 100.0;
        logits[[0, 0, M + 7]] = 100.0;
        let mt = Array2::from_elem((1, 1), 4);
        let ht = Array2::from_elem((1, 1), 7);
        let mask = Array2::from_elem((1, 1), true);
        let out = dual_softmax_loss(
            logits.view(),
            mt.view(),
            ht.view(),
            mask.view(),
            M,
            &LossConfig::default(),
        )
        .unwrap();
        assert!(out.loss < 1e-40);
    }

    #[test]
    fn empty_mask() {
        let logits = Array3::<f64>::zeros((1, 1, M + H));
        let t = Array2::zeros((1, 1));
        let mask = Array2::from_elem((1, 1), false);
        assert!(matches!(
            dual_softmax_loss(
                logits.view(),
                t.view(),
                t.view(),
                mask.view(),
                M,
                &LossConfig::default()
            ),
            Err(NnError::EmptyMask)
        ));
    }

    #[test]
    fn decomposes_into_heads() {
        for seed in 0..5 {
            let (logits, mt, ht, mask) = random_case(seed);
            let lm = head_cross_entropy(logits.view(), mt.view(), mask.view(), 0..M);
            let lh = head_cross_entropy(logits.view(), ht.view(), mask.view(), M..M + H);
            for alpha in [0.0, 0.3, 0.5, 1.0] {
                let out = dual_softmax_loss(
                    logits.view(),
                    mt.view(),
                    ht.view(),
                    mask.view(),
                    M,
                    &LossConfig { alpha },
                )
                .unwrap();
                assert!((out.loss - (alpha * lm + (1.0 - alpha) * lh)).abs() < 1e-12);
                if alpha == 1.0 {
                    assert!(out.grad.slice(s![.., .., M..]).iter().all(|&g| g == 0.0));
                }
                if alpha == 0.0 {
                    assert!(out.grad.slice(s![.., .., ..M]).iter().all(|&g| g == 0.0));
                }
            }
        }
    }

    #[test]
    fn gradient_structure() {
        let (logits, mt, ht, mask) = random_case(9);
        let out = dual_softmax_loss(
            logits.view(),
            mt.view(),
            ht.view(),
            mask.view(),
            M,
            &LossConfig::default(),
        )
        .unwrap();
        for t in 0..5 {
            for b in 0..3 {
                let g = out.grad.slice(s![t, b, ..]);
                if !mask[[t, b]] {
                    assert!(g.iter().all(|&v| v == 0.0));
                    continue;
                }
                assert!(g.slice(s![..M]).sum().abs() < 1e-15);
                assert!(g.slice(s![M..]).sum().abs() < 1e-15);
            }
        }
    }

    #[test]
    fn translation_invariance() {
        let (logits, mt, ht, mask) = random_case(3);
        let cfg = LossConfig::default();
        let base = dual_softmax_loss(logits.view(), mt.view(), ht.view(), mask.view(), M, &cfg).unwrap();
        let mut shifted = logits.clone();
        shifted.slice_mut(s![.., .., ..M]).mapv_inplace(|v| v + 17.0);
        shifted.slice_mut(s![.., .., M..]).mapv_inplace(|v| v - 3.5);
        let moved = dual_softmax_loss(shifted.view(), mt.view(), ht.view(), mask.view(), M, &cfg).unwrap();
        assert!((base.loss - moved.loss).abs() < 1e-12);
        let diff = (&base.grad - &moved.grad).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (logits, mt, ht, mask) = random_case(4);
        let cfg = LossConfig { alpha: 0.3 };
        let loss = |z: &Array3<f64>| {
            dual_softmax_loss(z.view(), mt.view(), ht.view(), mask.view(), M, &cfg)
                .unwrap()
                .loss
        };
        let out = dual_softmax_loss(logits.view(), mt.view(), ht.view(), mask.view(), M, &cfg).unwrap();
        let eps = 1e-6;
        for idx in [[0, 0, 0], [1, 2, 40], [4, 1, 10], [2, 0, M + 22]] {
            let mut up = logits.clone();
            up[idx] += eps;
            let mut down = logits.clone();
            down[idx] -= eps;
            let numeric = (loss(&up) - loss(&down)) / (2.0 * eps);
            assert!((numeric - out.grad[idx]).abs() < 1e-8);
        }
    }
}
