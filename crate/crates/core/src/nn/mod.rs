//! Stacked LSTM with a dual softmax head, trained by truncated BPTT and RMSProp.
//!
//! Everything is generic over [`Scalar`]: training runs in `f32`, gradient
//! checks in `f64`.

mod gradcheck;
mod loss;
mod lstm;
mod optim;
mod params;

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use thiserror::Error;

pub use gradcheck::{
    fixture as grad_check_fixture, grad_check, grad_check_with, relative_error, GradCheckReport, GRAD_CHECK_EPSILON,
    GRAD_CHECK_SAMPLES, GRAD_CHECK_TOLERANCE,
};
pub use loss::{dual_softmax_loss, head_cross_entropy, LossConfig, LossOutput};
pub use lstm::{lstm_cell_forward, CellOutput, ForwardCache, ForwardOutput, StateBundle};
pub use optim::{clip_global_norm, OptConfig, OptState};
pub use params::{LayerParams, ModelParams, ModelShape, Weights};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no supervised positions in batch")]
    EmptyMask,
    #[error("cache was produced by parameters version {cache}, current is {params}")]
    StaleCache { cache: u64, params: u64 },
    #[error("gradient check requires dropout keep = 1, got {0}")]
    DropoutInGradCheck(f64),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

/// Floating-point element type of model tensors.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + std::iter::Sum
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite conversion")
    }

    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}
