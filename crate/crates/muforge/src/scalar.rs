use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};
use std::fmt;

/// Storage precision of a parameter set, recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 32,
            Dtype::F64 => 64,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            32 => Some(Dtype::F32),
            64 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar element type for all numeric kernels.
///
/// Everything numeric in the crate is generic over this trait; tests and
/// gradient checks run at `f64`, training may opt into `f32`. Conversions
/// go through `f64`, which is lossless for both supported types.
pub trait Scalar:
    Float
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
