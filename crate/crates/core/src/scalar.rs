//! Floating-point abstraction shared by every numeric module.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{AsPrimitive, Float, FloatConst, FromPrimitive, NumAssignOps, NumCast, Signed};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type the numeric core is generic over.
///
/// Bundles everything the augmentation, geometry, autodiff and training code
/// need from a float: transcendental functions, constants, conversions, FFT
/// support and fast matrix products through `ndarray`. Implemented for `f32`
/// and `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssignOps
    + Signed
    + Sum
    + LinalgScalar
    + ScalarOperand
    + rustfft::FftNum
    + AsPrimitive<f64>
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Dtype tag recorded in checkpoint headers.
    const DTYPE: &'static str;

    /// Lossy conversion from any numeric type.
    fn cast<U: NumCast>(x: U) -> Self {
        NumCast::from(x).unwrap()
    }

    fn half() -> Self {
        Self::cast(0.5)
    }

    fn two() -> Self {
        Self::cast(2.0)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}
