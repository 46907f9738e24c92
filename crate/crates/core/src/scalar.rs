//! Scalar abstraction so the numeric core runs at either f32 or f64.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::{Debug, Display};

/// Floating-point element type for all tensors and models.
///
/// Implemented for `f32` and `f64`. The pipeline defaults to `f64`; the
/// toy models are small enough that precision wins over speed.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag used in serialized tensor manifests.
    const DTYPE: &'static str;

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn from_f(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("finite scalar")
    }

    fn from_usize_(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
}
