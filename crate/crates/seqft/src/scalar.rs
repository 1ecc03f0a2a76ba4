//! Scalar abstraction for the math core.
//!
//! Everything numeric (tensors, models, losses, optimizers) is generic over
//! [`Scalar`] so the same code runs in `f32` for training and in `f64` for
//! high-precision oracles such as finite-difference gradient checks. The
//! pipeline pins `f32` through the aliases at the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Default + Debug + Display + 'static
{
    /// Lossy conversion from `f64`, used for literals and f64-accumulated sums.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    /// Widening conversion used when accumulating reductions in 64-bit.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for scalar literals in generic code.
#[inline]
pub fn lit<F: Scalar>(x: f64) -> F {
    F::from_f64_lossy(x)
}
