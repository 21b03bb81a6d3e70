//! Scalar abstraction for the numeric core.
//!
//! The tensor, tape, network and optimizer layers are generic over [`Scalar`]
//! so they work with `f32` or `f64`. The modeling layers above them use the
//! crate-level [`crate::Real`] alias (`f64`): adversarial training is
//! saddle-point sensitive and the extra precision keeps gradient-check
//! tolerances tight.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` for constants and step sizes.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    /// Conversion to `f64` for reporting and oracles.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
}
