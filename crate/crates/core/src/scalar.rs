//! Floating-point abstraction so every kernel runs at 32-bit (training) or
//! 64-bit (finite-difference checking) precision from the same source.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type for tensors and parameters.
///
/// The two implementors are `f32` and `f64`. Conversions go through `f64`
/// because configuration values and oracles are specified at 64-bit.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + 'static
{
    /// Convert from a 64-bit constant (rounding if the target is narrower).
    fn of(v: f64) -> Self;

    /// Widen to 64 bits exactly (both implementors embed losslessly).
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
