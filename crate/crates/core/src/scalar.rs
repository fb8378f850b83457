//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! forward/backward code runs in `f32` (production, matches the on-disk
//! formats) and `f64` (finite-difference gradient checking). Accumulations
//! are always performed in `f64` regardless of the storage scalar, which
//! removes reduction-order ambiguity from tolerance budgets.

use std::fmt::{Debug, Display};

/// Floating-point scalar used for tensor storage.
///
/// Implemented for `f32` and `f64`. The `wide`/`from_wide` pair moves
/// values between storage and the `f64` accumulator domain; widening is
/// exact for both supported types.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Round an `f64` accumulator into this storage type.
    fn from_wide(x: f64) -> Self;

    /// Widen to `f64` (exact).
    fn wide(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_wide(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_wide(x: f64) -> Self {
        x
    }

    #[inline]
    fn wide(self) -> f64 {
        self
    }
}
