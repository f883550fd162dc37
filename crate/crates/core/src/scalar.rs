//! The scalar abstraction shared by tensors, layers, and the DP step.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Real scalar usable as a tensor element: `f32` or `f64`.
///
/// The engine runs in `f64` by default (see the crate-root aliases); `f32`
/// is supported for forward evaluation and experimentation. Anything that
/// crosses a file boundary is stored as `f64`.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (exact for `f64`).
    fn of(v: f64) -> Self;

    fn real(self) -> f64;

    fn count(v: usize) -> Self {
        Self::of(v as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn real(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn real(self) -> f64 {
        self
    }
}
