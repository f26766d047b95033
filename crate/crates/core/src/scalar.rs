//! Scalar abstraction shared by every numerical module.
//!
//! All model, rollout, cost and network code is written against [`Real`], so
//! the same implementation runs in `f64` (the default used by the solver and
//! the file formats) and in `f32` (useful for embedded-style inference).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
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
    /// Converts a literal. Every `f64` literal used in this crate is
    /// representable (possibly rounded) in both supported scalars.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal is representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts a slice between scalar types through `f64`.
pub fn cast_slice<A: Real, B: Real>(v: &[A]) -> Vec<B> {
    v.iter().map(|x| B::lit(x.to_f64_lossy())).collect()
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

#[inline]
pub(crate) fn norm_inf<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

#[inline]
pub(crate) fn norm1<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m + x.abs())
}

pub(crate) fn all_finite<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}
