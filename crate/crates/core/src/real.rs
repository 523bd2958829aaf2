//! Floating-point abstraction shared by every numeric module.
//!
//! Models are generic over [`Real`] so the same code runs in 64-bit for
//! gradient checks and in 32-bit for the end-to-end training runs.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64; used for constants.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// True when every element is finite.
pub fn all_finite<T: Real>(a: &Array2<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Frobenius norm in f64.
pub fn norm<T: Real>(a: &Array2<T>) -> f64 {
    a.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}

pub fn cast<A: Real, B: Real>(a: &Array2<A>) -> Array2<B> {
    a.mapv(|v| B::of(v.f64()))
}
