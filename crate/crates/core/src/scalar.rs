//! Scalar abstraction shared by every numeric module.
//!
//! The optimization core is written once against [`Scalar`] and instantiated
//! for `f64` (the default everywhere, required for the tight identity checks)
//! and `f32`. Wall-clock arithmetic in [`crate::scheduler`] additionally
//! accepts exact rationals through [`WallClock`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Floating-point type the optimizer, problems and diagnostics run on.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or sample.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numbers that can measure compute times and wall-clock budgets.
///
/// Implemented for `f32`, `f64` and `Ratio<i64>`, so step counts and the
/// speedup model can be evaluated exactly when inputs are rational.
pub trait WallClock: Num + Copy + PartialOrd + FromPrimitive + Debug {
    /// `floor(self)` as a count; negative values clamp to zero.
    fn floor_count(self) -> u64;
}

impl WallClock for f64 {
    fn floor_count(self) -> u64 {
        if self <= 0.0 {
            0
        } else {
            self.floor() as u64
        }
    }
}

impl WallClock for f32 {
    fn floor_count(self) -> u64 {
        if self <= 0.0 {
            0
        } else {
            self.floor() as u64
        }
    }
}

impl WallClock for Ratio<i64> {
    fn floor_count(self) -> u64 {
        let f = self.floor().to_integer();
        if f <= 0 {
            0
        } else {
            f as u64
        }
    }
}

/// Dense vector helpers on slices. Kept deliberately small; the problems are
/// low-dimensional and every routine here is on the hot path.
pub mod vecops {
    use super::Scalar;

    pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
    }

    pub fn norm2<S: Scalar>(a: &[S]) -> S {
        dot(a, a)
    }

    pub fn norm<S: Scalar>(a: &[S]) -> S {
        norm2(a).sqrt()
    }

    /// `y += alpha * x`
    pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = *yi + alpha * xi;
        }
    }

    pub fn sub<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
        a.iter().zip(b).map(|(&x, &y)| x - y).collect()
    }

    pub fn dist<S: Scalar>(a: &[S], b: &[S]) -> S {
        a.iter()
            .zip(b)
            .fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
            .sqrt()
    }

    pub fn is_finite<S: Scalar>(a: &[S]) -> bool {
        a.iter().all(|v| v.is_finite())
    }
}
