//! Scalar abstractions.
//!
//! Numerical code (solvers, chunk state, models) is generic over [`Real`],
//! which is implemented for `f32` and `f64`. Schedule projections only need
//! field arithmetic and ordering, captured by [`Exact`], so they can also be
//! evaluated over rationals for bit-exact comparisons.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num, NumAssign, ToPrimitive};

/// Floating point type usable for samples, models and solver state.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion helper used at serialization and reporting boundaries.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn from_usize_lossy(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).unwrap_or_else(Self::nan)
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

/// Ordered field used by time projections. Implemented for floats and
/// for [`Ratio`] so worked values can be checked without rounding.
pub trait Exact: Num + Clone + PartialOrd + FromPrimitive + Debug {
    fn from_count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count representable in scalar")
    }

    fn max_of(a: Self, b: Self) -> Self {
        if b > a {
            b
        } else {
            a
        }
    }
}

impl Exact for f64 {}
impl Exact for f32 {}
impl Exact for Ratio<i64> {}
impl Exact for Ratio<i128> {}
