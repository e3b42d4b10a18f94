//! Scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `x` in double precision; never tighter than a few ulps of `Self`.
    #[inline]
    fn tol(x: f64) -> Self {
        let machine = Self::epsilon() * Self::lit(64.0);
        let t = Self::lit(x);
        if machine > t {
            machine
        } else {
            t
        }
    }

    /// Relative cutoff below which an eigenvalue counts as zero.
    ///
    /// `1e-12` in double precision, widened for `f32`.
    #[inline]
    fn kernel_rel_tol() -> Self {
        let floor = Self::lit(1e-12);
        let machine = Self::epsilon() * Self::lit(64.0);
        if machine > floor {
            machine
        } else {
            floor
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts a slice of `f64` into the working scalar type.
pub fn cast_vec<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::lit(x)).collect()
}

/// Converts a slice of the working scalar type back to `f64`.
pub fn to_f64_vec<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.as_f64()).collect()
}
