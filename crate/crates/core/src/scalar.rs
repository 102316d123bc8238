//! Numeric traits the rest of the crate is generic over.
//!
//! Geometry only needs exact field arithmetic, so it is written against
//! [`Coord`], which admits `Ratio<i64>` as well as the float types. Anything
//! that takes logarithms or exponentials uses [`Scalar`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, Num, NumAssign, ToPrimitive};

/// A coordinate type: ordered field elements with a lossy view as `f64`.
pub trait Coord: Num + Copy + PartialOrd + ToPrimitive + Debug + Send + Sync + 'static {
    /// `false` for NaN and infinities; always `true` for exact types.
    fn is_finite_coord(&self) -> bool {
        self.to_f64().is_some_and(f64::is_finite)
    }
}

impl<T> Coord for T where T: Num + Copy + PartialOrd + ToPrimitive + Debug + Send + Sync + 'static {}

/// Floating-point scalar used by the policy, the optimizer and the metrics.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Coord + Default + Display + FromStr + Sum + Send + Sync + 'static
{
    /// Lossless for `f64`, rounding for `f32`.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `ln(sum(exp(xs)))`.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Log-probabilities of a categorical distribution given by `logits`.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    log_softmax(logits).into_iter().map(Float::exp).collect()
}
