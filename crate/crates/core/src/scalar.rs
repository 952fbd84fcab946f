//! Scalar abstraction shared by every numeric kernel in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point type the filters, assignment solvers and metrics run on.
///
/// Implemented for `f32` and `f64`. The simulator and the experiment runner are
/// fixed to `f64`; everything below them is generic.
pub trait Scalar:
    Float
    + FloatConst
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
    /// Converts an `f64` literal. Panics only for values the target type cannot
    /// represent at all, which never happens for `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float
        + FloatConst
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
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    let v = 0.5 * libm::erfc(-x.as_f64() / std::f64::consts::SQRT_2);
    T::lit(v)
}

/// Quantile of the chi-square distribution with two degrees of freedom.
///
/// The two-dof case has the closed form `-2 ln(1 - p)`.
pub fn chi2_quantile_2dof<T: Scalar>(p: T) -> T {
    -T::lit(2.0) * (T::one() - p).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0_f64) - 2.0_f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0_f64), 800.0);
        assert!(softplus(-800.0_f64) >= 0.0);
    }

    #[test]
    fn chi2_two_dof_matches_table() {
        // Tabulated 99% point for two degrees of freedom.
        assert!((chi2_quantile_2dof(0.99_f64) - 9.21).abs() < 1e-3);
        assert!((chi2_quantile_2dof(0.95_f64) - 5.991).abs() < 1e-3);
    }

    #[test]
    fn cdf_works_in_f32() {
        assert!((normal_cdf(0.0_f32) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(-2.0_f32) - 0.02275).abs() < 1e-5);
    }
}
