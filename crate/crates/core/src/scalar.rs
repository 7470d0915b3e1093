//! Floating-point abstraction shared by every numerical module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used by the model: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + for<'a> Sum<&'a Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite conversion")
    }

    /// `exp` with the argument clamped at -745 so it never underflows into a
    /// NaN-producing zero inside downstream logarithms.
    #[inline]
    fn exp_clamped(self) -> Self {
        self.max(Self::lit(-745.0)).exp()
    }

    /// `log(1 + e^x)` evaluated without overflow.
    #[inline]
    fn softplus(self) -> Self {
        if self > Self::zero() {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }

    #[inline]
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Digamma function.
pub fn digamma<T: Real>(x: T) -> T {
    T::lit(statrs::function::gamma::digamma(x.as_f64()))
}

/// Natural log of the Gamma function.
pub fn ln_gamma<T: Real>(x: T) -> T {
    T::lit(statrs::function::gamma::ln_gamma(x.as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((0.0f64.softplus() - 2f64.ln()).abs() < 1e-15);
        assert!((800.0f64.softplus() - 800.0).abs() < 1e-12);
        assert!(((-800.0f64).softplus()).abs() < 1e-300);
    }

    #[test]
    fn sigmoid_matches_definition() {
        for &x in &[-30.0f64, -1.0, 0.0, 2.5, 40.0] {
            let direct = 1.0 / (1.0 + (-x).exp());
            assert!((x.sigmoid() - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn digamma_recurrence() {
        for &x in &[0.3f64, 1.0, 2.7, 11.0] {
            let lhs = digamma(x + 1.0);
            let rhs = digamma(x) + 1.0 / x;
            assert!((lhs - rhs).abs() < 1e-12, "x={x}");
        }
    }
}
