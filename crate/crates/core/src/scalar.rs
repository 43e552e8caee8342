//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Floating point: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumCast
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Short type name used in persisted model documents.
    const NAME: &'static str;

    /// Lossy-at-most-once conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite scalar converts to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// `log(1 + exp(rho))`, stable for large |rho|.
#[inline]
pub fn softplus<T: Scalar>(rho: T) -> T {
    if rho > T::lit(30.0) {
        rho + (-rho).exp().ln_1p()
    } else {
        rho.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
#[inline]
pub fn softplus_inv<T: Scalar>(sigma: T) -> T {
    // log(exp(s) - 1) = s + log(1 - exp(-s))
    sigma + (-(-sigma).exp()).ln_1p()
}

/// Logistic sigmoid, also the derivative of [`softplus`].
#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_inverse_round_trip() {
        for &s in &[1e-4, 0.1, 0.693, 1.0, 5.0, 40.0] {
            let rho = softplus_inv(s);
            assert!((softplus(rho) - s).abs() < 1e-12 * s.max(1.0), "s={s}");
        }
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_softplus_derivative() {
        for &r in &[-8.0, -1.0, 0.0, 0.5, 3.0] {
            let h = 1e-6;
            let fd = (softplus(r + h) - softplus(r - h)) / (2.0 * h);
            assert!((fd - sigmoid(r)).abs() < 1e-8);
        }
    }

    #[test]
    fn f32_and_f64_agree() {
        assert!((softplus(0.3f32) as f64 - softplus(0.3f64)).abs() < 1e-6);
        assert_eq!(<f32 as Scalar>::NAME, "f32");
    }
}
