//! Floating point abstraction. Training runs in f32 for speed; gradient
//! checks and numeric oracles run the same kernels in f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::LinalgScalar;
use rustfft::FftNum;

/// Scalar type every numeric kernel is generic over.
///
/// Random draws always happen in f64 and get converted, so a run produces
/// the same sample sequence regardless of the working precision.
/// `of`/`to_f64` are the deliberate conversion points; keeping them explicit
/// makes it visible where precision can change.
pub trait Real:
    LinalgScalar
    + FftNum
    + PartialOrd
    + Sum
    + Display
    + Debug
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn is_finite(self) -> bool;

    fn max_val(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }

    fn min_val(self, other: Self) -> Self {
        if self < other {
            self
        } else {
            other
        }
    }

    fn clamp_val(self, lo: Self, hi: Self) -> Self {
        self.max_val(lo).min_val(hi)
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);
