use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the engine computes in: `f32` for training and coding,
/// `f64` for finite-difference verification.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn erf(self) -> Self;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Standard normal density.
#[inline]
pub fn normal_pdf<T: Real>(x: T) -> T {
    T::of(0.398_942_280_401_432_7) * (-(x * x) * T::of(0.5)).exp()
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
