//! Scalar abstraction shared by every numeric module.

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating point scalar the numeric core is generic over.
///
/// Only `f32` and `f64` implement it: the model needs transcendental
/// functions (tanh, exp, log), so exact or rational scalars do not fit.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
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
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// `c <- alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// The strides and dimensions must describe valid regions of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `tanh` through a single `exp`; falls back to the library routine near
/// zero where `1 - e^{-2|x|}` would cancel.
#[inline]
pub fn tanh<T: Real>(x: T) -> T {
    let a = x.abs();
    if a < T::lit(1e-2) {
        return x.tanh();
    }
    let e = (-(a + a)).exp();
    ((T::one() - e) / (T::one() + e)).copysign(x)
}

/// Logistic function, evaluated without overflow.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln Σ exp(x_i)`; `-inf` for an empty slice.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian log-density `ln N(x; mean, std^2)`.
#[inline]
pub fn gaussian_log_pdf<T: Real>(x: T, mean: T, std: T) -> T {
    let z = (x - mean) / std;
    -T::lit(0.5) * (T::lit(LN_2PI) + z * z) - std.ln()
}

/// Log normalizing constant of a Student-t density with `df` degrees of
/// freedom and unit scale.
pub fn student_t_log_norm(df: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln()
}

/// Student-t log-density with location, scale and fixed degrees of freedom.
#[inline]
pub fn student_t_log_pdf<T: Real>(x: T, loc: T, scale: T, df: T, log_norm: T) -> T {
    let z = (x - loc) / scale;
    log_norm - scale.ln() - (df + T::one()) * T::lit(0.5) * (z * z / df).ln_1p()
}
