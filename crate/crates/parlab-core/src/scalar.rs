//! Floating scalar abstraction.
//!
//! All numeric code in the crate is generic over [`Scalar`], which combines
//! the num-traits float interface (scalar arithmetic, transcendentals) with
//! the trait faer requires of matrix entries. `f32` and `f64` implement it;
//! the crate root exposes `f64` aliases since every shipped tolerance is
//! calibrated for double precision.

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating scalar usable both in scalar formulas and as a faer matrix entry.
///
/// The two method families do not overlap: faer's `RealField` exposes its
/// functionality through associated `*_impl` functions, so `Float` methods
/// resolve without qualification in generic code.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + faer_traits::RealField
    + std::iter::Sum<Self>
    + std::fmt::Display
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Shorthand for embedding an `f64` literal into the scalar type.
    ///
    /// Panics only if the literal is not representable at all, which cannot
    /// happen for the finite constants used in this crate.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 literal")
    }

    /// Lossy conversion to `f64` for diagnostics and reports.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `(exp(x) - 1) / x`, accurate near zero. Equals 1 at `x = 0`.
pub fn expm1_over_x<S: Scalar>(x: S) -> S {
    if x.abs() < S::lit(1e-5) {
        // Fourth-order Taylor keeps the relative error below 1e-21 here.
        let half = S::lit(0.5);
        S::one() + x * (half + x * (S::lit(1.0 / 6.0) + x * S::lit(1.0 / 24.0)))
    } else {
        x.exp_m1() / x
    }
}

/// `sinh(x) / x`, accurate near zero. Equals 1 at `x = 0`.
pub fn sinhc<S: Scalar>(x: S) -> S {
    if x.abs() < S::lit(1e-4) {
        let x2 = x * x;
        S::one() + x2 * (S::lit(1.0 / 6.0) + x2 * S::lit(1.0 / 120.0))
    } else {
        x.sinh() / x
    }
}
