//! Log-space positive scalars.
//!
//! Stability weights in this crate are doubly exponential (`exp(exp(c/ρ^n))`
//! and friends) and overflow `f64` long before the experiments reach
//! interesting parameter ranges. [`LogVal`] carries `ln x` exactly and
//! materializes `x` only when it is representable, so audits can always form
//! ratios and sums of these quantities.

use crate::scalar::Scalar;
use serde::ser::SerializeStruct;

/// A nonnegative quantity stored as its natural logarithm.
///
/// Zero is `ln = -inf`. Negative quantities are not representable by design;
/// callers that need signs keep them separately.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct LogVal<S> {
    ln: S,
}

impl<S: Scalar> LogVal<S> {
    pub fn zero() -> Self {
        LogVal { ln: S::neg_infinity() }
    }

    pub fn one() -> Self {
        LogVal { ln: S::zero() }
    }

    /// Wraps a plain nonnegative value.
    pub fn from_value(x: S) -> Self {
        assert!(x >= S::zero(), "LogVal::from_value needs a nonnegative input");
        LogVal { ln: x.ln() }
    }

    /// Wraps a quantity given directly by its logarithm.
    pub fn from_ln(ln: S) -> Self {
        LogVal { ln }
    }

    pub fn ln(self) -> S {
        self.ln
    }

    /// The value itself when it fits the scalar's finite range.
    pub fn value(self) -> Option<S> {
        if self.ln == S::neg_infinity() {
            return Some(S::zero());
        }
        let v = self.ln.exp();
        v.is_finite().then_some(v)
    }

    /// `ln(ln x)` for quantities above 1; the reporting form for doubly
    /// exponential weights.
    pub fn ln_ln(self) -> Option<S> {
        (self.ln > S::zero()).then(|| self.ln.ln())
    }

    pub fn is_zero(self) -> bool {
        self.ln == S::neg_infinity()
    }

    pub fn mul(self, other: Self) -> Self {
        if self.is_zero() || other.is_zero() {
            return Self::zero();
        }
        LogVal { ln: self.ln + other.ln }
    }

    /// Division; `x / 0` is a caller bug and panics in debug builds via the
    /// resulting infinity assertions downstream.
    pub fn div(self, other: Self) -> Self {
        if self.is_zero() {
            return Self::zero();
        }
        LogVal { ln: self.ln - other.ln }
    }

    pub fn powf(self, p: S) -> Self {
        if self.is_zero() {
            return if p > S::zero() { Self::zero() } else { Self::one() };
        }
        LogVal { ln: self.ln * p }
    }

    /// `x + y` through `logaddexp`, exact in log space up to rounding.
    pub fn add(self, other: Self) -> Self {
        if self.is_zero() {
            return other;
        }
        if other.is_zero() {
            return self;
        }
        let (hi, lo) = if self.ln >= other.ln { (self.ln, other.ln) } else { (other.ln, self.ln) };
        LogVal { ln: hi + (lo - hi).exp().ln_1p() }
    }

    pub fn max(self, other: Self) -> Self {
        if self.ln >= other.ln { self } else { other }
    }

    pub fn min(self, other: Self) -> Self {
        if self.ln <= other.ln { self } else { other }
    }

    pub fn is_finite_ln(self) -> bool {
        self.ln.is_finite() || self.is_zero()
    }
}

/// Wire format: `{"ln": ..., "value": ...}` with `value` null when the
/// quantity overflows the scalar range.
impl<S: Scalar> serde::Serialize for LogVal<S> {
    fn serialize<Ser: serde::Serializer>(&self, ser: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        let mut st = ser.serialize_struct("LogVal", 2)?;
        st.serialize_field("ln", &self.ln.to_f64_lossy())?;
        st.serialize_field("value", &self.value().map(|v| v.to_f64_lossy()))?;
        st.end()
    }
}
