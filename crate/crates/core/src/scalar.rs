//! Numeric backends.
//!
//! Everything that only needs field arithmetic (restricted least squares,
//! prediction variation, invariance tests) is written against [`Scalar`], so the
//! same code runs on `f64` for estimation and on exact types for the lab.

use std::ops::{Add, Div, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub use crate::surd::Surd;

/// Arbitrary-precision rational numbers.
pub type Rational = BigRational;

/// Relative pivot threshold for the float backend.
pub const PIVOT_RTOL: f64 = 1e-12;

pub trait Scalar:
    nalgebra::Scalar
    + Zero
    + One
    + Neg<Output = Self>
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Send
    + Sync
{
    /// True when equality comparisons are exact.
    const EXACT: bool;

    fn from_i64(v: i64) -> Self;

    fn from_ratio(num: i64, den: i64) -> Self;

    /// Best float approximation.
    fn to_f64(&self) -> f64;

    /// The exact rational value, when there is one.
    fn to_rational(&self) -> Option<Rational>;

    fn from_rational(r: &Rational) -> Self;

    fn add_ref(&self, rhs: &Self) -> Self;
    fn sub_ref(&self, rhs: &Self) -> Self;
    fn mul_ref(&self, rhs: &Self) -> Self;
    fn div_ref(&self, rhs: &Self) -> Self;

    /// Whether `self` should be treated as zero relative to `scale`
    /// (the largest magnitude of the surrounding data).
    ///
    /// Exact types only answer true for an exact zero.
    fn negligible(&self, scale: f64) -> bool;

    fn magnitude(&self) -> f64 {
        self.to_f64().abs()
    }

    /// `self += a * b`
    fn add_mul_assign(&mut self, a: &Self, b: &Self) {
        *self = self.add_ref(&a.mul_ref(b));
    }

    /// `self -= a * b`
    fn sub_mul_assign(&mut self, a: &Self, b: &Self) {
        *self = self.sub_ref(&a.mul_ref(b));
    }
}

impl Scalar for f64 {
    const EXACT: bool = false;

    fn from_i64(v: i64) -> Self {
        v as f64
    }

    fn from_ratio(num: i64, den: i64) -> Self {
        num as f64 / den as f64
    }

    fn to_f64(&self) -> f64 {
        *self
    }

    fn to_rational(&self) -> Option<Rational> {
        None
    }

    fn from_rational(r: &Rational) -> Self {
        ratio_to_f64(r)
    }

    #[inline]
    fn add_ref(&self, rhs: &Self) -> Self {
        self + rhs
    }
    #[inline]
    fn sub_ref(&self, rhs: &Self) -> Self {
        self - rhs
    }
    #[inline]
    fn mul_ref(&self, rhs: &Self) -> Self {
        self * rhs
    }
    #[inline]
    fn div_ref(&self, rhs: &Self) -> Self {
        self / rhs
    }

    fn negligible(&self, scale: f64) -> bool {
        self.abs() <= PIVOT_RTOL * scale.max(f64::MIN_POSITIVE)
    }

    #[inline]
    fn add_mul_assign(&mut self, a: &Self, b: &Self) {
        *self += a * b;
    }

    #[inline]
    fn sub_mul_assign(&mut self, a: &Self, b: &Self) {
        *self -= a * b;
    }
}

impl Scalar for Rational {
    const EXACT: bool = true;

    fn from_i64(v: i64) -> Self {
        Rational::from_integer(BigInt::from(v))
    }

    fn from_ratio(num: i64, den: i64) -> Self {
        Rational::new(BigInt::from(num), BigInt::from(den))
    }

    fn to_f64(&self) -> f64 {
        ratio_to_f64(self)
    }

    fn to_rational(&self) -> Option<Rational> {
        Some(self.clone())
    }

    fn from_rational(r: &Rational) -> Self {
        r.clone()
    }

    fn add_ref(&self, rhs: &Self) -> Self {
        self + rhs
    }
    fn sub_ref(&self, rhs: &Self) -> Self {
        self - rhs
    }
    fn mul_ref(&self, rhs: &Self) -> Self {
        self * rhs
    }
    fn div_ref(&self, rhs: &Self) -> Self {
        self / rhs
    }

    fn negligible(&self, _scale: f64) -> bool {
        self.is_zero()
    }

    fn add_mul_assign(&mut self, a: &Self, b: &Self) {
        if a.is_zero() || b.is_zero() {
            return;
        }
        *self += a * b;
    }

    fn sub_mul_assign(&mut self, a: &Self, b: &Self) {
        if a.is_zero() || b.is_zero() {
            return;
        }
        *self -= a * b;
    }
}

/// Converts a big rational to the nearest-ish `f64`, also when numerator and
/// denominator individually overflow.
pub fn ratio_to_f64(r: &Rational) -> f64 {
    if let Some(v) = ToPrimitive::to_f64(r) {
        if v.is_finite() {
            return v;
        }
    }
    let (n, d) = (r.numer(), r.denom());
    let shift = (n.bits().max(d.bits()) as i64 - 60).max(0) as usize;
    let nf = (n.abs() >> shift).to_f64().unwrap_or(f64::INFINITY);
    let df = (d >> shift).to_f64().unwrap_or(f64::INFINITY);
    let v = nf / df;
    if n.is_negative() {
        -v
    } else {
        v
    }
}

/// Parses `"p/q"` or `"p"` into a rational.
pub fn parse_rational(text: &str) -> Option<Rational> {
    let text = text.trim();
    match text.split_once('/') {
        Some((p, q)) => {
            let p: BigInt = p.trim().parse().ok()?;
            let q: BigInt = q.trim().parse().ok()?;
            if q.is_zero() {
                return None;
            }
            Some(Rational::new(p, q))
        }
        None => text.parse::<BigInt>().ok().map(Rational::from_integer),
    }
}

/// Formats a rational as `"p/q"`, or `"p"` for integers.
pub fn format_rational(r: &Rational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}
