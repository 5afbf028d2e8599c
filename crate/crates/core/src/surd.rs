//! Exact arithmetic in multi-quadratic number fields.
//!
//! A [`Surd`] is a finite sum `c_1·√r_1 + … + c_m·√r_m` with rational `c_i`
//! and distinct square-free radicands `r_i` (`r = 1` is the rational part).
//! The square roots of distinct square-free integers are linearly independent
//! over the rationals, so the representation is canonical and equality is
//! exact. This is enough to write down the worked-example SCMs, whose
//! coefficients involve `√2`, `√3`, `√5` and `√(7/8)`, without rounding.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Zero};

use crate::scalar::{ratio_to_f64, Rational, Scalar};

#[derive(Clone, PartialEq, Eq, Default)]
pub struct Surd {
    /// Sorted by radicand; no zero coefficients.
    terms: Vec<(u64, Rational)>,
}

impl Surd {
    pub fn rational(value: Rational) -> Self {
        Self::term(1, value)
    }

    /// `coef · √radicand`; the radicand is reduced to its square-free part.
    pub fn term(radicand: u64, coef: Rational) -> Self {
        assert!(radicand > 0, "radicand must be positive");
        let (square, free) = split_square(radicand);
        let coef = coef * Rational::from_integer(BigInt::from(square));
        if coef.is_zero() {
            return Self::default();
        }
        Surd {
            terms: vec![(free, coef)],
        }
    }

    /// Exact `√(num/den)` for non-negative `num/den`.
    pub fn sqrt_ratio(num: u64, den: u64) -> Self {
        assert!(den > 0, "zero denominator");
        // √(n/d) = √(n·d) / d
        Self::term(num * den, Rational::new(BigInt::one(), BigInt::from(den)))
    }

    pub fn from_ratio_i(num: i64, den: i64) -> Self {
        Self::rational(Rational::new(BigInt::from(num), BigInt::from(den)))
    }

    /// The rational part, if the number is rational.
    pub fn as_rational(&self) -> Option<Rational> {
        match self.terms.as_slice() {
            [] => Some(Rational::zero()),
            [(1, c)] => Some(c.clone()),
            _ => None,
        }
    }

    pub fn terms(&self) -> &[(u64, Rational)] {
        &self.terms
    }

    fn from_terms(mut terms: Vec<(u64, Rational)>) -> Self {
        terms.sort_by_key(|t| t.0);
        let mut merged: Vec<(u64, Rational)> = Vec::with_capacity(terms.len());
        for (r, c) in terms {
            match merged.last_mut() {
                Some((lr, lc)) if *lr == r => *lc += c,
                _ => merged.push((r, c)),
            }
        }
        merged.retain(|(_, c)| !c.is_zero());
        Surd { terms: merged }
    }

    fn largest_prime(&self) -> Option<u64> {
        self.terms
            .iter()
            .filter(|(r, _)| *r > 1)
            .map(|(r, _)| largest_prime_factor(*r))
            .max()
    }

    /// Splits `self = a + b·√p` where neither `a` nor `b` involves `√p`.
    fn split_on(&self, p: u64) -> (Surd, Surd) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (r, c) in &self.terms {
            if r % p == 0 {
                b.push((r / p, c.clone()));
            } else {
                a.push((*r, c.clone()));
            }
        }
        (Surd::from_terms(a), Surd::from_terms(b))
    }

    pub fn inverse(&self) -> Surd {
        assert!(!self.is_zero(), "division by zero");
        match self.largest_prime() {
            None => Surd::rational(self.terms[0].1.recip()),
            Some(p) => {
                // (a + b√p)⁻¹ = (a − b√p) / (a² − p·b²), and the denominator
                // no longer involves √p.
                let (a, b) = self.split_on(p);
                let root = Surd::term(p, Rational::one());
                let conj = &a - &(&b * &root);
                let norm = &(&a * &a) - &(&(&b * &b) * &Surd::rational(Rational::from_integer(BigInt::from(p))));
                &conj * &norm.inverse()
            }
        }
    }
}

fn split_square(n: u64) -> (u64, u64) {
    // n = square² · free with free square-free
    let mut square = 1;
    let mut free = 1;
    let mut rest = n;
    let mut f = 2;
    while f * f <= rest {
        let mut e = 0;
        while rest % f == 0 {
            rest /= f;
            e += 1;
        }
        square *= f.pow(e / 2);
        if e % 2 == 1 {
            free *= f;
        }
        f += 1;
    }
    free *= rest;
    debug_assert_eq!(square * square * free, n);
    (square, free)
}

fn largest_prime_factor(mut n: u64) -> u64 {
    let mut best = 1;
    let mut f = 2;
    while f * f <= n {
        while n % f == 0 {
            n /= f;
            best = f;
        }
        f += 1;
    }
    if n > 1 {
        best = n;
    }
    best
}

impl<'a> Add<&'a Surd> for &'a Surd {
    type Output = Surd;
    fn add(self, rhs: &Surd) -> Surd {
        let mut t = self.terms.clone();
        t.extend(rhs.terms.iter().cloned());
        Surd::from_terms(t)
    }
}

impl<'a> Sub<&'a Surd> for &'a Surd {
    type Output = Surd;
    fn sub(self, rhs: &Surd) -> Surd {
        let mut t = self.terms.clone();
        t.extend(rhs.terms.iter().map(|(r, c)| (*r, -c)));
        Surd::from_terms(t)
    }
}

impl<'a> Mul<&'a Surd> for &'a Surd {
    type Output = Surd;
    fn mul(self, rhs: &Surd) -> Surd {
        let mut t = Vec::with_capacity(self.terms.len() * rhs.terms.len());
        for (ra, ca) in &self.terms {
            for (rb, cb) in &rhs.terms {
                // √a·√b = g·√((a/g)(b/g)) for square-free a, b with g = gcd(a, b)
                let g = ra.gcd(rb);
                let coef = ca * cb * Rational::from_integer(BigInt::from(g));
                t.push(((ra / g) * (rb / g), coef));
            }
        }
        Surd::from_terms(t)
    }
}

impl<'a> Div<&'a Surd> for &'a Surd {
    type Output = Surd;
    fn div(self, rhs: &Surd) -> Surd {
        if let Some(r) = rhs.as_rational() {
            assert!(!r.is_zero(), "division by zero");
            let inv = r.recip();
            return Surd {
                terms: self.terms.iter().map(|(k, c)| (*k, c * &inv)).collect(),
            };
        }
        self * &rhs.inverse()
    }
}

macro_rules! forward_owned {
    ($($tr:ident :: $m:ident),*) => {$(
        impl $tr for Surd {
            type Output = Surd;
            fn $m(self, rhs: Surd) -> Surd {
                (&self).$m(&rhs)
            }
        }
    )*};
}
forward_owned!(Add::add, Sub::sub, Mul::mul, Div::div);

impl Neg for Surd {
    type Output = Surd;
    fn neg(self) -> Surd {
        Surd {
            terms: self.terms.into_iter().map(|(r, c)| (r, -c)).collect(),
        }
    }
}

impl Zero for Surd {
    fn zero() -> Self {
        Surd::default()
    }
    fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }
}

impl One for Surd {
    fn one() -> Self {
        Surd::rational(Rational::one())
    }
}

impl fmt::Debug for Surd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Surd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (r, c)) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            if *r == 1 {
                write!(f, "{c}")?;
            } else {
                write!(f, "({c})√{r}")?;
            }
        }
        Ok(())
    }
}

impl Scalar for Surd {
    const EXACT: bool = true;

    fn from_i64(v: i64) -> Self {
        Surd::rational(Rational::from_integer(BigInt::from(v)))
    }

    fn from_ratio(num: i64, den: i64) -> Self {
        Surd::from_ratio_i(num, den)
    }

    fn to_f64(&self) -> f64 {
        self.terms
            .iter()
            .map(|(r, c)| ratio_to_f64(c) * (*r as f64).sqrt())
            .sum()
    }

    fn to_rational(&self) -> Option<Rational> {
        self.as_rational()
    }

    fn from_rational(r: &Rational) -> Self {
        Surd::rational(r.clone())
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
}
