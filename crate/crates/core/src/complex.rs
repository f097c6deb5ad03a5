//! Complex numbers over any [`Real`] backend.

use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64;

use crate::precision::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Cx<R> {
    pub re: R,
    pub im: R,
}

impl<R: Real> Cx<R> {
    pub fn new(re: R, im: R) -> Self {
        Self { re, im }
    }

    pub fn lift(proto: &R, z: Complex64) -> Self {
        Self { re: proto.lift(z.re), im: proto.lift(z.im) }
    }

    pub fn real(x: R) -> Self {
        let im = x.lift(0.0);
        Self { re: x, im }
    }

    pub fn zero(proto: &R) -> Self {
        Self::lift(proto, Complex64::new(0.0, 0.0))
    }

    pub fn one(proto: &R) -> Self {
        Self::lift(proto, Complex64::new(1.0, 0.0))
    }

    /// Multiplication by `i`; exact.
    pub fn mul_i(&self) -> Self {
        Self { re: self.im.neg(), im: self.re.clone() }
    }

    pub fn conj(&self) -> Self {
        Self { re: self.re.clone(), im: self.im.neg() }
    }

    pub fn scale(&self, k: &R) -> Self {
        Self { re: self.re.mul(k), im: self.im.mul(k) }
    }

    pub fn mul_pow2(&self, k: i32) -> Self {
        Self { re: self.re.mul_pow2(k), im: self.im.mul_pow2(k) }
    }

    pub fn norm_sqr(&self) -> R {
        self.re.mul(&self.re).add(&self.im.mul(&self.im))
    }

    pub fn abs(&self) -> R {
        self.re.hypot(&self.im)
    }

    pub fn div(&self, rhs: &Self) -> Self {
        // Smith's algorithm
        let (c, d) = (&rhs.re, &rhs.im);
        if c.to_f64().abs() >= d.to_f64().abs() {
            let ratio = d.div(c);
            let denom = c.add(&d.mul(&ratio));
            Self {
                re: self.re.add(&self.im.mul(&ratio)).div(&denom),
                im: self.im.sub(&self.re.mul(&ratio)).div(&denom),
            }
        } else {
            let ratio = c.div(d);
            let denom = c.mul(&ratio).add(d);
            Self {
                re: self.re.mul(&ratio).add(&self.im).div(&denom),
                im: self.im.mul(&ratio).sub(&self.re).div(&denom),
            }
        }
    }

    pub fn inv(&self) -> Self {
        Self::one(&self.re).div(self)
    }

    /// Principal square root, branch cut on the negative real axis.
    pub fn sqrt(&self) -> Self {
        if self.re.is_zero() && self.im.is_zero() {
            return self.clone();
        }
        let modulus = self.abs();
        if !self.re.is_sign_negative() {
            let a = modulus.add(&self.re).mul_pow2(-1).sqrt();
            let b = self.im.div(&a.mul_pow2(1));
            Self { re: a, im: b }
        } else {
            let mut b = modulus.sub(&self.re).mul_pow2(-1).sqrt();
            if self.im.is_sign_negative() {
                b = b.neg();
            }
            let a = self.im.div(&b.mul_pow2(1));
            Self { re: a, im: b }
        }
    }

    pub fn to_c64(&self) -> Complex64 {
        Complex64::new(self.re.to_f64(), self.im.to_f64())
    }

    pub fn to_mpc(&self) -> rug::Complex {
        let prec = self.re.bits().max(53);
        rug::Complex::with_val(prec, (self.re.to_float(), self.im.to_float()))
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }

    pub fn is_zero(&self) -> bool {
        self.re.is_zero() && self.im.is_zero()
    }

    /// Largest binary exponent of the two parts.
    pub fn exponent(&self) -> Option<i32> {
        match (self.re.exponent(), self.im.exponent()) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        }
    }
}

impl<R: Real> Add for &Cx<R> {
    type Output = Cx<R>;
    fn add(self, rhs: &Cx<R>) -> Cx<R> {
        Cx { re: self.re.add(&rhs.re), im: self.im.add(&rhs.im) }
    }
}

impl<R: Real> Sub for &Cx<R> {
    type Output = Cx<R>;
    fn sub(self, rhs: &Cx<R>) -> Cx<R> {
        Cx { re: self.re.sub(&rhs.re), im: self.im.sub(&rhs.im) }
    }
}

impl<R: Real> Mul for &Cx<R> {
    type Output = Cx<R>;
    fn mul(self, rhs: &Cx<R>) -> Cx<R> {
        Cx {
            re: self.re.mul(&rhs.re).sub(&self.im.mul(&rhs.im)),
            im: self.re.mul(&rhs.im).add(&self.im.mul(&rhs.re)),
        }
    }
}

impl<R: Real> Neg for &Cx<R> {
    type Output = Cx<R>;
    fn neg(self) -> Cx<R> {
        Cx { re: self.re.neg(), im: self.im.neg() }
    }
}
