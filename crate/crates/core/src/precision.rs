//! Configurable-significand arithmetic.
//!
//! Every propagation is generic over [`Real`]. Three backends implement it:
//!
//! * `f64` for exactly 53 significand bits (IEEE binary64, round-to-nearest-even),
//! * [`Emulated`] for 8..=52 bits: each binary64 result is re-rounded to `m` bits,
//! * [`Multi`] for 54..=4096 bits, backed by MPFR through `rug`.
//!
//! [`PrecisionSpec::backend`] picks the backend for a run.

use std::f64::consts::PI;
use std::fmt;

use rug::float::{Constant, Round};
use rug::Float;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Smallest supported significand width.
pub const MIN_BITS: u32 = 8;
/// Largest supported significand width.
pub const MAX_BITS: u32 = 4096;
/// Width used for "reference precision" runs and for diagnostics.
pub const REFERENCE_BITS: u32 = 256;

/// Where the instability seed of a run comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "amplitude")]
pub enum SeedMode {
    /// Every operation is rounded to `m` bits; the rounding noise is the seed.
    ArithmeticFloor,
    /// Propagate at reference precision and add `amplitude` to the subdominant
    /// amplitude at the exchange time closest to the end of the period.
    InjectedSeed(f64),
}

impl SeedMode {
    /// Parses the CLI form: `floor` or `inject:<amplitude>`.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let text = text.trim();
        if text == "floor" {
            return Ok(SeedMode::ArithmeticFloor);
        }
        if let Some(amp) = text.strip_prefix("inject:") {
            let amp = parse_amplitude(amp)
                .ok_or_else(|| Error::InvalidSeedMode(text.to_string()))?;
            if !(amp > 0.0 && amp.is_finite()) {
                return Err(Error::InvalidSeedMode(text.to_string()));
            }
            return Ok(SeedMode::InjectedSeed(amp));
        }
        Err(Error::InvalidSeedMode(text.to_string()))
    }
}

impl fmt::Display for SeedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedMode::ArithmeticFloor => write!(f, "floor"),
            SeedMode::InjectedSeed(a) => write!(f, "inject:{a:e}"),
        }
    }
}

// Accepts plain decimals and the `2^-53` shorthand.
fn parse_amplitude(text: &str) -> Option<f64> {
    if let Some(exp) = text.strip_prefix("2^") {
        return exp.parse::<i32>().ok().map(|e| 2f64.powi(e));
    }
    text.parse::<f64>().ok()
}

/// Arithmetic contract of a run: radix, significand width, step and seed mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSpec {
    radix: u32,
    bits: u32,
    dt: f64,
    seed_mode: SeedMode,
}

/// Concrete arithmetic used to carry out a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Native,
    Emulated(u32),
    Multi(u32),
}

impl PrecisionSpec {
    pub fn new(bits: u32, dt: f64, seed_mode: SeedMode) -> Result<Self, Error> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::BitsOutOfRange(bits));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidStep(dt));
        }
        Ok(Self { radix: 2, bits, dt, seed_mode })
    }

    /// Arithmetic-floor run at `bits` with step `dt`.
    pub fn floor(bits: u32, dt: f64) -> Result<Self, Error> {
        Self::new(bits, dt, SeedMode::ArithmeticFloor)
    }

    /// Arithmetic-floor run at [`REFERENCE_BITS`].
    pub fn reference(dt: f64) -> Self {
        Self::floor(REFERENCE_BITS, dt).expect("reference precision is in range")
    }

    pub fn radix(&self) -> u32 {
        self.radix
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed_mode(&self) -> SeedMode {
        self.seed_mode
    }

    pub fn with_dt(&self, dt: f64) -> Result<Self, Error> {
        Self::new(self.bits, dt, self.seed_mode)
    }

    pub fn with_bits(&self, bits: u32) -> Result<Self, Error> {
        Self::new(bits, self.dt, self.seed_mode)
    }

    /// Significand width the propagation actually runs at. Injected-seed runs
    /// use at least [`REFERENCE_BITS`].
    pub fn working_bits(&self) -> u32 {
        match self.seed_mode {
            SeedMode::ArithmeticFloor => self.bits,
            SeedMode::InjectedSeed(_) => self.bits.max(REFERENCE_BITS),
        }
    }

    pub fn backend(&self) -> Backend {
        backend_for(self.working_bits())
    }

    /// Relative unit in the last place, `2^(1-m)`.
    pub fn ulp(&self) -> f64 {
        ulp(self.bits)
    }
}

pub(crate) fn backend_for(bits: u32) -> Backend {
    match bits {
        53 => Backend::Native,
        b if b < 53 => Backend::Emulated(b),
        b => Backend::Multi(b),
    }
}

/// `2^(1-m)`.
pub fn ulp(bits: u32) -> f64 {
    2f64.powi(1 - bits as i32)
}

/// The precision floor `beta^-m`. Underflows to 0 in `f64` beyond `m = 1074`;
/// use [`ln_ulp_floor`] for very wide significands.
pub fn ulp_floor(spec: &PrecisionSpec) -> f64 {
    (spec.radix as f64).powi(-(spec.bits as i32))
}

/// `ln(beta^-m) = -m ln(beta)`.
pub fn ln_ulp_floor(spec: &PrecisionSpec) -> f64 {
    -(spec.bits as f64) * (spec.radix as f64).ln()
}

/// Range events raised while rounding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundingFlags {
    pub overflow: bool,
    pub underflow: bool,
}

impl RoundingFlags {
    pub fn merge(&mut self, other: RoundingFlags) {
        self.overflow |= other.overflow;
        self.underflow |= other.underflow;
    }
}

/// Rounds a complex value part-wise to the significand width of `spec`,
/// round-to-nearest-even.
///
/// Widths up to 53 bits share the binary64 exponent range: magnitudes beyond
/// it become signed infinities and magnitudes below the smallest normal become
/// signed zeros, each raising the matching flag.
pub fn round_to(x: &rug::Complex, spec: &PrecisionSpec) -> (rug::Complex, RoundingFlags) {
    let bits = spec.bits();
    let mut flags = RoundingFlags::default();
    let re = round_float(x.real(), bits, &mut flags);
    let im = round_float(x.imag(), bits, &mut flags);
    (rug::Complex::with_val(bits, (re, im)), flags)
}

/// Real-valued form of [`round_to`].
pub fn round_real(x: &Float, bits: u32) -> (Float, RoundingFlags) {
    let mut flags = RoundingFlags::default();
    let v = round_float(x, bits, &mut flags);
    (v, flags)
}

fn round_float(x: &Float, bits: u32, flags: &mut RoundingFlags) -> Float {
    let (mut v, _) = Float::with_val_round(bits, x, Round::Nearest);
    if bits <= 53 && v.is_finite() && !v.is_zero() {
        let mag = v.clone().abs();
        if mag > f64::MAX {
            flags.overflow = true;
            v = Float::with_val(bits, if v.is_sign_negative() { f64::NEG_INFINITY } else { f64::INFINITY });
        } else if mag < f64::MIN_POSITIVE {
            flags.underflow = true;
            v = Float::with_val(bits, if v.is_sign_negative() { -0.0 } else { 0.0 });
        }
    }
    v
}

/// Rounds a binary64 value to `bits` significand bits, round-to-nearest-even.
///
/// Results below the smallest normal binary64 flush to signed zero.
pub fn round_f64(x: f64, bits: u32) -> f64 {
    debug_assert!((1..=53).contains(&bits));
    if bits >= 53 || !x.is_finite() || x == 0.0 {
        return x;
    }
    if x.abs() < f64::MIN_POSITIVE {
        return 0.0f64.copysign(x);
    }
    let shift = 53 - bits;
    let raw = x.to_bits();
    let lsb = (raw >> shift) & 1;
    let bias = (1u64 << (shift - 1)) - 1 + lsb;
    let rounded = (raw.wrapping_add(bias)) & !((1u64 << shift) - 1);
    f64::from_bits(rounded)
}

/// Scalar arithmetic at a fixed significand width.
///
/// Every operation returns a value rounded to the width of `self`
/// (round-to-nearest-even). Constants are created through an existing value
/// so the width travels with the data.
pub trait Real: Clone + fmt::Debug + Send + Sync + 'static {
    fn bits(&self) -> u32;
    fn lift(&self, x: f64) -> Self;
    fn from_float(&self, x: &Float) -> Self;
    fn pi(&self) -> Self;

    fn add(&self, rhs: &Self) -> Self;
    fn sub(&self, rhs: &Self) -> Self;
    fn mul(&self, rhs: &Self) -> Self;
    fn div(&self, rhs: &Self) -> Self;
    fn neg(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn hypot(&self, rhs: &Self) -> Self;
    fn sin_cos(&self) -> (Self, Self);
    /// Exact scaling by `2^k`.
    fn mul_pow2(&self, k: i32) -> Self;
    /// Binary exponent `e` with `2^(e-1) <= |x| < 2^e`; `None` for zero and non-finite values.
    fn exponent(&self) -> Option<i32>;

    fn is_finite(&self) -> bool;
    fn is_zero(&self) -> bool;
    fn is_sign_negative(&self) -> bool;
    fn to_f64(&self) -> f64;
    /// Exact conversion.
    fn to_float(&self) -> Float;
}

impl Real for f64 {
    fn bits(&self) -> u32 {
        53
    }
    fn lift(&self, x: f64) -> Self {
        x
    }
    fn from_float(&self, x: &Float) -> Self {
        x.to_f64()
    }
    fn pi(&self) -> Self {
        PI
    }
    fn add(&self, rhs: &Self) -> Self {
        self + rhs
    }
    fn sub(&self, rhs: &Self) -> Self {
        self - rhs
    }
    fn mul(&self, rhs: &Self) -> Self {
        self * rhs
    }
    fn div(&self, rhs: &Self) -> Self {
        self / rhs
    }
    fn neg(&self) -> Self {
        -self
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn hypot(&self, rhs: &Self) -> Self {
        f64::hypot(*self, *rhs)
    }
    fn sin_cos(&self) -> (Self, Self) {
        f64::sin_cos(*self)
    }
    fn mul_pow2(&self, k: i32) -> Self {
        self * 2f64.powi(k)
    }
    fn exponent(&self) -> Option<i32> {
        f64_exponent(*self)
    }
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    fn is_zero(&self) -> bool {
        *self == 0.0
    }
    fn is_sign_negative(&self) -> bool {
        f64::is_sign_negative(*self)
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn to_float(&self) -> Float {
        Float::with_val(53, *self)
    }
}

fn f64_exponent(x: f64) -> Option<i32> {
    if x == 0.0 || !x.is_finite() {
        return None;
    }
    let raw = ((x.to_bits() >> 52) & 0x7ff) as i32;
    if raw == 0 {
        // subnormal
        Some(f64_exponent(x * 2f64.powi(64))? - 64)
    } else {
        Some(raw - 1022)
    }
}

/// Binary64 storage re-rounded to `bits < 53` after every operation.
///
/// Binary64 results of `+ - * /` and `sqrt` are correctly rounded, so the
/// re-rounded value differs from a direct `bits`-wide rounding only in
/// double-rounding ties, which need `bits > 26` and an exact binary64 tie.
#[derive(Clone, Copy, PartialEq)]
pub struct Emulated {
    value: f64,
    bits: u32,
}

impl Emulated {
    pub fn new(value: f64, bits: u32) -> Self {
        assert!((MIN_BITS..53).contains(&bits), "emulated width must be in [8, 52]");
        Self { value: round_f64(value, bits), bits }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    fn wrap(&self, v: f64) -> Self {
        Self { value: round_f64(v, self.bits), bits: self.bits }
    }
}

impl fmt::Debug for Emulated {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}@{}", self.value, self.bits)
    }
}

impl Real for Emulated {
    fn bits(&self) -> u32 {
        self.bits
    }
    fn lift(&self, x: f64) -> Self {
        self.wrap(x)
    }
    fn from_float(&self, x: &Float) -> Self {
        let (v, _) = Float::with_val_round(self.bits, x, Round::Nearest);
        self.wrap(v.to_f64())
    }
    fn pi(&self) -> Self {
        self.from_float(&Float::with_val(self.bits + 8, Constant::Pi))
    }
    fn add(&self, rhs: &Self) -> Self {
        self.wrap(self.value + rhs.value)
    }
    fn sub(&self, rhs: &Self) -> Self {
        self.wrap(self.value - rhs.value)
    }
    fn mul(&self, rhs: &Self) -> Self {
        self.wrap(self.value * rhs.value)
    }
    fn div(&self, rhs: &Self) -> Self {
        self.wrap(self.value / rhs.value)
    }
    fn neg(&self) -> Self {
        Self { value: -self.value, bits: self.bits }
    }
    fn sqrt(&self) -> Self {
        self.wrap(self.value.sqrt())
    }
    fn hypot(&self, rhs: &Self) -> Self {
        self.wrap(self.value.hypot(rhs.value))
    }
    fn sin_cos(&self) -> (Self, Self) {
        let (s, c) = self.value.sin_cos();
        (self.wrap(s), self.wrap(c))
    }
    fn mul_pow2(&self, k: i32) -> Self {
        self.wrap(self.value * 2f64.powi(k))
    }
    fn exponent(&self) -> Option<i32> {
        f64_exponent(self.value)
    }
    fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
    fn is_zero(&self) -> bool {
        self.value == 0.0
    }
    fn is_sign_negative(&self) -> bool {
        self.value.is_sign_negative()
    }
    fn to_f64(&self) -> f64 {
        self.value
    }
    fn to_float(&self) -> Float {
        Float::with_val(53, self.value)
    }
}

/// MPFR float at a fixed precision above 53 bits.
#[derive(Clone, PartialEq)]
pub struct Multi(Float);

impl Multi {
    pub fn new(value: f64, bits: u32) -> Self {
        Self(Float::with_val(bits, value))
    }

    pub fn from_float_at(value: &Float, bits: u32) -> Self {
        Self(Float::with_val(bits, value))
    }

    pub fn as_float(&self) -> &Float {
        &self.0
    }

    fn prec(&self) -> u32 {
        self.0.prec()
    }
}

impl fmt::Debug for Multi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.0.to_string_radix(10, Some(20)), self.prec())
    }
}

impl Real for Multi {
    fn bits(&self) -> u32 {
        self.prec()
    }
    fn lift(&self, x: f64) -> Self {
        Self(Float::with_val(self.prec(), x))
    }
    fn from_float(&self, x: &Float) -> Self {
        Self(Float::with_val(self.prec(), x))
    }
    fn pi(&self) -> Self {
        Self(Float::with_val(self.prec(), Constant::Pi))
    }
    fn add(&self, rhs: &Self) -> Self {
        Self(Float::with_val(self.prec(), &self.0 + &rhs.0))
    }
    fn sub(&self, rhs: &Self) -> Self {
        Self(Float::with_val(self.prec(), &self.0 - &rhs.0))
    }
    fn mul(&self, rhs: &Self) -> Self {
        Self(Float::with_val(self.prec(), &self.0 * &rhs.0))
    }
    fn div(&self, rhs: &Self) -> Self {
        Self(Float::with_val(self.prec(), &self.0 / &rhs.0))
    }
    fn neg(&self) -> Self {
        Self(Float::with_val(self.prec(), -&self.0))
    }
    fn sqrt(&self) -> Self {
        Self(Float::with_val(self.prec(), self.0.sqrt_ref()))
    }
    fn hypot(&self, rhs: &Self) -> Self {
        Self(Float::with_val(self.prec(), self.0.hypot_ref(&rhs.0)))
    }
    fn sin_cos(&self) -> (Self, Self) {
        let p = self.prec();
        let mut pair = (Float::new(p), Float::new(p));
        rug::Assign::assign(&mut pair, self.0.sin_cos_ref());
        (Self(pair.0), Self(pair.1))
    }
    fn mul_pow2(&self, k: i32) -> Self {
        Self(Float::with_val(self.prec(), &self.0 << k))
    }
    fn exponent(&self) -> Option<i32> {
        if self.0.is_normal() {
            self.0.get_exp()
        } else {
            None
        }
    }
    fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
    fn is_sign_negative(&self) -> bool {
        self.0.is_sign_negative()
    }
    fn to_f64(&self) -> f64 {
        self.0.to_f64()
    }
    fn to_float(&self) -> Float {
        self.0.clone()
    }
}

/// Calls `run` with a prototype value of the backend that `bits` selects.
pub trait WithReal {
    type Output;
    fn run<R: Real>(self, proto: R) -> Self::Output;
}

pub fn dispatch<V: WithReal>(bits: u32, visitor: V) -> V::Output {
    match backend_for(bits) {
        Backend::Native => visitor.run(0.0f64),
        Backend::Emulated(b) => visitor.run(Emulated::new(0.0, b)),
        Backend::Multi(b) => visitor.run(Multi::new(0.0, b)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ulp_floor_matches_definition() {
        for bits in [24u32, 53, 128] {
            let spec = PrecisionSpec::floor(bits, 0.01).unwrap();
            assert_eq!(ulp_floor(&spec), 2f64.powi(-(bits as i32)));
            assert_eq!(ln_ulp_floor(&spec), -(bits as f64) * 2f64.ln());
        }
        let spec = PrecisionSpec::floor(53, 0.01).unwrap();
        assert!((ulp_floor(&spec) - 1.11e-16).abs() < 1e-18);
        assert_eq!(spec.ulp(), 2f64.powi(-52));
    }

    #[test]
    fn spec_rejects_out_of_range_bits_and_steps() {
        assert!(matches!(PrecisionSpec::floor(7, 0.01), Err(Error::BitsOutOfRange(7))));
        assert!(PrecisionSpec::floor(4097, 0.01).is_err());
        assert!(PrecisionSpec::floor(8, 0.01).is_ok());
        assert!(PrecisionSpec::floor(4096, 0.01).is_ok());
        assert!(PrecisionSpec::floor(53, 0.0).is_err());
        assert!(PrecisionSpec::floor(53, f64::NAN).is_err());
    }

    #[test]
    fn backend_choice() {
        assert_eq!(PrecisionSpec::floor(53, 0.01).unwrap().backend(), Backend::Native);
        assert_eq!(PrecisionSpec::floor(24, 0.01).unwrap().backend(), Backend::Emulated(24));
        assert_eq!(PrecisionSpec::floor(128, 0.01).unwrap().backend(), Backend::Multi(128));
        let inj = PrecisionSpec::new(32, 0.01, SeedMode::InjectedSeed(1e-9)).unwrap();
        assert_eq!(inj.backend(), Backend::Multi(REFERENCE_BITS));
    }

    #[test]
    fn seed_mode_parsing() {
        assert_eq!(SeedMode::parse("floor").unwrap(), SeedMode::ArithmeticFloor);
        assert_eq!(SeedMode::parse("inject:1e-10").unwrap(), SeedMode::InjectedSeed(1e-10));
        assert_eq!(SeedMode::parse("inject:2^-32").unwrap(), SeedMode::InjectedSeed(2f64.powi(-32)));
        assert!(SeedMode::parse("inject:-1").is_err());
        assert!(SeedMode::parse("noise").is_err());
    }

    #[test]
    fn round_to_below_half_ulp_goes_down() {
        for bits in [8u32, 24, 53, 64, 128] {
            let spec = PrecisionSpec::floor(bits, 0.01).unwrap();
            let mut x = Float::with_val(bits + 16, 1);
            x += Float::with_val(bits + 16, Float::i_exp(1, -(bits as i32) - 3));
            let (r, flags) = round_to(&rug::Complex::with_val(bits + 16, (&x, 0)), &spec);
            assert_eq!(*r.real(), 1, "bits {bits}");
            assert_eq!(flags, RoundingFlags::default());
        }
    }

    #[test]
    fn round_to_is_idempotent_on_representables() {
        let spec = PrecisionSpec::floor(24, 0.01).unwrap();
        let x = rug::Complex::with_val(24, (0.1f32 as f64, -3.5));
        let (r, _) = round_to(&x, &spec);
        assert_eq!(r, x);
        let (rr, _) = round_to(&r, &spec);
        assert_eq!(rr, r);
    }

    #[test]
    fn round_to_maps_range_events() {
        let spec = PrecisionSpec::floor(24, 0.01).unwrap();
        let big = rug::Complex::with_val(64, (Float::with_val(64, Float::i_exp(1, 2000)), 1.0));
        let (r, flags) = round_to(&big, &spec);
        assert!(r.real().is_infinite() && !r.real().is_sign_negative());
        assert!(flags.overflow && !flags.underflow);
        let tiny = rug::Complex::with_val(64, (0.5, -Float::with_val(64, Float::i_exp(1, -1100))));
        let (r, flags) = round_to(&tiny, &spec);
        assert!(r.imag().is_zero() && r.imag().is_sign_negative());
        assert!(flags.underflow && !flags.overflow);
    }

    #[test]
    fn round_f64_examples() {
        assert_eq!(round_f64(1.0 + 2f64.powi(-27), 24), 1.0);
        // tie: 1 + 2^-24 sits halfway between 1 and 1 + 2^-23; even neighbour is 1
        assert_eq!(round_f64(1.0 + 2f64.powi(-24), 24), 1.0);
        // tie above an odd neighbour rounds up to the even one
        let odd = 1.0 + 2f64.powi(-23);
        assert_eq!(round_f64(odd + 2f64.powi(-24), 24), 1.0 + 2f64.powi(-22));
        assert_eq!(round_f64(-(1.0 + 2f64.powi(-27)), 24), -1.0);
        // carry into the exponent
        assert_eq!(round_f64(2.0 - 2f64.powi(-30), 24), 2.0);
        assert_eq!(round_f64(f64::MAX, 24), f64::INFINITY);
        assert_eq!(round_f64(1e-310, 24), 0.0);
    }

    #[test]
    fn emulated_ops_round_each_result() {
        let a = Emulated::new(1.0, 8);
        let b = a.lift(2f64.powi(-9));
        assert_eq!(b.value(), 2f64.powi(-9));
        assert_eq!(a.add(&b).value(), 1.0);
        assert_eq!(a.lift(1.0 / 3.0).value(), round_f64(1.0 / 3.0, 8));
        assert_eq!(a.pi().value(), 3.140625);
    }

    #[test]
    fn multi_ops_keep_precision() {
        let a = Multi::new(1.0, 128);
        let third = a.div(&a.lift(3.0));
        assert_eq!(third.bits(), 128);
        let back = third.mul(&a.lift(3.0));
        assert!((back.to_f64() - 1.0).abs() < 1e-36);
        let (s, c) = a.pi().mul_pow2(-2).sin_cos();
        let diff = s.sub(&c).to_float().abs();
        assert!(diff < 1e-37);
        assert_eq!(a.lift(3.0).exponent(), Some(2));
        assert_eq!(3.0f64.exponent(), Some(2));
        assert_eq!(Emulated::new(0.75, 10).exponent(), Some(0));
        assert_eq!(1e-310f64.exponent(), Some(-1029));
    }

    // Independent oracle: round the exact dyadic value through big integers.
    fn bigint_round(x: f64, bits: u32) -> f64 {
        use num_bigint::BigInt;
        if x == 0.0 || !x.is_finite() {
            return x;
        }
        let (mant, exp, sign) = {
            let raw = x.to_bits();
            let e = ((raw >> 52) & 0x7ff) as i32;
            let frac = raw & ((1u64 << 52) - 1);
            let (m, e) = if e == 0 { (frac, -1074) } else { (frac | (1 << 52), e - 1075) };
            (m, e, if x < 0.0 { -1.0 } else { 1.0 })
        };
        let m = BigInt::from(mant);
        let len = m.bits() as i32;
        let drop = len - bits as i32;
        if drop <= 0 {
            return x;
        }
        let unit = BigInt::from(1) << drop as usize;
        let q = &m >> drop as usize;
        let rem = &m - (&q << drop as usize);
        let twice = &rem * 2;
        let q = if twice > unit || (twice == unit && (&q % 2) == BigInt::from(1)) { q + 1 } else { q };
        let qf: f64 = q.to_string().parse().unwrap();
        sign * qf * 2f64.powi(exp + drop)
    }

    #[test]
    fn one_plus_ulp_rounds_to_even_neighbour() {
        for bits in [8u32, 16, 24, 40, 52] {
            let x = 1.0 + 2f64.powi(-(bits as i32));
            assert_eq!(round_f64(x, bits), bigint_round(x, bits), "bits {bits}");
            assert_eq!(round_f64(x, bits), 1.0);
        }
    }

    proptest! {
        #[test]
        fn round_f64_matches_bigint_oracle(x in -1e300f64..1e300, bits in 8u32..53) {
            prop_assume!(x.abs() >= f64::MIN_POSITIVE);
            prop_assert_eq!(round_f64(x, bits), bigint_round(x, bits));
        }

        #[test]
        fn round_f64_matches_mpfr(x in -1e30f64..1e30, bits in 8u32..53) {
            prop_assume!(x.abs() >= 1e-30);
            let (r, _) = round_real(&Float::with_val(53, x), bits);
            prop_assert_eq!(round_f64(x, bits), r.to_f64());
        }

        #[test]
        fn rounding_is_monotone_and_idempotent(a in -1e6f64..1e6, b in -1e6f64..1e6, bits in 8u32..53) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(round_f64(lo, bits) <= round_f64(hi, bits));
            let r = round_f64(a, bits);
            prop_assert_eq!(round_f64(r, bits), r);
        }
    }
}
