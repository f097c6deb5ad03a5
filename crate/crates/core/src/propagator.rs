//! Fixed-step RK4 propagation of `dψ/dt = -i H(z(t)) ψ` over one period, with
//! projection onto the instantaneous eigenbasis, and a direct integrator for
//! the population-ratio Riccati equation.

use std::f64::consts::LN_2;
use std::io::{self, Write};

use num_complex::Complex64;
use rug::Float;
use serde::{Deserialize, Serialize};

use crate::complex::Cx;
use crate::error::{Error, Result};
use crate::model::{
    align, last_exchange_time, rotation, Branch, BranchSelection, EnergyPath, LoopClass,
    LoopGeometry, DEFAULT_EPS_EP,
};
use crate::precision::{dispatch, PrecisionSpec, Real, SeedMode, WithReal, REFERENCE_BITS};

pub const DEFAULT_SAMPLE_COUNT: usize = 4096;
/// Smallest accepted `T / dt`.
pub const MIN_STEPS_PER_PERIOD: f64 = 100.0;
/// Riccati chart switch threshold on `|R|` and `|1/R|`.
pub const CHART_SWITCH: f64 = 1e3;
/// Adiabaticity warning level for `|h / 2E|`.
pub const ADIABATICITY_WARN: f64 = 0.1;
/// Allowed change of the end-of-period `ln|R|` when the step is halved.
pub const DT_PLATEAU_TOL: f64 = 0.01;

// keep the state within a comfortable exponent window
const RESCALE_EXP: i32 = 32;

/// Diagnostics collected during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunFlags {
    pub overflow: bool,
    pub underflow: bool,
    /// Sample indices where the selected amplitude vanished.
    pub ratio_undefined: Vec<usize>,
    /// Time at which an injected seed was added.
    pub injected_at: Option<f64>,
}

/// Sampled state of one full-period propagation.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub geometry: LoopGeometry,
    pub precision: PrecisionSpec,
    pub selection: BranchSelection,
    /// Number of RK4 steps and the step actually used, `T / steps`.
    pub steps: u64,
    pub dt_used: f64,
    pub times: Vec<f64>,
    pub psi: Vec<[rug::Complex; 2]>,
    pub c_plus: Vec<rug::Complex>,
    pub c_minus: Vec<rug::Complex>,
    pub ratio: Vec<rug::Complex>,
    /// `ln|R|`, evaluated at [`REFERENCE_BITS`] on the stored values.
    pub ln_abs_ratio: Vec<f64>,
    /// Tracked energy branch `E(t)`.
    pub energy: Vec<Complex64>,
    /// Natural log of the factor removed from `psi` by rescaling.
    pub log_scale: Vec<f64>,
    pub flags: RunFlags,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_ln_abs_ratio(&self) -> f64 {
        *self.ln_abs_ratio.last().expect("records hold at least two samples")
    }

    /// `(c+, c-)` as double precision values, scaled back by `log_scale` only
    /// in the sense that both share it.
    pub fn amplitudes_c64(&self, k: usize) -> (Complex64, Complex64) {
        (mpc_to_c64(&self.c_plus[k]), mpc_to_c64(&self.c_minus[k]))
    }

    /// Trajectory CSV with `max(m/3, 17)` significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let digits = csv_digits(self.precision.bits());
        writeln!(out, "t,re_cplus,im_cplus,re_cminus,im_cminus,ln_abs_R,log_scale")?;
        for k in 0..self.len() {
            let f = |x: &Float| format_sig(x, digits);
            let d = |x: f64| format_sig(&Float::with_val(53, x), digits);
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                d(self.times[k]),
                f(self.c_plus[k].real()),
                f(self.c_plus[k].imag()),
                f(self.c_minus[k].real()),
                f(self.c_minus[k].imag()),
                d(self.ln_abs_ratio[k]),
                d(self.log_scale[k]),
            )?;
        }
        Ok(())
    }
}

pub fn csv_digits(bits: u32) -> usize {
    ((bits / 3) as usize).max(17)
}

/// Locale-independent scientific notation with `digits` significant digits.
pub fn format_sig(x: &Float, digits: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x.is_sign_negative() { "-inf".into() } else { "inf".into() };
    }
    if x.is_zero() {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    x.to_string_radix(10, Some(digits))
}

fn mpc_to_c64(z: &rug::Complex) -> Complex64 {
    Complex64::new(z.real().to_f64(), z.imag().to_f64())
}

fn check_inputs(geom: &LoopGeometry, spec: &PrecisionSpec, sample_count: usize) -> Result<u64> {
    if sample_count < 2 {
        return Err(Error::InvalidArgument(format!("sample count must be at least 2, got {sample_count}")));
    }
    let ratio = geom.period() / spec.dt();
    if ratio < MIN_STEPS_PER_PERIOD * (1.0 - 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "T/dt = {ratio:.3} is below the minimum of {MIN_STEPS_PER_PERIOD}"
        )));
    }
    if ratio > 1e12 {
        return Err(Error::InvalidArgument(format!("T/dt = {ratio:e} is too large")));
    }
    Ok((ratio - 1e-9).ceil() as u64)
}

/// Step indices at which samples are stored: uniform in time, first and last step included.
fn sample_steps(steps: u64, sample_count: usize) -> Vec<u64> {
    if sample_count as u64 > steps {
        return (0..=steps).collect();
    }
    let last = (sample_count - 1) as u64;
    let mut out: Vec<u64> = (0..=last)
        .map(|s| ((s as u128 * steps as u128 + last as u128 / 2) / last as u128) as u64)
        .collect();
    out.dedup();
    out
}

/// The loop evaluated in the run's arithmetic.
pub(crate) struct LoopAt<R> {
    g0: R,
    r: R,
    phi0: R,
    pi: R,
    sign: f64,
    /// `f r` at working precision.
    fr: R,
    bits: u32,
}

impl<R: Real> LoopAt<R> {
    pub(crate) fn new(proto: &R, geom: &LoopGeometry) -> Self {
        let pi = proto.pi();
        let phi0 = if (geom.phi0() - std::f64::consts::PI).abs() < 1e-15 {
            pi.clone()
        } else {
            proto.lift(geom.phi0())
        };
        let two_pi = pi.mul_pow2(1);
        let fr = two_pi.mul(&proto.lift(geom.r())).div(&proto.lift(geom.period()));
        let fr = if geom.direction().sign() < 0.0 { fr.neg() } else { fr };
        Self {
            g0: proto.lift(geom.g0()),
            r: proto.lift(geom.r()),
            phi0,
            pi,
            sign: geom.direction().sign(),
            fr,
            bits: proto.bits(),
        }
    }

    /// `(cos φ, sin φ)` of the loop phase at `t = T num / den`, `num` reduced modulo `den`.
    fn rotor(&self, num: u64, den: u64) -> (R, R) {
        let prec = self.bits.max(64) + 8;
        let frac = Float::with_val(prec, num % den) / Float::with_val(prec, den);
        let frac = self.pi.from_float(&frac);
        let mut angle = self.pi.mul_pow2(1).mul(&frac);
        if self.sign < 0.0 {
            angle = angle.neg();
        }
        let (s, c) = angle.add(&self.phi0).sin_cos();
        (c, s)
    }

    /// `z = g0 - r e^{-iφ}`.
    pub(crate) fn z(&self, num: u64, den: u64) -> Cx<R> {
        let (c, s) = self.rotor(num, den);
        Cx::new(self.g0.sub(&self.r.mul(&c)), self.r.mul(&s))
    }

    /// `z` and `h = -i ż / (2 (1 - z²))` with `ż = i f r e^{-iφ}`.
    pub(crate) fn z_and_h(&self, num: u64, den: u64) -> (Cx<R>, Cx<R>) {
        let (c, s) = self.rotor(num, den);
        let z = Cx::new(self.g0.sub(&self.r.mul(&c)), self.r.mul(&s));
        let one = Cx::one(&self.g0);
        let e2 = &one - &(&z * &z);
        // -i * i f r e^{-iφ} = f r e^{-iφ}
        let num_h = Cx::new(self.fr.mul(&c), self.fr.mul(&s).neg());
        (z, num_h.div(&e2.mul_pow2(1)))
    }
}

/// Tracked `sqrt(1 - z²)` in working precision, aligned with the reference branch.
fn energy_on_branch<R: Real>(z: &Cx<R>, hint: Complex64) -> Cx<R> {
    let one = Cx::one(&z.re);
    let e = (&one - &(z * z)).sqrt();
    let c = e.to_c64();
    if align(c, hint) == c {
        e
    } else {
        -&e
    }
}

/// `-iHψ = (z ψ0 + i ψ1, i ψ0 - z ψ1)`.
fn rhs<R: Real>(z: &Cx<R>, psi: &[Cx<R>; 2]) -> [Cx<R>; 2] {
    [&(z * &psi[0]) + &psi[1].mul_i(), &psi[0].mul_i() - &(z * &psi[1])]
}

fn axpy<R: Real>(psi: &[Cx<R>; 2], h: &R, k: &[Cx<R>; 2]) -> [Cx<R>; 2] {
    [&psi[0] + &k[0].scale(h), &psi[1] + &k[1].scale(h)]
}

/// Projection coefficients `(c+, c-)` in the frame of `z` on energy branch `e`.
fn project<R: Real>(z: &Cx<R>, e: &Cx<R>, psi: &[Cx<R>; 2]) -> (Cx<R>, Cx<R>, Cx<R>, Cx<R>) {
    let (c, s) = rotation(z, e);
    let cp = &(&c * &psi[0]) + &(&s * &psi[1]);
    let cm = &(&c * &psi[1]) - &(&s * &psi[0]);
    (cp, cm, c, s)
}

/// Settings of a Schrödinger run.
#[derive(Debug, Clone, Copy)]
struct SchrodingerJob {
    geom: LoopGeometry,
    sel: BranchSelection,
    spec: PrecisionSpec,
    sample_count: usize,
    steps: u64,
    injection: Option<(u64, f64)>,
}

impl WithReal for SchrodingerJob {
    type Output = TrajectoryRecord;

    fn run<R: Real>(self, proto: R) -> TrajectoryRecord {
        let job = self;
        let n = job.steps;
        let den = 2 * n;
        let lp = LoopAt::new(&proto, &job.geom);
        let path = EnergyPath::new(&job.geom);
        let period = job.geom.period();
        let dt_used = period / n as f64;
        let h = proto.lift(period).div(&proto.lift(n as f64));
        let half = h.mul_pow2(-1);
        let sixth = h.div(&proto.lift(6.0));
        let samples = sample_steps(n, job.sample_count);

        let z0 = lp.z(0, den);
        let e0 = energy_on_branch(&z0, path.energy(0.0));
        let (c, s) = rotation(&z0, &e0);
        let mut psi = match job.sel.initial_branch {
            Branch::Plus => [c, s],
            Branch::Minus => [-&s, c],
        };

        let mut rec = TrajectoryRecord {
            geometry: job.geom,
            precision: job.spec,
            selection: job.sel,
            steps: n,
            dt_used,
            times: Vec::with_capacity(samples.len()),
            psi: Vec::with_capacity(samples.len()),
            c_plus: Vec::with_capacity(samples.len()),
            c_minus: Vec::with_capacity(samples.len()),
            ratio: Vec::with_capacity(samples.len()),
            ln_abs_ratio: Vec::with_capacity(samples.len()),
            energy: Vec::with_capacity(samples.len()),
            log_scale: Vec::with_capacity(samples.len()),
            flags: RunFlags::default(),
        };
        let mut log_scale = 0.0f64;
        let mut next_sample = 0usize;
        let mut z_start = z0;

        for k in 0..=n {
            if k > 0 {
                let j = 2 * (k - 1);
                let z_mid = lp.z(j + 1, den);
                let z_end = lp.z(j + 2, den);
                let k1 = rhs(&z_start, &psi);
                let k2 = rhs(&z_mid, &axpy(&psi, &half, &k1));
                let k3 = rhs(&z_mid, &axpy(&psi, &half, &k2));
                let k4 = rhs(&z_end, &axpy(&psi, &h, &k3));
                let two = proto.lift(2.0);
                let sum0 = &(&k1[0] + &k2[0].scale(&two)) + &(&k3[0].scale(&two) + &k4[0]);
                let sum1 = &(&k1[1] + &k2[1].scale(&two)) + &(&k3[1].scale(&two) + &k4[1]);
                psi = [&psi[0] + &sum0.scale(&sixth), &psi[1] + &sum1.scale(&sixth)];
                z_start = z_end;

                if let Some(e) = max_exponent(&psi) {
                    if e.abs() > RESCALE_EXP {
                        psi = [psi[0].mul_pow2(-e), psi[1].mul_pow2(-e)];
                        log_scale += e as f64 * LN_2;
                    }
                }
                if !psi[0].is_finite() || !psi[1].is_finite() {
                    rec.flags.overflow = true;
                }
            }

            if let Some((k_inj, amp)) = job.injection {
                if k == k_inj {
                    let t = period * k as f64 / n as f64;
                    let e = energy_on_branch(&z_start, path.energy(t));
                    let (mut cp, mut cm, c, s) = project(&z_start, &e, &psi);
                    let amp = proto.lift(amp);
                    match job.sel.initial_branch {
                        Branch::Plus => cm = &cm + &cp.scale(&amp),
                        Branch::Minus => cp = &cp + &cm.scale(&amp),
                    }
                    // ψ = c+ (c, s) + c- (-s, c)
                    psi = [&(&cp * &c) - &(&cm * &s), &(&cp * &s) + &(&cm * &c)];
                    rec.flags.injected_at = Some(t);
                }
            }

            if next_sample < samples.len() && samples[next_sample] == k {
                let t = if k == n { period } else { period * k as f64 / n as f64 };
                let e = energy_on_branch(&z_start, path.energy(t));
                let (cp, cm, _, _) = project(&z_start, &e, &psi);
                let (sel_c, other_c) = match job.sel.initial_branch {
                    Branch::Plus => (&cp, &cm),
                    Branch::Minus => (&cm, &cp),
                };
                let cp_m = cp.to_mpc();
                let cm_m = cm.to_mpc();
                let (ratio, ln_r) = if k == 0 {
                    (rug::Complex::with_val(cp_m.prec(), 0), f64::NEG_INFINITY)
                } else if sel_c.is_zero() || !sel_c.is_finite() {
                    if sel_c.is_zero() {
                        rec.flags.underflow = true;
                    }
                    rec.flags.ratio_undefined.push(rec.times.len());
                    (rug::Complex::with_val(cp_m.prec(), (f64::NAN, f64::NAN)), f64::NAN)
                } else {
                    let num = other_c.to_mpc();
                    let den_c = sel_c.to_mpc();
                    let ratio = rug::Complex::with_val(num.prec().0.max(53), &num / &den_c);
                    (ratio, ln_abs_ratio(&num, &den_c))
                };
                rec.times.push(t);
                rec.psi.push([psi[0].to_mpc(), psi[1].to_mpc()]);
                rec.c_plus.push(cp_m);
                rec.c_minus.push(cm_m);
                rec.ratio.push(ratio);
                rec.ln_abs_ratio.push(ln_r);
                rec.energy.push(e.to_c64());
                rec.log_scale.push(log_scale);
                next_sample += 1;
            }
        }
        rec
    }
}

fn max_exponent<R: Real>(psi: &[Cx<R>; 2]) -> Option<i32> {
    match (psi[0].exponent(), psi[1].exponent()) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    }
}

/// `ln|num| - ln|den|` at reference precision.
fn ln_abs_ratio(num: &rug::Complex, den: &rug::Complex) -> f64 {
    let p = REFERENCE_BITS;
    let a = Float::with_val(p, num.abs_ref());
    let b = Float::with_val(p, den.abs_ref());
    if a.is_zero() {
        return f64::NEG_INFINITY;
    }
    let diff = a.ln() - b.ln();
    diff.to_f64()
}

/// Propagates one period from the selected eigenvector.
///
/// Injected-seed runs work at [`REFERENCE_BITS`] (or more) and add the seed
/// to the other amplitude at the last exchange time before `T`.
pub fn propagate_schrodinger(
    geom: &LoopGeometry,
    sel: BranchSelection,
    spec: &PrecisionSpec,
    sample_count: usize,
) -> Result<TrajectoryRecord> {
    let steps = check_inputs(geom, spec, sample_count)?;
    let injection = match spec.seed_mode() {
        SeedMode::ArithmeticFloor => None,
        SeedMode::InjectedSeed(amp) => match last_exchange_time(geom) {
            Ok(t_star) => {
                let k = ((t_star / geom.period()) * steps as f64).round() as u64;
                Some((k.clamp(1, steps), amp))
            }
            Err(Error::NoExchange) => None,
            Err(e) => return Err(e),
        },
    };
    let job = SchrodingerJob { geom: *geom, sel, spec: *spec, sample_count, steps, injection };
    Ok(dispatch(spec.working_bits(), job))
}

/// `ln|R(T)|` of one period, storing only the end points.
pub fn end_of_period_ln_ratio(geom: &LoopGeometry, sel: BranchSelection, spec: &PrecisionSpec) -> Result<f64> {
    Ok(propagate_schrodinger(geom, sel, spec, 2)?.final_ln_abs_ratio())
}

/// Outcome of repeating a run at half the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtConvergence {
    pub dt: f64,
    pub dt_half: f64,
    pub ln_abs_ratio: f64,
    pub ln_abs_ratio_half: f64,
    /// `|Δ ln|R(T)|| / max(1, |ln|R(T)||)`.
    pub max_deviation: f64,
    pub passed: bool,
}

pub fn check_step_convergence(
    geom: &LoopGeometry,
    sel: BranchSelection,
    spec: &PrecisionSpec,
) -> Result<DtConvergence> {
    let a = end_of_period_ln_ratio(geom, sel, spec)?;
    let half = spec.with_dt(spec.dt() / 2.0)?;
    let b = end_of_period_ln_ratio(geom, sel, &half)?;
    let max_deviation = (a - b).abs() / a.abs().max(1.0);
    Ok(DtConvergence {
        dt: spec.dt(),
        dt_half: half.dt(),
        ln_abs_ratio: a,
        ln_abs_ratio_half: b,
        max_deviation,
        passed: max_deviation < DT_PLATEAU_TOL,
    })
}

/// [`propagate_schrodinger`] followed by the dt/2 check; fails with `STEP_TOO_COARSE`.
pub fn propagate_checked(
    geom: &LoopGeometry,
    sel: BranchSelection,
    spec: &PrecisionSpec,
    sample_count: usize,
) -> Result<(TrajectoryRecord, DtConvergence)> {
    let rec = propagate_schrodinger(geom, sel, spec, sample_count)?;
    let half = spec.with_dt(spec.dt() / 2.0)?;
    let b = end_of_period_ln_ratio(geom, sel, &half)?;
    let a = rec.final_ln_abs_ratio();
    let max_deviation = (a - b).abs() / a.abs().max(1.0);
    let conv = DtConvergence {
        dt: spec.dt(),
        dt_half: half.dt(),
        ln_abs_ratio: a,
        ln_abs_ratio_half: b,
        max_deviation,
        passed: max_deviation < DT_PLATEAU_TOL,
    };
    if !conv.passed {
        return Err(Error::StepTooCoarse {
            quantity: "ln|R(T)|".into(),
            deviation: max_deviation,
            limit: DT_PLATEAU_TOL,
        });
    }
    Ok((rec, conv))
}

/// Direct integration of the Riccati equation for the tracked ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiRecord {
    pub times: Vec<f64>,
    /// `R(t)`; infinite where `|R|` leaves the double range.
    pub ratio: Vec<Complex64>,
    pub ln_abs_ratio: Vec<f64>,
    /// Times where the integration switched to `S = 1/R` and back.
    pub chart_switches: Vec<f64>,
}

impl RiccatiRecord {
    pub fn final_ln_abs_ratio(&self) -> f64 {
        *self.ln_abs_ratio.last().expect("records hold at least two samples")
    }
}

#[derive(Debug, Clone, Copy)]
struct RiccatiJob {
    geom: LoopGeometry,
    sel: BranchSelection,
    sample_count: usize,
    steps: u64,
}

impl RiccatiJob {
    /// `E` and `h` at `t = T num / den`.
    fn coefficients<R: Real>(&self, lp: &LoopAt<R>, path: &EnergyPath, num: u64, den: u64) -> (Cx<R>, Cx<R>) {
        let proto = &lp.g0;
        let t = self.geom.period() * num as f64 / den as f64;
        if matches!(self.geom.classify(), Ok(LoopClass::EpEncircling)) {
            // closed forms near the EP: E = -i sqrt(2r) e^{-i(ft + θ0)/2}, h = f/4
            let f = self.geom.frequency();
            let phase = 0.5 * (f * t + self.geom.stokes_angle());
            let e = Complex64::new(0.0, -(2.0 * self.geom.r()).sqrt()) * Complex64::from_polar(1.0, -phase);
            return (Cx::lift(proto, e), Cx::lift(proto, Complex64::new(f / 4.0, 0.0)));
        }
        let (z, h) = lp.z_and_h(num, den);
        let e = energy_on_branch(&z, path.energy(t));
        (e, h)
    }
}

impl WithReal for RiccatiJob {
    type Output = RiccatiRecord;

    fn run<R: Real>(self, proto: R) -> RiccatiRecord {
        let n = self.steps;
        let den = 2 * n;
        let lp = LoopAt::new(&proto, &self.geom);
        let path = EnergyPath::new(&self.geom);
        let period = self.geom.period();
        let h_step = proto.lift(period).div(&proto.lift(n as f64));
        let half = h_step.mul_pow2(-1);
        let sixth = h_step.div(&proto.lift(6.0));
        let two = proto.lift(2.0);
        let samples = sample_steps(n, self.sample_count);
        // R+ flows with sign +1, R- with -1; the reciprocal chart flips the sign
        let base = self.sel.initial_branch.sign();
        let one = Cx::one(&proto);

        let flow = |sign: f64, e: &Cx<R>, h: &Cx<R>, x: &Cx<R>| -> Cx<R> {
            let lin = (e * x).mul_i().mul_pow2(1);
            let quad = h * &(&one + &(x * x));
            let v = &lin + &quad;
            if sign > 0.0 {
                v
            } else {
                -&v
            }
        };

        let mut x = Cx::zero(&proto);
        let mut reciprocal = false;
        let mut rec = RiccatiRecord {
            times: Vec::with_capacity(samples.len()),
            ratio: Vec::with_capacity(samples.len()),
            ln_abs_ratio: Vec::with_capacity(samples.len()),
            chart_switches: Vec::new(),
        };
        let mut next_sample = 0usize;
        let mut start = self.coefficients(&lp, &path, 0, den);

        for k in 0..=n {
            if k > 0 {
                let j = 2 * (k - 1);
                let mid = self.coefficients(&lp, &path, j + 1, den);
                let end = self.coefficients(&lp, &path, j + 2, den);
                let sign = if reciprocal { -base } else { base };
                let k1 = flow(sign, &start.0, &start.1, &x);
                let k2 = flow(sign, &mid.0, &mid.1, &(&x + &k1.scale(&half)));
                let k3 = flow(sign, &mid.0, &mid.1, &(&x + &k2.scale(&half)));
                let k4 = flow(sign, &end.0, &end.1, &(&x + &k3.scale(&h_step)));
                let sum = &(&k1 + &k2.scale(&two)) + &(&k3.scale(&two) + &k4);
                x = &x + &sum.scale(&sixth);
                start = end;
                if x.abs().to_f64() > CHART_SWITCH {
                    x = x.inv();
                    reciprocal = !reciprocal;
                    rec.chart_switches.push(period * k as f64 / n as f64);
                }
            }
            if next_sample < samples.len() && samples[next_sample] == k {
                let t = if k == n { period } else { period * k as f64 / n as f64 };
                let xm = x.to_mpc();
                let ln_x = if x.is_zero() {
                    f64::NEG_INFINITY
                } else {
                    Float::with_val(REFERENCE_BITS, xm.abs_ref()).ln().to_f64()
                };
                let (ratio, ln_r) = if reciprocal {
                    (Complex64::new(1.0, 0.0) / x.to_c64(), -ln_x)
                } else {
                    (x.to_c64(), ln_x)
                };
                rec.times.push(t);
                rec.ratio.push(ratio);
                rec.ln_abs_ratio.push(ln_r);
                next_sample += 1;
            }
        }
        rec
    }
}

/// RK4 on the Riccati equation `Ṙ± = ±2iE R± ± h (1 + R±²)`, `R(0) = 0`.
pub fn propagate_riccati(
    geom: &LoopGeometry,
    sel: BranchSelection,
    spec: &PrecisionSpec,
    sample_count: usize,
) -> Result<RiccatiRecord> {
    let steps = check_inputs(geom, spec, sample_count)?;
    if !matches!(geom.classify(), Ok(LoopClass::EpEncircling)) {
        // the exact coefficients need a frame everywhere on the loop
        let path = EnergyPath::new(geom);
        let min = path.grid().iter().map(|e| e.norm_sqr()).fold(f64::INFINITY, f64::min);
        if min <= DEFAULT_EPS_EP {
            let k = path.grid().iter().position(|e| e.norm_sqr() == min).unwrap_or(0);
            return Err(Error::EpDegeneracy { z: geom.z_at(path.grid_time(k)), distance: min });
        }
    }
    let job = RiccatiJob { geom: *geom, sel, sample_count, steps };
    Ok(dispatch(spec.working_bits(), job))
}

/// Instantaneous fixed points of the Riccati flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoints {
    pub t: f64,
    pub r_ad: Complex64,
    pub r_nad: Complex64,
    /// `|h / 2E|`.
    pub adiabaticity: f64,
    /// Set when `|h / 2E| > 0.1`.
    pub non_adiabatic_warning: bool,
    /// `Im E(t) > 0`: `R_ad` attracts the `R+` flow and repels the `R-` flow.
    pub im_energy_positive: bool,
}

impl FixedPoints {
    pub fn r_ad_stable_for(&self, branch: Branch) -> bool {
        match branch {
            Branch::Plus => self.im_energy_positive,
            Branch::Minus => !self.im_energy_positive,
        }
    }
}

/// `R_ad = ih/2E` and `R_nad = 2E/(ih)` on the tracked energy branch.
pub fn fixed_points(geom: &LoopGeometry, t: f64) -> Result<FixedPoints> {
    let path = EnergyPath::new(geom);
    let e = path.energy(t);
    if e.norm_sqr() <= DEFAULT_EPS_EP {
        return Err(Error::EpDegeneracy { z: geom.z_at(t), distance: e.norm_sqr() });
    }
    let h = -Complex64::i() * geom.z_dot_at(t) / (2.0 * e * e);
    let ih = Complex64::i() * h;
    let r_ad = ih / (2.0 * e);
    let r_nad = 2.0 * e / ih;
    let adiabaticity = (h / (2.0 * e)).norm();
    Ok(FixedPoints {
        t,
        r_ad,
        r_nad,
        adiabaticity,
        non_adiabatic_warning: adiabaticity > ADIABATICITY_WARN,
        im_energy_positive: e.im > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{select_branch, spectral_frame_near, Direction};

    fn f64_spec(dt: f64) -> PrecisionSpec {
        PrecisionSpec::floor(53, dt).unwrap()
    }

    #[test]
    fn sample_steps_cover_ends() {
        assert_eq!(sample_steps(10, 2), vec![0, 10]);
        assert_eq!(sample_steps(4, 100), vec![0, 1, 2, 3, 4]);
        let s = sample_steps(10_000, 4096);
        assert_eq!(s.len(), 4096);
        assert_eq!(*s.last().unwrap(), 10_000);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rejects_coarse_grids() {
        let geom = LoopGeometry::symmetric(0.5, 1.0).unwrap();
        let sel = BranchSelection::plus();
        assert!(propagate_schrodinger(&geom, sel, &f64_spec(0.1), 16).is_err());
        assert!(propagate_schrodinger(&geom, sel, &f64_spec(0.01), 1).is_err());
        assert!(propagate_schrodinger(&geom, sel, &f64_spec(0.01), 2).is_ok());
    }

    #[test]
    fn starts_in_selected_eigenstate() {
        for (geom, bits) in [
            (LoopGeometry::symmetric(0.5, 50.0).unwrap(), 53),
            (LoopGeometry::ep_encircling(0.3, 50.0).unwrap(), 24),
            (LoopGeometry::phase_shifted(0.3, 0.5, 50.0).unwrap(), 96),
        ] {
            let sel = select_branch(&geom).unwrap();
            let spec = PrecisionSpec::floor(bits, 0.05).unwrap();
            let rec = propagate_schrodinger(&geom, sel, &spec, 64).unwrap();
            assert!(rec.ratio[0].real().is_zero() && rec.ratio[0].imag().is_zero());
            assert_eq!(rec.times[0], 0.0);
            assert_eq!(*rec.times.last().unwrap(), 50.0);
            let n = rec.len();
            for v in [rec.psi.len(), rec.c_plus.len(), rec.c_minus.len(), rec.ratio.len(), rec.energy.len(), rec.log_scale.len()] {
                assert_eq!(v, n);
            }
        }
    }

    #[test]
    fn reconstruction_and_ratio_definition() {
        let geom = LoopGeometry::offset(0.1, 0.3, 60.0).unwrap();
        let sel = select_branch(&geom).unwrap();
        let rec = propagate_schrodinger(&geom, sel, &f64_spec(0.01), 128).unwrap();
        for k in 1..rec.len() {
            let frame = spectral_frame_near(geom.z_at(rec.times[k]), rec.energy[k], DEFAULT_EPS_EP).unwrap();
            let (cp, cm) = rec.amplitudes_c64(k);
            let psi = [mpc_to_c64(&rec.psi[k][0]), mpc_to_c64(&rec.psi[k][1])];
            for i in 0..2 {
                let back = cp * frame.v_plus[i] + cm * frame.v_minus[i];
                assert!((back - psi[i]).norm() < 100.0 * f64::EPSILON * (1.0 + psi[i].norm()));
            }
            let ratio = mpc_to_c64(&rec.ratio[k]);
            assert!((ratio - cm / cp).norm() <= 1e-14 * ratio.norm().max(1e-300));
        }
    }

    #[test]
    fn symmetric_short_loop_stays_adiabatic() {
        let geom = LoopGeometry::symmetric(0.5, 100.0).unwrap();
        let rec = propagate_schrodinger(&geom, BranchSelection::plus(), &f64_spec(0.01), 16).unwrap();
        assert!(rec.final_ln_abs_ratio() < -2.0, "{}", rec.final_ln_abs_ratio());
    }

    #[test]
    fn rescaling_keeps_state_bounded() {
        // Im E keeps one sign on this loop, so |ψ| grows by roughly e^{100}
        let geom = LoopGeometry::hermitian_start(0.3, 300.0).unwrap();
        let rec = propagate_schrodinger(&geom, select_branch(&geom).unwrap(), &f64_spec(0.01), 32).unwrap();
        assert!(rec.log_scale.iter().any(|&s| s != 0.0));
        for p in &rec.psi {
            assert!(p[0].real().to_f64().abs() < 2f64.powi(RESCALE_EXP + 2));
        }
        assert!(!rec.flags.overflow);
    }

    #[test]
    fn precisions_agree_before_first_exchange() {
        let geom = LoopGeometry::symmetric(0.5, 40.0).unwrap();
        let sel = BranchSelection::plus();
        let lo = propagate_schrodinger(&geom, sel, &PrecisionSpec::floor(24, 0.02).unwrap(), 17).unwrap();
        let hi = propagate_schrodinger(&geom, sel, &PrecisionSpec::floor(88, 0.02).unwrap(), 17).unwrap();
        // samples up to T/4 lie before the first exchange time
        for k in 1..=4 {
            let (a, _) = lo.amplitudes_c64(k);
            let (b, _) = hi.amplitudes_c64(k);
            assert!((a - b).norm() / b.norm() < 1e3 * 2f64.powi(-24), "k={k}");
        }
    }

    #[test]
    fn injected_seed_is_recorded() {
        let geom = LoopGeometry::symmetric(0.5, 40.0).unwrap();
        let spec = PrecisionSpec::new(32, 0.02, SeedMode::InjectedSeed(1e-3)).unwrap();
        let rec = propagate_schrodinger(&geom, BranchSelection::plus(), &spec, 9).unwrap();
        assert_eq!(rec.flags.injected_at, Some(30.0));
        let k = rec.times.iter().position(|&t| t == 30.0).unwrap();
        let (cp, cm) = rec.amplitudes_c64(k);
        assert!((cm / cp).norm() > 5e-4);
        let herm = LoopGeometry::hermitian_start(0.3, 40.0).unwrap();
        let rec = propagate_schrodinger(&herm, select_branch(&herm).unwrap(), &spec, 3).unwrap();
        assert_eq!(rec.flags.injected_at, None);
    }

    #[test]
    fn riccati_matches_schrodinger_on_short_loop() {
        let geom = LoopGeometry::symmetric(0.5, 120.0).unwrap();
        let sel = BranchSelection::plus();
        let spec = f64_spec(0.01);
        let a = propagate_schrodinger(&geom, sel, &spec, 33).unwrap();
        let b = propagate_riccati(&geom, sel, &spec, 33).unwrap();
        assert_eq!(b.ratio[0], Complex64::new(0.0, 0.0));
        for k in 1..a.len() {
            assert!((a.ln_abs_ratio[k] - b.ln_abs_ratio[k]).abs() < 1e-6, "k={k}");
        }
    }

    #[test]
    fn riccati_chart_switch_keeps_ratio_continuous() {
        let geom = LoopGeometry::symmetric(0.5, 1200.0).unwrap();
        let sel = BranchSelection::plus();
        let spec = f64_spec(0.01);
        let a = propagate_schrodinger(&geom, sel, &spec, 65).unwrap();
        let b = propagate_riccati(&geom, sel, &spec, 65).unwrap();
        assert!(!b.chart_switches.is_empty());
        assert!(b.final_ln_abs_ratio() > 2.0);
        assert!((a.final_ln_abs_ratio() - b.final_ln_abs_ratio()).abs() < 0.5);
    }

    #[test]
    fn symmetric_h_closed_form() {
        let geom = LoopGeometry::symmetric(0.5, 100.0).unwrap();
        let proto = 0.0f64;
        let lp = LoopAt::new(&proto, &geom);
        let f = geom.frequency();
        for j in [0u64, 3, 17, 40] {
            let t = 100.0 * j as f64 / 64.0;
            let (_, h) = lp.z_and_h(j, 64);
            let w = Complex64::from_polar(1.0, -f * t);
            let want = 0.5 * f * w / (2.0 * (1.0 - 0.25 * w * w));
            assert!((h.to_c64() - want).norm() < 1e-15);
        }
    }

    #[test]
    fn fixed_point_properties() {
        let geom = LoopGeometry::symmetric(0.5, 1500.0).unwrap();
        let fp = fixed_points(&geom, 0.0).unwrap();
        assert!((fp.r_ad * fp.r_nad - 1.0).norm() < 1e-14);
        assert!(fp.r_ad.norm() < 1e-2 && !fp.non_adiabatic_warning);
        // Im E > 0 on (T/4, T/2) for the clockwise symmetric loop
        let inside = fixed_points(&geom, 0.3 * 1500.0).unwrap();
        assert_eq!(inside.im_energy_positive, inside.r_ad_stable_for(Branch::Plus));
        assert_ne!(inside.r_ad_stable_for(Branch::Plus), inside.r_ad_stable_for(Branch::Minus));
        let fast = LoopGeometry::symmetric(0.5, 2.0).unwrap();
        assert!(fixed_points(&fast, 0.1).unwrap().non_adiabatic_warning);
    }

    #[test]
    fn step_convergence_report() {
        let geom = LoopGeometry::symmetric(0.5, 100.0).unwrap();
        let conv = check_step_convergence(&geom, BranchSelection::plus(), &f64_spec(0.01)).unwrap();
        assert!(conv.passed, "{conv:?}");
        assert_eq!(conv.dt_half, 0.005);
        let coarse = propagate_checked(&geom, BranchSelection::plus(), &f64_spec(1.0), 4);
        assert!(matches!(coarse, Err(Error::StepTooCoarse { .. })), "{coarse:?}");
    }

    #[test]
    fn csv_layout() {
        let geom = LoopGeometry::symmetric(0.5, 10.0).unwrap().with_direction(Direction::CounterClockwise);
        let rec = propagate_schrodinger(&geom, BranchSelection::plus(), &f64_spec(0.1), 3).unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,re_cplus,im_cplus,re_cminus,im_cminus,ln_abs_R,log_scale");
        assert_eq!(lines.len(), 4);
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 7);
        }
        assert!(lines[1].starts_with("0,"));
        assert_eq!(csv_digits(256), 85);
        assert_eq!(csv_digits(24), 17);
        assert_eq!(format_sig(&Float::with_val(53, 1.5), 17), "1.5000000000000000");
    }
}
