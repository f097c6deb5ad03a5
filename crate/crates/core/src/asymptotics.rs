//! Closed-form asymptotics of the ratio dynamics: approximate energies, the
//! exponents `W` and `Ψ`, the adiabatic series, the linearized solution and
//! the growth factors `𝒢` of `T_cr = 𝒢 ln(1/|Δ|)`.
//!
//! Sign convention: `W(t) = 2i ∫_0^t E` for every branch, while
//! `Ψ(t) = σ 2i ∫_{t*}^t E` carries `σ = +1` for `R+` and `σ = -1` for `R-`,
//! so that `Re Ψ > 0` always means amplification of the tracked ratio.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    last_exchange_time, select_branch, Branch, BranchSelection, EnergyPath, LoopClass, LoopGeometry,
};
use crate::precision::ulp_floor;
use crate::precision::PrecisionSpec;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Per-family closed form of `E(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EnergyApprox {
    /// `E ≈ 1 - (r²/2) e^{-2i(ft + φ0)}`, for `g0 = 0` and `r ≪ 1`.
    SymmetricSmallR,
    /// `E ≈ q + (g0 r/q) e^{-ift} - (r²/2q) e^{-2ift}` with `q = (1 - g0²)^{1/2}`.
    Offset,
    /// `E ≈ -i sqrt(2r) e^{-i(ft + θ0)/2}`, near the EP at `z = 1`.
    EpSqrt,
}

/// The closed form suited to a loop, or `APPROX_INVALID` outside its domain.
pub fn energy_model(geom: &LoopGeometry) -> Result<EnergyApprox> {
    let r = geom.r();
    match geom.classify()? {
        LoopClass::Symmetric | LoopClass::PhaseShifted => {
            if r >= 1.0 {
                return Err(Error::ApproxInvalid(format!("small-radius expansion needs r < 1, got {r}")));
            }
            Ok(EnergyApprox::SymmetricSmallR)
        }
        LoopClass::OffsetInside | LoopClass::OffsetOutside => {
            if !geom.offset_approximation_valid() {
                return Err(Error::ApproxInvalid(format!("offset expansion needs r + g0 < 1, got {}", r + geom.g0())));
            }
            Ok(EnergyApprox::Offset)
        }
        LoopClass::EpEncircling | LoopClass::HermitianStart => {
            if r >= 1.0 {
                return Err(Error::ApproxInvalid(format!("EP expansion needs r < 1, got {r}")));
            }
            Ok(EnergyApprox::EpSqrt)
        }
    }
}

/// `±1` matching the EP closed form to the tracked branch at `t = 0`.
fn ep_sign(geom: &LoopGeometry) -> f64 {
    let approx = -I * (2.0 * geom.r()).sqrt() * Complex64::from_polar(1.0, -0.5 * geom.stokes_angle());
    if (geom.initial_energy() - approx).norm() <= (geom.initial_energy() + approx).norm() {
        1.0
    } else {
        -1.0
    }
}

fn rotor(geom: &LoopGeometry, t: f64) -> Complex64 {
    // e^{-i(ft + φ0)}
    Complex64::from_polar(1.0, -geom.phase(t))
}

/// Closed-form energy at `t` together with the exact tracked value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub model: EnergyApprox,
    pub value: Complex64,
    pub exact: Complex64,
    pub relative_deviation: f64,
}

pub fn energy_approx(geom: &LoopGeometry, t: f64) -> Result<EnergyEstimate> {
    let model = energy_model(geom)?;
    let value = approx_energy_value(geom, model, t);
    let exact = EnergyPath::new(geom).energy(t);
    Ok(EnergyEstimate { model, value, exact, relative_deviation: (value - exact).norm() / exact.norm() })
}

fn approx_energy_value(geom: &LoopGeometry, model: EnergyApprox, t: f64) -> Complex64 {
    let r = geom.r();
    let w = rotor(geom, t);
    match model {
        EnergyApprox::SymmetricSmallR => 1.0 - 0.5 * r * r * w * w,
        EnergyApprox::Offset => {
            let g0 = geom.g0();
            let q = (1.0 - g0 * g0).sqrt();
            q + g0 * r / q * w - r * r / (2.0 * q) * w * w
        }
        EnergyApprox::EpSqrt => {
            let phase = 0.5 * (geom.phase(t) - PI);
            ep_sign(geom) * -I * (2.0 * r).sqrt() * Complex64::from_polar(1.0, -phase)
        }
    }
}

/// `2i ∫ E` from `0` to `t` for the closed-form energy (an antiderivative).
fn antiderivative(geom: &LoopGeometry, model: EnergyApprox, t: f64) -> Complex64 {
    let r = geom.r();
    let f = geom.frequency();
    let w = rotor(geom, t);
    // unwrapped time enters the linear terms, so use t directly
    match model {
        EnergyApprox::SymmetricSmallR => 2.0 * I * t + r * r / (2.0 * f) * w * w,
        EnergyApprox::Offset => {
            let g0 = geom.g0();
            let q = (1.0 - g0 * g0).sqrt();
            let a = 2.0 * I * q;
            let b = 2.0 * g0 * r / (f * q);
            let c = r * r / (2.0 * f * q);
            a * t - b * w + c * w * w
        }
        EnergyApprox::EpSqrt => {
            // Z(t) = (4i sqrt(2r)/f) e^{-i(ft + θ0)/2}, with the branch sign
            let phase = 0.5 * (geom.frequency() * t + geom.stokes_angle());
            ep_sign(geom) * 4.0 * I * (2.0 * r).sqrt() / f * Complex64::from_polar(1.0, -phase)
        }
    }
}

/// `W(t) = 2i ∫_0^t E(τ) dτ` on the closed-form energy.
pub fn w_integral(geom: &LoopGeometry, t: f64) -> Result<Complex64> {
    let model = energy_model(geom)?;
    Ok(antiderivative(geom, model, t) - antiderivative(geom, model, 0.0))
}

/// `σ` of the tracked ratio.
pub fn branch_sign(sel: BranchSelection) -> f64 {
    sel.initial_branch.sign()
}

/// `Ψ(t) = σ 2i ∫_{t*}^t E(τ) dτ` on the closed-form energy; `t*` is the
/// exchange time closest to `T`.
pub fn psi_integral(geom: &LoopGeometry, t: f64) -> Result<Complex64> {
    let model = energy_model(geom)?;
    let t_star = exchange_time_for(geom)?;
    if t < t_star * (1.0 - 1e-12) {
        return Err(Error::InvalidArgument(format!("Ψ needs t >= t* = {t_star}, got {t}")));
    }
    let sigma = branch_sign(select_branch(geom)?);
    Ok(sigma * (antiderivative(geom, model, t) - antiderivative(geom, model, t_star)))
}

fn exchange_time_for(geom: &LoopGeometry) -> Result<f64> {
    if geom.classify()? == LoopClass::EpEncircling {
        // arg Z crosses the negative real axis at f t* = π - θ0
        return Ok(geom.period() * (PI - geom.stokes_angle()) / TAU);
    }
    last_exchange_time(geom)
}

/// Which energy the quadrature integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrand {
    /// The closed form of [`energy_model`].
    Approximate,
    /// The tracked `sqrt(1 - z²)`.
    Exact,
}

/// `2i ∫_a^b E(τ) dτ` by double-exponential quadrature.
pub fn integrate_energy(geom: &LoopGeometry, a: f64, b: f64, which: Integrand) -> Result<Complex64> {
    let energy: Box<dyn Fn(f64) -> Complex64> = match which {
        Integrand::Approximate => {
            let model = energy_model(geom)?;
            let g = *geom;
            Box::new(move |t| approx_energy_value(&g, model, t))
        }
        Integrand::Exact => {
            let path = EnergyPath::new(geom);
            Box::new(move |t| path.energy(t))
        }
    };
    if a == b {
        return Ok(Complex64::new(0.0, 0.0));
    }
    // split into quarter periods so each piece is smooth and low-frequency
    let pieces = (((b - a).abs() / geom.period()) * 16.0).ceil().max(1.0) as usize;
    let h = (b - a) / pieces as f64;
    let mut re = 0.0;
    let mut im = 0.0;
    for k in 0..pieces {
        let lo = a + k as f64 * h;
        let hi = if k + 1 == pieces { b } else { lo + h };
        re += quadrature::double_exponential::integrate(|t| energy(t).re, lo, hi, 1e-14).integral;
        im += quadrature::double_exponential::integrate(|t| energy(t).im, lo, hi, 1e-14).integral;
    }
    Ok(2.0 * I * Complex64::new(re, im))
}

/// Growth factor `𝒢` with `T_cr = 𝒢 ln(1/|Δ|)`.
pub fn growth_factor(geom: &LoopGeometry) -> Result<f64> {
    let r = geom.r();
    let g0 = geom.g0();
    match geom.classify()? {
        LoopClass::Symmetric => Ok(TAU / (r * r)),
        LoopClass::PhaseShifted => Ok(TAU / (r * geom.phi0().sin()).powi(2)),
        LoopClass::OffsetInside => Ok(TAU * (1.0 - g0 * g0).sqrt() / (r - g0).powi(2)),
        LoopClass::OffsetOutside => Ok(PI * (1.0 - g0 * g0).sqrt() / (2.0 * g0 * r)),
        LoopClass::EpEncircling => Ok(PI / (2.0 * (2.0 * r).sqrt())),
        LoopClass::HermitianStart => Err(Error::NoExchange),
    }
}

/// Origin and size of the instability seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedModel {
    pub delta_geo: f64,
    pub delta_fp: f64,
    pub delta_eff: f64,
}

impl SeedModel {
    /// `Δ_eff = max(Δ_geo, Δ_fp)`.
    pub fn new(delta_geo: f64, delta_fp: f64) -> Result<Self> {
        if !(delta_geo >= 0.0 && delta_fp >= 0.0 && delta_geo.is_finite() && delta_fp.is_finite()) {
            return Err(Error::InvalidArgument("seed magnitudes must be finite and non-negative".into()));
        }
        Ok(Self { delta_geo, delta_fp, delta_eff: delta_geo.max(delta_fp) })
    }

    /// Precision floor only, as for loops started in an eigenstate away from the EP.
    pub fn precision_floor(spec: &PrecisionSpec) -> Self {
        let fp = ulp_floor(spec);
        Self { delta_geo: 0.0, delta_fp: fp, delta_eff: fp }
    }

    pub fn from_delta(delta: f64) -> Result<Self> {
        Self::new(0.0, delta)
    }
}

/// `𝒢 ln(1/Δ_eff)`.
pub fn analytic_tcr(geom: &LoopGeometry, seed: &SeedModel) -> Result<f64> {
    let g = growth_factor(geom)?;
    if !(seed.delta_eff > 0.0 && seed.delta_eff < 1.0) {
        return Err(Error::InvalidArgument(format!("Δ_eff must lie in (0, 1), got {}", seed.delta_eff)));
    }
    Ok(g * (1.0 / seed.delta_eff).ln())
}

/// Smallest `t₊ ≥ t*` with `|Δ e^{Ψ(t₊)}| = 1`, solved to `1e-6` relative.
pub fn delay_time(geom: &LoopGeometry, seed: &SeedModel) -> Result<f64> {
    let d = seed.delta_eff;
    if !(d > 0.0 && d <= 1.0) {
        return Err(Error::InvalidArgument(format!("Δ_eff must lie in (0, 1], got {d}")));
    }
    let t_star = exchange_time_for(geom)?;
    let period = geom.period();
    let ln_d = d.ln();
    let g = |t: f64| -> Result<f64> { Ok(psi_integral(geom, t)?.re + ln_d) };
    if g(t_star)? >= 0.0 {
        return Ok(t_star);
    }
    let n = 4096;
    let mut lo = t_star;
    let mut hi = None;
    for k in 1..=n {
        let t = t_star + (period - t_star) * k as f64 / n as f64;
        if g(t)? >= 0.0 {
            hi = Some(t);
            break;
        }
        lo = t;
    }
    let mut hi = hi.ok_or(Error::NoCrossing)?;
    while hi - lo > 1e-6 * hi {
        let mid = 0.5 * (lo + hi);
        if g(mid)? >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Truncated Taylor series `Σ a_k τ^k` of a function of time around some `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet(pub Vec<Complex64>);

impl Jet {
    pub fn constant(c: Complex64, degree: usize) -> Self {
        let mut v = vec![Complex64::new(0.0, 0.0); degree + 1];
        v[0] = c;
        Jet(v)
    }

    /// `c e^{α (t + τ)}` expanded in `τ`.
    pub fn exp_linear(c: Complex64, alpha: Complex64, t: f64, degree: usize) -> Self {
        let mut v = Vec::with_capacity(degree + 1);
        let mut term = c * (alpha * t).exp();
        for k in 0..=degree {
            v.push(term);
            term = term * alpha / (k + 1) as f64;
        }
        Jet(v)
    }

    pub fn degree(&self) -> usize {
        self.0.len() - 1
    }

    pub fn value(&self) -> Complex64 {
        self.0[0]
    }

    pub fn add(&self, o: &Jet) -> Jet {
        Jet(self.0.iter().zip(&o.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, o: &Jet) -> Jet {
        Jet(self.0.iter().zip(&o.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, c: Complex64) -> Jet {
        Jet(self.0.iter().map(|a| a * c).collect())
    }

    pub fn mul(&self, o: &Jet) -> Jet {
        let n = self.0.len().min(o.0.len());
        Jet((0..n).map(|k| (0..=k).map(|j| self.0[j] * o.0[k - j]).sum()).collect())
    }

    pub fn div(&self, o: &Jet) -> Jet {
        let n = self.0.len().min(o.0.len());
        let mut c: Vec<Complex64> = Vec::with_capacity(n);
        for k in 0..n {
            let acc: Complex64 = (1..=k).map(|j| o.0[j] * c[k - j]).sum();
            c.push((self.0[k] - acc) / o.0[0]);
        }
        Jet(c)
    }

    /// Square root whose constant term is `root0`.
    pub fn sqrt_with(&self, root0: Complex64) -> Jet {
        let n = self.0.len();
        let mut c = vec![root0];
        for k in 1..n {
            let acc: Complex64 = (1..k).map(|j| c[j] * c[k - j]).sum();
            c.push((self.0[k] - acc) / (2.0 * root0));
        }
        Jet(c)
    }

    /// Time derivative; the degree drops by one.
    pub fn derivative(&self) -> Jet {
        if self.0.len() == 1 {
            return Jet(vec![Complex64::new(0.0, 0.0)]);
        }
        Jet(self.0.iter().enumerate().skip(1).map(|(k, a)| a * k as f64).collect())
    }

    /// `k`-th derivative at the expansion point.
    pub fn nth_derivative(&self, k: usize) -> Complex64 {
        let fact: f64 = (1..=k).map(|j| j as f64).product();
        self.0[k] * fact
    }
}

/// Jets of `E` and `h` at `t`: exact forms off the EP, the near-EP closed forms on it.
pub fn energy_and_h_jets(geom: &LoopGeometry, t: f64, degree: usize) -> Result<(Jet, Jet)> {
    if geom.classify()? == LoopClass::EpEncircling {
        let f = geom.frequency();
        let c = ep_sign(geom) * -I * (2.0 * geom.r()).sqrt() * Complex64::from_polar(1.0, -0.5 * geom.stokes_angle());
        let e = Jet::exp_linear(c, -0.5 * I * f, t, degree);
        return Ok((e, Jet::constant(Complex64::new(f / 4.0, 0.0), degree)));
    }
    let f = geom.frequency();
    let d = degree + 1;
    // z = g0 - r e^{-iφ0} e^{-ift}
    let w = Jet::exp_linear(Complex64::from_polar(geom.r(), -geom.phi0()), -I * f, t, d);
    let z = Jet::constant(Complex64::new(geom.g0(), 0.0), d).sub(&w);
    let one = Jet::constant(Complex64::new(1.0, 0.0), d);
    let e2 = one.sub(&z.mul(&z));
    let e0 = EnergyPath::new(geom).energy(t);
    if e0.norm_sqr() < 1e-18 {
        return Err(Error::EpDegeneracy { z: z.value(), distance: e0.norm_sqr() });
    }
    let e = e2.sqrt_with(e0);
    let zdot = z.derivative();
    let e2 = Jet(e2.0[..=degree].to_vec());
    let h = zdot.scale(-I).div(&e2.scale(Complex64::new(2.0, 0.0)));
    Ok((Jet(e.0[..=degree].to_vec()), h))
}

/// Terms and sum of the truncated adiabatic series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdiabaticSeries {
    pub value: Complex64,
    pub terms: Vec<Complex64>,
    /// `|term_{N-1}| > |term_{N-2}|`: the series is past its optimal truncation.
    pub diverging: bool,
}

impl AdiabaticSeries {
    /// Index of the smallest term.
    pub fn optimal_truncation(&self) -> usize {
        self.terms
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).expect("finite terms"))
            .map(|(k, _)| k)
            .unwrap_or(0)
    }
}

/// `Σ_{n<N} ((i/2E) d/dt)^n R_ad` with `R_ad = ih/2E`, derivatives by Taylor-mode differentiation.
pub fn adiabatic_series(geom: &LoopGeometry, t: f64, order: usize) -> Result<AdiabaticSeries> {
    if order == 0 {
        return Err(Error::InvalidArgument("series order must be at least 1".into()));
    }
    let (e, h) = energy_and_h_jets(geom, t, order)?;
    let half_i_over_e = Jet::constant(0.5 * I, order).div(&e);
    let mut term = h.mul(&half_i_over_e);
    let mut terms = Vec::with_capacity(order);
    for n in 0..order {
        terms.push(term.value());
        if n + 1 < order {
            let d = term.derivative();
            let k = d.degree() + 1;
            term = Jet(half_i_over_e.0[..k].to_vec()).mul(&d);
        }
    }
    let diverging = order >= 2 && terms[order - 1].norm() > terms[order - 2].norm();
    Ok(AdiabaticSeries { value: terms.iter().sum(), terms, diverging })
}

/// `R_ad(t) = ih/2E`.
pub fn r_ad(geom: &LoopGeometry, t: f64) -> Result<Complex64> {
    Ok(adiabatic_series(geom, t, 1)?.value)
}

/// Relative gap between the jet derivative of `R_ad` and a sixth-order central difference.
pub fn finite_difference_check(geom: &LoopGeometry, t: f64) -> Result<f64> {
    let (e, h) = energy_and_h_jets(geom, t, 2)?;
    let exact = h.mul(&Jet::constant(0.5 * I, 2).div(&e)).nth_derivative(1);
    let step = geom.period() * 1e-3;
    let coeff = [(-3.0, -1.0), (-2.0, 9.0), (-1.0, -45.0), (1.0, 45.0), (2.0, -9.0), (3.0, 1.0)];
    let mut fd = Complex64::new(0.0, 0.0);
    for (k, w) in coeff {
        fd += w * r_ad(geom, t + k * step)?;
    }
    fd /= 60.0 * step;
    Ok((fd - exact).norm() / exact.norm())
}

/// Leading asymptotic description of a loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticModel {
    pub geometry: LoopGeometry,
    pub energy_approx: EnergyApprox,
    pub t_star: f64,
    pub growth_factor: f64,
    pub series_order: usize,
}

impl AsymptoticModel {
    pub fn new(geom: &LoopGeometry, series_order: usize) -> Result<Self> {
        if series_order == 0 {
            return Err(Error::InvalidArgument("series order must be at least 1".into()));
        }
        Ok(Self {
            geometry: *geom,
            energy_approx: energy_model(geom)?,
            t_star: exchange_time_for(geom)?,
            growth_factor: growth_factor(geom)?,
            series_order,
        })
    }
}

/// Three-term linearized ratio `ℛ_ad(t) - ℛ_ad(0) e^{σW(t)} + Δ Θ(t - t*) e^{Ψ(t)}`.
///
/// On the EP loop the remainder is the Stokes term
/// `(-iπ - Δ e^{Z(t*)}) Θ(t - t*) e^{-Z(t)}`.
pub fn linearized_solution(
    geom: &LoopGeometry,
    sel: BranchSelection,
    t: f64,
    seed: &SeedModel,
    series_order: usize,
) -> Result<Complex64> {
    let model = energy_model(geom)?;
    let sigma = branch_sign(sel);
    let series_t = adiabatic_series(geom, t, series_order)?.value;
    let series_0 = adiabatic_series(geom, 0.0, series_order)?.value;
    let w = antiderivative(geom, model, t) - antiderivative(geom, model, 0.0);
    let mut r = series_t - series_0 * (sigma * w).exp();
    let t_star = exchange_time_for(geom)?;
    if t >= t_star {
        if geom.classify()? == LoopClass::EpEncircling {
            let z_t = antiderivative(geom, model, t);
            let z_star = antiderivative(geom, model, t_star);
            r += (-I * PI - seed.delta_eff * z_star.exp()) * (-z_t).exp();
        } else if sel == select_branch(geom)? {
            let psi = sigma * (antiderivative(geom, model, t) - antiderivative(geom, model, t_star));
            r += seed.delta_eff * psi.exp();
        }
    }
    Ok(r)
}

/// Predicted pre-transition plateau of `|R-(T)|` on loops centred on the EP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StokesPlateau {
    /// `θ0 = 0`: Bessel asymptotics give 2, the exponential-integral expansion gives π.
    Plateau { numeric: f64, analytic: f64, discrepant: bool },
    /// `θ0 = π`: `Z(t)` never crosses the negative real axis.
    NoStokesContribution,
    /// `θ0 ∈ (0, π)`: the ratio is already non-adiabatic at small `T`.
    NoCriticalPeriod,
}

pub fn stokes_plateau(geom: &LoopGeometry) -> Result<StokesPlateau> {
    if (geom.g0() - 1.0).abs() > 1e-12 {
        return Err(Error::NotApplicable("Stokes plateau needs a loop centred on the EP (g0 = 1)".into()));
    }
    let theta0 = geom.stokes_angle();
    let tol = 1e-12;
    if theta0 < tol {
        Ok(StokesPlateau::Plateau { numeric: 2.0, analytic: PI, discrepant: true })
    } else if (theta0 - PI).abs() < tol {
        Ok(StokesPlateau::NoStokesContribution)
    } else if theta0 < PI {
        Ok(StokesPlateau::NoCriticalPeriod)
    } else {
        Err(Error::NotApplicable(format!("θ0 = {theta0} lies outside [0, π]")))
    }
}

/// The branch that wins at long periods: larger `Im(±E)` just before `T`.
pub fn dominant_final_branch(geom: &LoopGeometry) -> Branch {
    let path = EnergyPath::new(geom);
    let e = path.energy(geom.period() * (1.0 - 1e-3));
    if e.im >= 0.0 {
        Branch::Plus
    } else {
        Branch::Minus
    }
}

/// `φ0 ∈ (0, π/2]`, where the phase-shifted growth factor was derived.
pub fn phase_in_derived_range(phi0: f64) -> bool {
    phi0 > 0.0 && phi0 <= FRAC_PI_2 + 1e-12
}
