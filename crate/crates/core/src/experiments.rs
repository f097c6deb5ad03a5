//! Numerical experiments built on the propagator: critical periods, sweeps,
//! scaling fits, seed extraction, chirality and the EP plateau.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{growth_factor, SeedModel};
use crate::error::{Error, Result};
use crate::model::{select_branch, Branch, BranchSelection, LoopClass, LoopGeometry};
use crate::precision::{ln_ulp_floor, PrecisionSpec};
use crate::propagator::{end_of_period_ln_ratio, propagate_schrodinger};

/// Half-width of the `MIXED` band in `ln|R(T)|`.
pub const MIXED_BAND: f64 = 0.182_321_556_793_954_6; // ln 1.2
/// Relative spread above which a plateau is rejected.
pub const PLATEAU_SPREAD_LIMIT: f64 = 0.25;
/// Relative shift of `T_cr` tolerated when halving the step.
pub const DT_TCR_TOL: f64 = 0.02;

/// Search settings for [`measure_tcr`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcrOptions {
    pub t_start: f64,
    pub growth: f64,
    /// Bisection stops once `hi/lo - 1` drops to this.
    pub rel_tol: f64,
    pub t_max: f64,
    /// Crossing level of `ln|R(T)|`; `None` picks 0, or `ln 4` on EP-centred loops.
    pub level: Option<f64>,
    /// Re-evaluate the bracket at `dt/2`.
    pub check_dt: bool,
}

impl Default for TcrOptions {
    fn default() -> Self {
        Self { t_start: 50.0, growth: 1.3, rel_tol: 0.01, t_max: 1e6, level: None, check_dt: true }
    }
}

/// Crossing level used when none is given. EP-centred loops saturate at
/// `|R| ≈ 2` before the transition, so `|R| = 1` would be crossed at once.
pub fn default_level(geom: &LoopGeometry) -> f64 {
    if matches!(geom.classify(), Ok(LoopClass::EpEncircling)) {
        4f64.ln()
    } else {
        0.0
    }
}

/// Outcome of [`measure_tcr`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalTimeResult {
    pub geometry: LoopGeometry,
    pub precision: PrecisionSpec,
    pub selection: BranchSelection,
    pub level: f64,
    pub t_cr: f64,
    pub bracket_lo: f64,
    pub bracket_hi: f64,
    pub ln_abs_ratio_lo: f64,
    pub ln_abs_ratio_hi: f64,
    pub ln_abs_ratio_at_tcr: f64,
    pub converged: bool,
    pub dt_check_passed: bool,
    /// The scan fell back below the level right after the first crossing.
    pub non_monotone: bool,
    pub evaluations: usize,
}

struct Evaluator<'a> {
    geom: &'a LoopGeometry,
    sel: BranchSelection,
    spec: PrecisionSpec,
    count: usize,
}

impl Evaluator<'_> {
    fn eval(&mut self, period: f64) -> Result<f64> {
        self.count += 1;
        end_of_period_ln_ratio(&self.geom.with_period(period)?, self.sel, &self.spec)
    }
}

/// Period at which the end-of-period ratio first reaches the crossing level.
///
/// Geometric scan from `t_start`, then bisection; every point is a fresh
/// one-period propagation. `T_cr` is interpolated linearly in `ln|R|` inside
/// the final bracket.
pub fn measure_tcr(geom: &LoopGeometry, spec: &PrecisionSpec, opts: &TcrOptions) -> Result<CriticalTimeResult> {
    if !(opts.t_start > 0.0 && opts.growth > 1.0 && opts.rel_tol > 0.0 && opts.t_max > opts.t_start) {
        return Err(Error::InvalidArgument("T_cr search needs 0 < t_start < t_max, growth > 1, rel_tol > 0".into()));
    }
    let sel = select_branch(geom)?;
    let level = opts.level.unwrap_or_else(|| default_level(geom));
    let mut ev = Evaluator { geom, sel, spec: *spec, count: 0 };

    let mut lo = opts.t_start;
    let mut f_lo = ev.eval(lo)?;
    if f_lo >= level {
        return Err(Error::AboveThresholdAtStart { t_start: lo });
    }
    let (mut hi, mut f_hi) = loop {
        let next = lo * opts.growth;
        if next > opts.t_max {
            return Err(Error::NoTransition { t_max: opts.t_max });
        }
        let f = ev.eval(next)?;
        if f >= level {
            break (next, f);
        }
        lo = next;
        f_lo = f;
    };
    let beyond = hi * opts.growth;
    let non_monotone = beyond <= opts.t_max && ev.eval(beyond)? < level;

    while hi / lo - 1.0 > opts.rel_tol {
        let mid = (lo * hi).sqrt();
        let f = ev.eval(mid)?;
        if f >= level {
            hi = mid;
            f_hi = f;
        } else {
            lo = mid;
            f_lo = f;
        }
    }
    let t_cr = lo + (hi - lo) * (level - f_lo) / (f_hi - f_lo);
    let at = ev.eval(t_cr)?;

    let dt_check_passed = if opts.check_dt {
        let mut half = Evaluator { geom, sel, spec: spec.with_dt(spec.dt() / 2.0)?, count: 0 };
        let below = half.eval(lo * (1.0 - DT_TCR_TOL))? < level;
        let above = half.eval(hi * (1.0 + DT_TCR_TOL))? >= level;
        ev.count += half.count;
        below && above
    } else {
        false
    };

    Ok(CriticalTimeResult {
        geometry: *geom,
        precision: *spec,
        selection: sel,
        level,
        t_cr,
        bracket_lo: lo,
        bracket_hi: hi,
        ln_abs_ratio_lo: f_lo,
        ln_abs_ratio_hi: f_hi,
        ln_abs_ratio_at_tcr: at,
        converged: true,
        dt_check_passed,
        non_monotone,
        evaluations: ev.count,
    })
}

/// Sweep parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Radius,
    Phi0,
    G0,
    Bits,
    Period,
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "radius" | "r" => Ok(Self::Radius),
            "phi0" => Ok(Self::Phi0),
            "g0" => Ok(Self::G0),
            "bits" | "m" => Ok(Self::Bits),
            "period" | "t" => Ok(Self::Period),
            other => Err(Error::InvalidArgument(format!("unknown sweep axis `{other}`"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Radius => "radius",
            Self::Phi0 => "phi0",
            Self::G0 => "g0",
            Self::Bits => "bits",
            Self::Period => "period",
        })
    }
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepOutcome {
    Critical(CriticalTimeResult),
    /// End-of-period `ln|R(T)|` on the period axis.
    EndRatio { ln_abs_ratio: f64 },
    Failed { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis_value: f64,
    pub outcome: SweepOutcome,
}

impl SweepPoint {
    pub fn critical(&self) -> Option<&CriticalTimeResult> {
        match &self.outcome {
            SweepOutcome::Critical(c) => Some(c),
            _ => None,
        }
    }
}

fn point_inputs(template: &LoopGeometry, axis: SweepAxis, value: f64, spec: &PrecisionSpec) -> Result<(LoopGeometry, PrecisionSpec)> {
    let t = template;
    let geom = match axis {
        SweepAxis::Radius => LoopGeometry::new(t.g0(), value, t.phi0(), t.period(), t.direction())?,
        SweepAxis::Phi0 => LoopGeometry::new(t.g0(), t.r(), value, t.period(), t.direction())?,
        SweepAxis::G0 => LoopGeometry::new(value, t.r(), t.phi0(), t.period(), t.direction())?,
        SweepAxis::Period => t.with_period(value)?,
        SweepAxis::Bits => *t,
    };
    let spec = if axis == SweepAxis::Bits {
        if value.fract() != 0.0 || value < 0.0 {
            return Err(Error::InvalidArgument(format!("bit count must be a whole number, got {value}")));
        }
        spec.with_bits(value as u32)?
    } else {
        *spec
    };
    Ok((geom, spec))
}

fn run_point(template: &LoopGeometry, axis: SweepAxis, value: f64, spec: &PrecisionSpec, opts: &TcrOptions) -> SweepOutcome {
    let outcome = point_inputs(template, axis, value, spec).and_then(|(geom, spec)| {
        if axis == SweepAxis::Period {
            let sel = select_branch(&geom)?;
            Ok(SweepOutcome::EndRatio { ln_abs_ratio: end_of_period_ln_ratio(&geom, sel, &spec)? })
        } else {
            Ok(SweepOutcome::Critical(measure_tcr(&geom, &spec, opts)?))
        }
    });
    outcome.unwrap_or_else(|e| SweepOutcome::Failed { code: e.code().into(), message: e.to_string() })
}

/// Worker count from `NHLOOP_THREADS`; `None` means machine parallelism.
pub fn thread_cap() -> Option<usize> {
    std::env::var("NHLOOP_THREADS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0)
}

/// Runs one independent task per value and returns results in input order.
pub fn sweep(
    template: &LoopGeometry,
    axis: SweepAxis,
    values: &[f64],
    spec: &PrecisionSpec,
    opts: &TcrOptions,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    if values.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidArgument("sweep values must be sorted ascending".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        values
            .par_iter()
            .map(|&v| SweepPoint { axis_value: v, outcome: run_point(template, axis, v, spec, opts) })
            .collect()
    }))
}

/// `axis_value,T_cr,bracket_lo,bracket_hi,converged,dt_check`; the period
/// axis writes `axis_value,ln_abs_R` instead. Failed points leave numeric
/// fields empty and carry the error code in the last column.
pub fn write_sweep_csv<W: Write>(axis: SweepAxis, points: &[SweepPoint], mut out: W) -> io::Result<()> {
    if axis == SweepAxis::Period {
        writeln!(out, "axis_value,ln_abs_R,error")?;
        for p in points {
            match &p.outcome {
                SweepOutcome::EndRatio { ln_abs_ratio } => writeln!(out, "{:?},{:?},", p.axis_value, ln_abs_ratio)?,
                SweepOutcome::Failed { code, .. } => writeln!(out, "{:?},,{code}", p.axis_value)?,
                SweepOutcome::Critical(_) => unreachable!("period sweeps record end ratios"),
            }
        }
        return Ok(());
    }
    writeln!(out, "axis_value,T_cr,bracket_lo,bracket_hi,converged,dt_check,error")?;
    for p in points {
        match &p.outcome {
            SweepOutcome::Critical(c) => writeln!(
                out,
                "{:?},{:?},{:?},{:?},{},{},",
                p.axis_value, c.t_cr, c.bracket_lo, c.bracket_hi, c.converged, c.dt_check_passed
            )?,
            SweepOutcome::Failed { code, .. } => writeln!(out, "{:?},,,,false,false,{code}", p.axis_value)?,
            SweepOutcome::EndRatio { .. } => unreachable!("critical sweeps record T_cr"),
        }
    }
    Ok(())
}

/// Linearized scaling law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScalingModel {
    /// `ln T_cr` vs `ln r`.
    RPow,
    /// `ln T_cr` vs `ln sin φ0`.
    PhiPow,
    /// `T_cr` vs `(1 - g0²)^{1/2} / (r - g0)²`.
    G0Inside,
    /// `T_cr` vs `(1 - g0²)^{1/2} / (g0 r)`.
    G0Outside,
    /// `ln T_cr` vs `ln r` on EP-centred loops.
    EpSqrt,
    /// `T_cr` vs `m`.
    PrecisionLinear,
}

impl FromStr for ScalingModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R_POW" => Ok(Self::RPow),
            "PHI_POW" => Ok(Self::PhiPow),
            "G0_INSIDE" => Ok(Self::G0Inside),
            "G0_OUTSIDE" => Ok(Self::G0Outside),
            "EP_SQRT" => Ok(Self::EpSqrt),
            "PRECISION_LINEAR" => Ok(Self::PrecisionLinear),
            other => Err(Error::InvalidArgument(format!("unknown scaling model `{other}`"))),
        }
    }
}

impl ScalingModel {
    /// Model that matches a sweep axis and loop family.
    pub fn for_axis(axis: SweepAxis, template: &LoopGeometry) -> Option<Self> {
        match axis {
            SweepAxis::Bits => Some(Self::PrecisionLinear),
            SweepAxis::Phi0 => Some(Self::PhiPow),
            SweepAxis::Radius if (template.g0() - 1.0).abs() < 1e-12 => Some(Self::EpSqrt),
            SweepAxis::Radius => Some(Self::RPow),
            SweepAxis::G0 if template.g0() < template.r() => Some(Self::G0Inside),
            SweepAxis::G0 => Some(Self::G0Outside),
            SweepAxis::Period => None,
        }
    }

    fn point(self, c: &CriticalTimeResult) -> (f64, f64) {
        let g = &c.geometry;
        let q = (1.0 - g.g0() * g.g0()).sqrt();
        match self {
            Self::RPow | Self::EpSqrt => (g.r().ln(), c.t_cr.ln()),
            Self::PhiPow => (g.phi0().sin().abs().ln(), c.t_cr.ln()),
            Self::G0Inside => (q / (g.r() - g.g0()).powi(2), c.t_cr),
            Self::G0Outside => (q / (g.g0() * g.r()), c.t_cr),
            Self::PrecisionLinear => (c.precision.bits() as f64, c.t_cr),
        }
    }
}

/// Ordinary least-squares fit of a [`ScalingModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub model_id: ScalingModel,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
    pub n_points: usize,
}

pub fn fit_scaling(results: &[CriticalTimeResult], model: ScalingModel) -> Result<ScalingFit> {
    let pts: Vec<(f64, f64)> = results.iter().filter(|c| c.converged).map(|c| model.point(c)).collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: pts.len() });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("scaling fit needs distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = pts.iter().map(|p| p.1 - (intercept + slope * p.0)).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok(ScalingFit { model_id: model, slope, intercept, r_squared, residuals, n_points: pts.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SeedRegime {
    PrecisionLimited,
    StokesLimited,
}

/// Seed recovered from a measured critical period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedExtraction {
    pub seed: SeedModel,
    /// `ln Δ_eff = -T_cr/𝒢`, usable where `Δ_eff` underflows.
    pub ln_delta_eff: f64,
    /// `ln β^{-m}` of the run, or `ln` of the injected amplitude.
    pub ln_reference: f64,
    pub regime: SeedRegime,
}

/// Inverts `T_cr = 𝒢 ln(1/Δ_eff)` and compares `Δ_eff` against the arithmetic floor.
pub fn extract_seed(result: &CriticalTimeResult) -> Result<SeedExtraction> {
    let g = growth_factor(&result.geometry)?;
    let ln_delta_eff = -result.t_cr / g;
    let ln_reference = match result.precision.seed_mode() {
        crate::precision::SeedMode::ArithmeticFloor => ln_ulp_floor(&result.precision),
        crate::precision::SeedMode::InjectedSeed(a) => a.ln(),
    };
    let regime = if (ln_delta_eff - ln_reference).abs() <= 10f64.ln() {
        SeedRegime::PrecisionLimited
    } else {
        SeedRegime::StokesLimited
    };
    let delta = ln_delta_eff.exp();
    Ok(SeedExtraction { seed: SeedModel::new(0.0, delta)?, ln_delta_eff, ln_reference, regime })
}

/// Final-state class of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FinalBranch {
    SameAsInitial,
    Flipped,
    Mixed { ratio: f64 },
}

impl FinalBranch {
    pub fn classify(ln_abs_ratio: f64) -> Self {
        if ln_abs_ratio.abs() < MIXED_BAND {
            Self::Mixed { ratio: ln_abs_ratio.exp() }
        } else if ln_abs_ratio < 0.0 {
            Self::SameAsInitial
        } else {
            Self::Flipped
        }
    }

    fn kind(&self) -> u8 {
        match self {
            Self::SameAsInitial => 0,
            Self::Flipped => 1,
            Self::Mixed { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Chirality {
    Chiral,
    NonChiral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiralityVerdict {
    pub geometry: LoopGeometry,
    pub period: f64,
    pub ln_abs_ratio_forward: f64,
    pub ln_abs_ratio_reverse: f64,
    pub final_branch_forward: FinalBranch,
    pub final_branch_reverse: FinalBranch,
    pub verdict: Chirality,
}

/// Runs both traversal directions from the same initial branch.
pub fn chirality_test(geom: &LoopGeometry, period: f64, spec: &PrecisionSpec) -> Result<ChiralityVerdict> {
    let fwd = geom.with_period(period)?;
    let rev = fwd.with_direction(fwd.direction().reversed());
    let sel = select_branch(&fwd)?;
    let a = end_of_period_ln_ratio(&fwd, sel, spec)?;
    let b = end_of_period_ln_ratio(&rev, sel, spec)?;
    let (fa, fb) = (FinalBranch::classify(a), FinalBranch::classify(b));
    let verdict = if fa.kind() != fb.kind() { Chirality::Chiral } else { Chirality::NonChiral };
    Ok(ChiralityVerdict {
        geometry: fwd,
        period,
        ln_abs_ratio_forward: a,
        ln_abs_ratio_reverse: b,
        final_branch_forward: fa,
        final_branch_reverse: fb,
        verdict,
    })
}

/// Largest pointwise gap between `ln|R+|` on the reversed loop and `ln|R-|`
/// on the forward loop, over `samples` points of one period.
pub fn direction_symmetry_gap(geom: &LoopGeometry, spec: &PrecisionSpec, samples: usize) -> Result<f64> {
    let rev = geom.with_direction(geom.direction().reversed());
    let a = propagate_schrodinger(&rev, BranchSelection::new(Branch::Plus), spec, samples)?;
    let b = propagate_schrodinger(geom, BranchSelection::new(Branch::Minus), spec, samples)?;
    Ok(a.ln_abs_ratio.iter().zip(&b.ln_abs_ratio).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// `|R+(T) R-(T)|`, both started in their own eigenstate.
pub fn selection_product(geom: &LoopGeometry, spec: &PrecisionSpec) -> Result<f64> {
    let a = end_of_period_ln_ratio(geom, BranchSelection::plus(), spec)?;
    let b = end_of_period_ln_ratio(geom, BranchSelection::minus(), spec)?;
    Ok((a + b).exp())
}

/// Pre-transition `|R-(T)|` on an EP-centred loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauMeasurement {
    pub geometry: LoopGeometry,
    pub periods: Vec<f64>,
    pub values: Vec<f64>,
    pub median: f64,
    /// `(max - min) / median`.
    pub spread: f64,
    /// The closer of the two predictions, 2 or π.
    pub closer_to: f64,
}

pub fn plateau_measure(geom: &LoopGeometry, spec: &PrecisionSpec, periods: &[f64]) -> Result<PlateauMeasurement> {
    if geom.classify()? != LoopClass::EpEncircling {
        return Err(Error::NotApplicable("plateau measurement needs an EP-encircling loop".into()));
    }
    if periods.is_empty() {
        return Err(Error::InvalidArgument("plateau measurement needs at least one period".into()));
    }
    let sel = select_branch(geom)?;
    let values = periods
        .iter()
        .map(|&t| Ok(end_of_period_ln_ratio(&geom.with_period(t)?, sel, spec)?.exp()))
        .collect::<Result<Vec<f64>>>()?;
    summarize_plateau(*geom, periods.to_vec(), values)
}

/// Median and spread of plateau samples; `NO_PLATEAU` beyond the limit.
pub fn summarize_plateau(geometry: LoopGeometry, periods: Vec<f64>, values: Vec<f64>) -> Result<PlateauMeasurement> {
    let median = median(&values);
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    let min = values.iter().cloned().fold(f64::MAX, f64::min);
    let spread = (max - min) / median;
    if !(spread <= PLATEAU_SPREAD_LIMIT) {
        return Err(Error::NoPlateau { spread });
    }
    let closer_to = if (median - 2.0).abs() <= (median - std::f64::consts::PI).abs() { 2.0 } else { std::f64::consts::PI };
    Ok(PlateauMeasurement { geometry, periods, values, median, spread, closer_to })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
