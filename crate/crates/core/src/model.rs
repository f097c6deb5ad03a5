//! The two-level Hamiltonian `H(z) = [[iz, -1], [-1, -iz]]`, its spectral
//! decomposition and the circular parameter loops `z(t) = g0 - r e^{-i(ft + phi0)}`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::complex::Cx;
use crate::error::{Error, Result};
use crate::precision::Real;

/// Frames closer than this to an exceptional point are refused.
pub const DEFAULT_EPS_EP: f64 = 1e-9;

/// Uniform samples per period used to track the energy branch and to bracket
/// exchange times.
pub const BRANCH_GRID: usize = 4096;

const CLASS_TOL: f64 = 1e-12;

pub type Matrix2 = [[Complex64; 2]; 2];

pub fn hamiltonian(z: Complex64) -> Matrix2 {
    let i = Complex64::i();
    let one = Complex64::new(1.0, 0.0);
    [[i * z, -one], [-one, -i * z]]
}

/// Sense of traversal. `Clockwise` means `f > 0`, since `e^{-ift}` turns clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Clockwise,
    CounterClockwise,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Clockwise => 1.0,
            Direction::CounterClockwise => -1.0,
        }
    }

    pub fn from_sign(sign: f64) -> Result<Self> {
        if sign > 0.0 {
            Ok(Direction::Clockwise)
        } else if sign < 0.0 {
            Ok(Direction::CounterClockwise)
        } else {
            Err(Error::InvalidArgument("direction must be +1 or -1".into()))
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Direction::Clockwise => Direction::CounterClockwise,
            Direction::CounterClockwise => Direction::Clockwise,
        }
    }
}

/// The loop families with closed-form asymptotics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LoopClass {
    /// `g0 = 0`, `phi0 = 0`.
    Symmetric,
    /// `g0 = 0`, `phi0 != 0`.
    PhaseShifted,
    /// `0 < g0 < r`.
    OffsetInside,
    /// `g0 >= r`, `g0 + r < 1`.
    OffsetOutside,
    /// `g0 = 1`, `phi0 = pi`: `z(t) = 1 + r e^{-ift}` winds around the EP at `z = 1`.
    EpEncircling,
    /// `g0 = 1`, `phi0 = 0`: `z(t) = 1 - r e^{-ift}` starts at a Hermitian point.
    HermitianStart,
}

impl fmt::Display for LoopClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LoopClass::Symmetric => "SYMMETRIC",
            LoopClass::PhaseShifted => "PHASE_SHIFTED",
            LoopClass::OffsetInside => "OFFSET_INSIDE",
            LoopClass::OffsetOutside => "OFFSET_OUTSIDE",
            LoopClass::EpEncircling => "EP_ENCIRCLING",
            LoopClass::HermitianStart => "HERMITIAN_START",
        };
        f.write_str(name)
    }
}

/// A circular loop `z(t) = g0 - r e^{-i(ft + phi0)}` with `f = ±2π/T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopGeometry {
    g0: f64,
    r: f64,
    phi0: f64,
    direction: Direction,
    period: f64,
}

impl LoopGeometry {
    pub fn new(g0: f64, r: f64, phi0: f64, period: f64, direction: Direction) -> Result<Self> {
        if !g0.is_finite() || !phi0.is_finite() {
            return Err(Error::InvalidGeometry("g0 and phi0 must be finite".into()));
        }
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidGeometry(format!("radius must be positive, got {r}")));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::InvalidGeometry(format!("period must be positive, got {period}")));
        }
        let mut phi0 = phi0.rem_euclid(TAU);
        if TAU - phi0 < CLASS_TOL {
            phi0 = 0.0;
        }
        Ok(Self { g0, r, phi0, direction, period })
    }

    pub fn symmetric(r: f64, period: f64) -> Result<Self> {
        Self::new(0.0, r, 0.0, period, Direction::Clockwise)
    }

    pub fn phase_shifted(r: f64, phi0: f64, period: f64) -> Result<Self> {
        Self::new(0.0, r, phi0, period, Direction::Clockwise)
    }

    pub fn offset(g0: f64, r: f64, period: f64) -> Result<Self> {
        Self::new(g0, r, 0.0, period, Direction::Clockwise)
    }

    pub fn ep_encircling(r: f64, period: f64) -> Result<Self> {
        Self::new(1.0, r, PI, period, Direction::Clockwise)
    }

    pub fn hermitian_start(r: f64, period: f64) -> Result<Self> {
        Self::new(1.0, r, 0.0, period, Direction::Clockwise)
    }

    pub fn g0(&self) -> f64 {
        self.g0
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn phi0(&self) -> f64 {
        self.phi0
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Signed angular frequency `f`.
    pub fn frequency(&self) -> f64 {
        self.direction.sign() * TAU / self.period
    }

    pub fn with_period(&self, period: f64) -> Result<Self> {
        Self::new(self.g0, self.r, self.phi0, period, self.direction)
    }

    pub fn with_direction(&self, direction: Direction) -> Self {
        Self { direction, ..*self }
    }

    pub fn classify(&self) -> Result<LoopClass> {
        let near = |a: f64, b: f64| (a - b).abs() <= CLASS_TOL;
        let (g0, r, phi0) = (self.g0, self.r, self.phi0);
        if near(g0, 0.0) {
            return Ok(if near(phi0, 0.0) { LoopClass::Symmetric } else { LoopClass::PhaseShifted });
        }
        if near(g0, 1.0) {
            if near(phi0, PI) {
                return Ok(LoopClass::EpEncircling);
            }
            if near(phi0, 0.0) {
                return Ok(LoopClass::HermitianStart);
            }
            return Err(Error::Unclassified);
        }
        if !near(phi0, 0.0) || g0 < 0.0 {
            return Err(Error::Unclassified);
        }
        if g0 < r {
            Ok(LoopClass::OffsetInside)
        } else if g0 + r < 1.0 {
            Ok(LoopClass::OffsetOutside)
        } else {
            Err(Error::Unclassified)
        }
    }

    /// Phase-shifted loops outside `phi0 ∈ (0, π/2]` have no derived asymptotics.
    pub fn is_extrapolated(&self) -> bool {
        matches!(self.classify(), Ok(LoopClass::PhaseShifted))
            && !(self.phi0 > 0.0 && self.phi0 <= FRAC_PI_2 + CLASS_TOL)
    }

    /// The offset expansion of `E(t)` needs the loop to stay clear of `z = 1`.
    pub fn offset_approximation_valid(&self) -> bool {
        self.r + self.g0.abs() < 1.0
    }

    /// `theta0 = phi0 - π` for loops centred on the EP at `z = 1`, in `[0, 2π)`.
    pub fn stokes_angle(&self) -> f64 {
        let t = (self.phi0 - PI).rem_euclid(TAU);
        if TAU - t < CLASS_TOL {
            0.0
        } else {
            t
        }
    }

    /// Loop phase `f t + phi0` with the winding removed: `t = T` gives exactly `phi0`.
    pub fn phase(&self, t: f64) -> f64 {
        let frac = (t / self.period).rem_euclid(1.0);
        self.direction.sign() * TAU * frac + self.phi0
    }

    pub fn z_at(&self, t: f64) -> Complex64 {
        let (s, c) = self.phase(t).sin_cos();
        Complex64::new(self.g0 - self.r * c, self.r * s)
    }

    /// `dz/dt = i f r e^{-i(ft + phi0)}`.
    pub fn z_dot_at(&self, t: f64) -> Complex64 {
        let rot = Complex64::from_polar(1.0, -self.phase(t));
        Complex64::i() * self.frequency() * self.r * rot
    }

    /// Principal `sqrt(1 - z^2)` at `t`, no branch tracking.
    pub fn principal_energy(&self, t: f64) -> Complex64 {
        let z = self.z_at(t);
        (1.0 - z * z).sqrt()
    }

    /// Energy branch at `t = 0`.
    ///
    /// For loops centred on `z = 1` with `theta0 ∈ [0, π)` the start sits on
    /// the cut of the principal root; the branch is the one continuous with
    /// `-i sqrt(2r) e^{-i theta0 / 2}`. Every other loop starts on the principal branch.
    pub fn initial_energy(&self) -> Complex64 {
        let e = self.principal_energy(0.0);
        if (self.g0 - 1.0).abs() <= CLASS_TOL && self.stokes_angle() < PI - CLASS_TOL {
            let hint = -Complex64::i()
                * (2.0 * self.r).sqrt()
                * Complex64::from_polar(1.0, -0.5 * self.stokes_angle());
            return align(e, hint);
        }
        e
    }
}

/// `candidate` or `-candidate`, whichever is closer to `reference`.
pub fn align(candidate: Complex64, reference: Complex64) -> Complex64 {
    if (candidate - reference).norm() > (candidate + reference).norm() {
        -candidate
    } else {
        candidate
    }
}

pub fn z_of_t(geom: &LoopGeometry, t: f64) -> Complex64 {
    geom.z_at(t)
}

/// Which eigenvector seeds `psi(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    pub fn sign(self) -> f64 {
        match self {
            Branch::Plus => 1.0,
            Branch::Minus => -1.0,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Branch::Plus => Branch::Minus,
            Branch::Minus => Branch::Plus,
        }
    }
}

/// The population ratio that is followed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrackedRatio {
    /// `R+ = c- / c+`.
    RPlus,
    /// `R- = c+ / c-`.
    RMinus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BranchSelection {
    pub initial_branch: Branch,
    pub tracked_ratio: TrackedRatio,
}

impl BranchSelection {
    pub fn new(initial_branch: Branch) -> Self {
        let tracked_ratio = match initial_branch {
            Branch::Plus => TrackedRatio::RPlus,
            Branch::Minus => TrackedRatio::RMinus,
        };
        Self { initial_branch, tracked_ratio }
    }

    pub fn plus() -> Self {
        Self::new(Branch::Plus)
    }

    pub fn minus() -> Self {
        Self::new(Branch::Minus)
    }
}

/// Starts in the eigenstate whose adiabatic fixed point loses stability near
/// the end of the period. A Hermitian-start loop never exchanges stability;
/// it starts in the eigenstate with `Im(±E) >= 0` along the whole loop.
pub fn select_branch(geom: &LoopGeometry) -> Result<BranchSelection> {
    let branch = match geom.classify()? {
        LoopClass::Symmetric | LoopClass::OffsetInside => Branch::Plus,
        LoopClass::PhaseShifted | LoopClass::OffsetOutside | LoopClass::EpEncircling => {
            Branch::Minus
        }
        LoopClass::HermitianStart => {
            let path = EnergyPath::new(geom);
            let mid = path.energy(0.5 * geom.period());
            if mid.im <= 0.0 {
                Branch::Minus
            } else {
                Branch::Plus
            }
        }
    };
    Ok(BranchSelection::new(branch))
}

/// Instantaneous eigen-decomposition of `H(z)` on a chosen energy branch.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrame {
    pub z: Complex64,
    pub energy: Complex64,
    /// Mixing angle with `tan θ = i/z`, fixed by `tan(θ/2) = iz - E`.
    pub theta: Complex64,
    pub v_plus: [Complex64; 2],
    pub v_minus: [Complex64; 2],
    pub u_plus: [Complex64; 2],
    pub u_minus: [Complex64; 2],
}

impl SpectralFrame {
    /// `P = (v+ v-)`.
    pub fn p(&self) -> Matrix2 {
        [[self.v_plus[0], self.v_minus[0]], [self.v_plus[1], self.v_minus[1]]]
    }

    /// `P^-1` with rows `u+`, `u-`.
    pub fn p_inv(&self) -> Matrix2 {
        [self.u_plus, self.u_minus]
    }

    /// `(c+, c-) = P^-1 psi`.
    pub fn project(&self, psi: [Complex64; 2]) -> (Complex64, Complex64) {
        (
            self.u_plus[0] * psi[0] + self.u_plus[1] * psi[1],
            self.u_minus[0] * psi[0] + self.u_minus[1] * psi[1],
        )
    }
}

/// Frame on the principal branch of `sqrt(1 - z^2)`.
pub fn spectral_frame(z: Complex64, eps_ep: f64) -> Result<SpectralFrame> {
    let w = 1.0 - z * z;
    check_ep(z, w, eps_ep)?;
    Ok(frame_from_energy(z, w.sqrt()))
}

/// Frame on the branch of `sqrt(1 - z^2)` closest to `energy_hint`.
pub fn spectral_frame_near(z: Complex64, energy_hint: Complex64, eps_ep: f64) -> Result<SpectralFrame> {
    let w = 1.0 - z * z;
    check_ep(z, w, eps_ep)?;
    Ok(frame_from_energy(z, align(w.sqrt(), energy_hint)))
}

fn check_ep(z: Complex64, w: Complex64, eps_ep: f64) -> Result<()> {
    let distance = w.norm();
    if !(distance > eps_ep) {
        return Err(Error::EpDegeneracy { z, distance });
    }
    Ok(())
}

fn frame_from_energy(z: Complex64, energy: Complex64) -> SpectralFrame {
    let (c, s) = rotation(&Cx::new(z.re, z.im), &Cx::new(energy.re, energy.im));
    let (c, s) = (c.to_c64(), s.to_c64());
    let theta = 2.0 * (Complex64::i() * z - energy).atan();
    SpectralFrame {
        z,
        energy,
        theta,
        v_plus: [c, s],
        v_minus: [-s, c],
        u_plus: [c, s],
        u_minus: [-s, c],
    }
}

/// `(cos θ/2, sin θ/2)` with `tan(θ/2) = iz - E`, so that `H v± = ±E v±`.
pub(crate) fn rotation<R: Real>(z: &Cx<R>, energy: &Cx<R>) -> (Cx<R>, Cx<R>) {
    let t = &z.mul_i() - energy;
    let one = Cx::one(&z.re);
    let c = (&one + &(&t * &t)).sqrt().inv();
    let s = &t * &c;
    (c, s)
}

/// Tracks the energy branch by continuity along a sequence of points.
#[derive(Debug, Clone)]
pub struct BranchTracker {
    previous: Complex64,
}

impl BranchTracker {
    pub fn new(initial: Complex64) -> Self {
        Self { previous: initial }
    }

    /// Returns `true` when `candidate` must be negated to stay on the branch.
    pub fn flip_needed(&mut self, candidate: Complex64) -> bool {
        let flip = (candidate - self.previous).norm() > (candidate + self.previous).norm();
        self.previous = if flip { -candidate } else { candidate };
        flip
    }

    pub fn current(&self) -> Complex64 {
        self.previous
    }
}

/// Exact `E(t) = sqrt(1 - z(t)^2)` on the branch continued from [`LoopGeometry::initial_energy`].
#[derive(Debug, Clone)]
pub struct EnergyPath {
    geom: LoopGeometry,
    grid: Vec<Complex64>,
}

impl EnergyPath {
    pub fn new(geom: &LoopGeometry) -> Self {
        let mut tracker = BranchTracker::new(geom.initial_energy());
        let step = geom.period() / BRANCH_GRID as f64;
        let mut grid = Vec::with_capacity(BRANCH_GRID + 1);
        grid.push(geom.initial_energy());
        for k in 1..=BRANCH_GRID {
            let e = geom.principal_energy(k as f64 * step);
            let e = if tracker.flip_needed(e) { -e } else { e };
            grid.push(e);
        }
        Self { geom: *geom, grid }
    }

    pub fn geometry(&self) -> &LoopGeometry {
        &self.geom
    }

    pub fn grid(&self) -> &[Complex64] {
        &self.grid
    }

    pub fn grid_time(&self, k: usize) -> f64 {
        self.geom.period() * k as f64 / BRANCH_GRID as f64
    }

    /// Tracked energy at any `t ∈ [0, T]`.
    pub fn energy(&self, t: f64) -> Complex64 {
        let pos = (t / self.geom.period() * BRANCH_GRID as f64).round();
        let k = pos.clamp(0.0, BRANCH_GRID as f64) as usize;
        if k == 0 && t <= 0.0 {
            return self.grid[0];
        }
        align(self.geom.principal_energy(t), self.grid[k])
    }

    /// Tracked frame at `t`.
    pub fn frame(&self, t: f64, eps_ep: f64) -> Result<SpectralFrame> {
        let z = self.geom.z_at(t);
        spectral_frame_near(z, self.energy(t), eps_ep)
    }
}

/// All `t ∈ (0, T]` where `Im E(t)` changes sign.
///
/// `Im E` is bracketed on [`BRANCH_GRID`] uniform samples and refined by
/// bisection to a relative tolerance of `1e-12`. The endpoint `t = T` counts
/// when `Im E` just before `T` and just after `0` have opposite signs.
pub fn stability_exchange_times(geom: &LoopGeometry) -> Result<Vec<f64>> {
    let path = EnergyPath::new(geom);
    let period = geom.period();
    let im: Vec<f64> = path.grid().iter().map(|e| e.im).collect();
    let scale = path.grid().iter().map(|e| e.norm()).fold(0.0, f64::max).max(1e-300);
    let zero_tol = 1e-13 * scale;
    let sign = |v: f64| if v.abs() <= zero_tol { 0 } else if v > 0.0 { 1 } else { -1 };

    let mut roots = Vec::new();
    let mut k = 1;
    while k < BRANCH_GRID {
        let (a, b) = (sign(im[k - 1]), sign(im[k]));
        if a != 0 && b != 0 && a != b {
            let (lo, hi) = (path.grid_time(k - 1), path.grid_time(k));
            roots.push(bisect_im(&path, lo, hi, im[k - 1] > 0.0));
        } else if b == 0 && k + 1 < BRANCH_GRID {
            // sample sits on a root; count it when the sign flips across it
            let before = sign(im[k - 1]);
            let mut j = k + 1;
            while j < BRANCH_GRID && sign(im[j]) == 0 {
                j += 1;
            }
            if before != 0 && j < BRANCH_GRID && sign(im[j]) != 0 && sign(im[j]) != before {
                roots.push(path.grid_time(k));
            }
            k = j;
            continue;
        }
        k += 1;
    }
    let last = sign(im[BRANCH_GRID - 1]);
    let first = sign(im[1]);
    if sign(im[BRANCH_GRID]) == 0 && last != 0 && first != 0 && last != first {
        roots.push(period);
    } else if last != 0 && sign(im[BRANCH_GRID]) != 0 && last != sign(im[BRANCH_GRID]) {
        roots.push(bisect_im(&path, path.grid_time(BRANCH_GRID - 1), period, im[BRANCH_GRID - 1] > 0.0));
    }

    roots.sort_by(|a, b| a.partial_cmp(b).expect("finite roots"));
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * period);
    if roots.is_empty() {
        return Err(Error::NoExchange);
    }
    Ok(roots)
}

fn bisect_im(path: &EnergyPath, mut lo: f64, mut hi: f64, lo_positive: bool) -> f64 {
    for _ in 0..200 {
        if (hi - lo) <= 1e-12 * hi.abs().max(1e-300) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let v = path.energy(mid).im;
        if v == 0.0 {
            return mid;
        }
        if (v > 0.0) == lo_positive {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// The exchange time closest to (and not after) the end of the period.
pub fn last_exchange_time(geom: &LoopGeometry) -> Result<f64> {
    let roots = stability_exchange_times(geom)?;
    let period = geom.period();
    roots
        .into_iter()
        .rev()
        .find(|&t| t < period * (1.0 - 1e-9))
        .ok_or(Error::NoExchange)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn max_abs(m: Matrix2) -> f64 {
        m.iter().flatten().map(|c| c.norm()).fold(0.0, f64::max)
    }

    fn mat_mul(a: Matrix2, b: Matrix2) -> Matrix2 {
        let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        out
    }

    #[test]
    fn hamiltonian_examples() {
        let h = hamiltonian(Complex64::new(0.0, 0.0));
        assert_eq!(h[0][0], Complex64::new(0.0, 0.0));
        assert_eq!(h[0][1], Complex64::new(-1.0, 0.0));
        assert_eq!(h[1][0], Complex64::new(-1.0, 0.0));
        let h = hamiltonian(Complex64::i());
        assert_eq!(h, [
            [Complex64::new(-1.0, 0.0), Complex64::new(-1.0, 0.0)],
            [Complex64::new(-1.0, 0.0), Complex64::new(1.0, 0.0)]
        ]);
        // z = 1 is defective: H^2 = 0 but H != 0
        let h = hamiltonian(Complex64::new(1.0, 0.0));
        assert!(max_abs(mat_mul(h, h)) < 1e-15);
        assert!(max_abs(h) > 0.5);
    }

    #[test]
    fn frame_at_zero() {
        let f = spectral_frame(Complex64::new(0.0, 0.0), DEFAULT_EPS_EP).unwrap();
        assert_eq!(f.energy, Complex64::new(1.0, 0.0));
        // tan(θ/2) = -E picks θ = -π/2 so that v+ carries +E
        assert_relative_eq!(f.theta.re, -FRAC_PI_2, epsilon = 1e-15);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(f.v_plus[0].re, s, epsilon = 1e-15);
        assert_relative_eq!(f.v_plus[1].re, -s, epsilon = 1e-15);
        // tan θ = i/z holds as cot θ = z/i = 0
        assert!(f.theta.cos().norm() < 1e-15);
    }

    #[test]
    fn frame_energy_at_minus_half() {
        let f = spectral_frame(Complex64::new(-0.5, 0.0), DEFAULT_EPS_EP).unwrap();
        // sqrt(0.75) to 20 digits: 0.86602540378443864676
        assert_relative_eq!(f.energy.re, 0.866_025_403_784_438_6, epsilon = 1e-15);
        assert_eq!(f.energy.im, 0.0);
    }

    #[test]
    fn frame_refuses_exceptional_points() {
        for z in [Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0), Complex64::new(1.0, 1e-12)] {
            match spectral_frame(z, DEFAULT_EPS_EP) {
                Err(Error::EpDegeneracy { distance, .. }) => assert!(distance <= DEFAULT_EPS_EP),
                other => panic!("expected EP_DEGENERACY, got {other:?}"),
            }
        }
    }

    fn check_frame(z: Complex64, tol_scale: f64) {
        let f = spectral_frame(z, 1e-6).unwrap();
        let eye = mat_mul(f.p(), f.p_inv());
        let resid = max_abs([
            [eye[0][0] - 1.0, eye[0][1]],
            [eye[1][0], eye[1][1] - 1.0],
        ]);
        let ulp = f64::EPSILON;
        assert!(resid < 10.0 * ulp * tol_scale, "biorthogonality {resid:e} at {z}");
        assert_relative_eq!((f.energy * f.energy - (1.0 - z * z)).norm(), 0.0, epsilon = 10.0 * ulp * (1.0 + z.norm_sqr()));
        let h = hamiltonian(z);
        for (v, e) in [(f.v_plus, f.energy), (f.v_minus, -f.energy)] {
            let hv = [h[0][0] * v[0] + h[0][1] * v[1], h[1][0] * v[0] + h[1][1] * v[1]];
            let r = (hv[0] - e * v[0]).norm().max((hv[1] - e * v[1]).norm());
            assert!(r < 100.0 * ulp * tol_scale, "eigen residual {r:e} at {z}");
        }
    }

    #[test]
    fn frame_invariants_on_loops() {
        for geom in [
            LoopGeometry::symmetric(0.7, 100.0).unwrap(),
            LoopGeometry::offset(0.5, 0.2, 100.0).unwrap(),
            LoopGeometry::ep_encircling(0.3, 100.0).unwrap(),
        ] {
            for k in 0..64 {
                check_frame(geom.z_at(k as f64 * geom.period() / 64.0), 1.0);
            }
        }
    }

    proptest! {
        #[test]
        fn frame_invariants_random(re in -2.0f64..2.0, im in -2.0f64..2.0) {
            let z = Complex64::new(re, im);
            prop_assume!((1.0 - z * z).norm() > 1e-2);
            // conditioning of P grows like 1/sqrt|1 - z^2|
            let cond = 1.0 / (1.0 - z * z).norm().sqrt();
            check_frame(z, 4.0 * cond * (1.0 + z.norm()));
        }

        #[test]
        fn loop_points_lie_on_circle(g0 in -0.5f64..1.0, r in 0.05f64..1.0, phi0 in 0.0f64..6.0, t in 0.0f64..1.0) {
            let geom = LoopGeometry::new(g0, r, phi0, 37.0, Direction::Clockwise).unwrap();
            let z = geom.z_at(t * 37.0);
            prop_assert!(((z - g0).norm() - r).abs() < 1e-14);
        }
    }

    #[test]
    fn z_of_t_examples() {
        let sym = LoopGeometry::symmetric(0.5, 10.0).unwrap();
        assert_eq!(z_of_t(&sym, 0.0), Complex64::new(-0.5, 0.0));
        let ep = LoopGeometry::ep_encircling(0.3, 10.0).unwrap();
        assert_relative_eq!(z_of_t(&ep, 0.0).re, 1.3, epsilon = 1e-15);
        assert!(z_of_t(&ep, 0.0).im.abs() < 1e-15);
        for geom in [sym, ep, LoopGeometry::phase_shifted(0.3, 0.4, 7.0).unwrap()] {
            // closure is exact by argument reduction
            assert_eq!(z_of_t(&geom, geom.period()), z_of_t(&geom, 0.0));
        }
    }

    #[test]
    fn classification() {
        let c = |g0, r, phi0| LoopGeometry::new(g0, r, phi0, 10.0, Direction::Clockwise).unwrap().classify();
        assert_eq!(c(0.0, 0.5, 0.0), Ok(LoopClass::Symmetric));
        assert_eq!(c(0.0, 0.5, 0.3), Ok(LoopClass::PhaseShifted));
        assert_eq!(c(0.1, 0.2, 0.0), Ok(LoopClass::OffsetInside));
        assert_eq!(c(0.3, 0.2, 0.0), Ok(LoopClass::OffsetOutside));
        assert_eq!(c(0.2, 0.2, 0.0), Ok(LoopClass::OffsetOutside));
        assert_eq!(c(1.0, 0.3, PI), Ok(LoopClass::EpEncircling));
        assert_eq!(c(1.0, 0.3, 0.0), Ok(LoopClass::HermitianStart));
        assert_eq!(c(0.8, 0.3, 0.0), Err(Error::Unclassified));
        assert_eq!(c(1.0, 0.3, 1.0), Err(Error::Unclassified));
        assert_eq!(c(-0.2, 0.3, 0.0), Err(Error::Unclassified));
        assert!(!LoopGeometry::offset(0.8, 0.3, 1.0).unwrap().offset_approximation_valid());
        assert!(LoopGeometry::offset(0.7, 0.2, 1.0).unwrap().offset_approximation_valid());
        assert!(!LoopGeometry::phase_shifted(0.3, 1.0, 1.0).unwrap().is_extrapolated());
        assert!(LoopGeometry::phase_shifted(0.3, 2.0, 1.0).unwrap().is_extrapolated());
        assert!(LoopGeometry::new(0.0, 0.3, TAU, 1.0, Direction::Clockwise).unwrap().classify() == Ok(LoopClass::Symmetric));
    }

    #[test]
    fn symmetric_exchange_times() {
        let geom = LoopGeometry::symmetric(0.5, 100.0).unwrap();
        let roots = stability_exchange_times(&geom).unwrap();
        let want = [25.0, 50.0, 75.0, 100.0];
        assert_eq!(roots.len(), 4, "{roots:?}");
        for (a, b) in roots.iter().zip(want) {
            assert_relative_eq!(*a, b, max_relative = 1e-10);
        }
        assert_relative_eq!(last_exchange_time(&geom).unwrap(), 75.0, max_relative = 1e-10);
        let path = EnergyPath::new(&geom);
        for t in roots {
            assert!(path.energy(t).im.abs() < 1e-10);
        }
    }

    #[test]
    fn phase_shifted_last_exchange() {
        for phi0 in [PI / 6.0, PI / 4.0, PI / 3.0, PI / 2.0] {
            let geom = LoopGeometry::phase_shifted(0.3, phi0, 200.0).unwrap();
            // roots of sin(2(ft + phi0)); the last one before T is ft = 2π - phi0
            let t_star = last_exchange_time(&geom).unwrap();
            assert_relative_eq!(t_star, 200.0 * (1.0 - phi0 / TAU), max_relative = 1e-10);
        }
    }

    #[test]
    fn offset_and_ep_exchange_times() {
        let geom = LoopGeometry::offset(0.05, 0.2, 100.0).unwrap();
        let roots = stability_exchange_times(&geom).unwrap();
        let s = (0.05f64 / 0.2).acos();
        for want in [s / TAU * 100.0, 50.0, (1.0 - s / TAU) * 100.0, 100.0] {
            assert!(roots.iter().any(|t| (t - want).abs() < 1e-8), "{want} not in {roots:?}");
        }
        for geom in [LoopGeometry::offset(0.5, 0.2, 100.0).unwrap(), LoopGeometry::ep_encircling(0.3, 100.0).unwrap()] {
            let roots = stability_exchange_times(&geom).unwrap();
            assert!(roots.iter().any(|t| (t - 50.0).abs() < 1e-8), "{roots:?}");
        }
    }

    #[test]
    fn hermitian_start_never_exchanges() {
        let geom = LoopGeometry::hermitian_start(0.3, 100.0).unwrap();
        assert_eq!(stability_exchange_times(&geom), Err(Error::NoExchange));
        let sel = select_branch(&geom).unwrap();
        assert_eq!(sel.initial_branch, Branch::Minus);
        let path = EnergyPath::new(&geom);
        assert!(path.grid().iter().all(|e| -e.im >= -1e-15));
        let rev = select_branch(&geom.with_direction(Direction::CounterClockwise)).unwrap();
        assert_eq!(rev.initial_branch, Branch::Plus);
    }

    #[test]
    fn branch_selection_table() {
        let sel = |g: LoopGeometry| select_branch(&g).unwrap().initial_branch;
        assert_eq!(sel(LoopGeometry::symmetric(0.5, 1.0).unwrap()), Branch::Plus);
        assert_eq!(sel(LoopGeometry::phase_shifted(0.5, 0.3, 1.0).unwrap()), Branch::Minus);
        assert_eq!(sel(LoopGeometry::offset(0.1, 0.2, 1.0).unwrap()), Branch::Plus);
        assert_eq!(sel(LoopGeometry::offset(0.5, 0.2, 1.0).unwrap()), Branch::Minus);
        assert_eq!(sel(LoopGeometry::ep_encircling(0.3, 1.0).unwrap()), Branch::Minus);
        assert_eq!(BranchSelection::minus().tracked_ratio, TrackedRatio::RMinus);
        assert_eq!(
            select_branch(&LoopGeometry::offset(0.9, 0.3, 1.0).unwrap()),
            Err(Error::Unclassified)
        );
    }

    #[test]
    fn ep_loop_monodromy() {
        let geom = LoopGeometry::ep_encircling(0.3, 100.0).unwrap();
        let path = EnergyPath::new(&geom);
        let e0 = path.grid()[0];
        let e_t = *path.grid().last().unwrap();
        assert_relative_eq!((e0 + e_t).norm(), 0.0, epsilon = 1e-12);
        // start matches -i sqrt(2r) up to O(r)
        assert!(e0.im < 0.0 && e0.re.abs() < 1e-12);
    }
}
