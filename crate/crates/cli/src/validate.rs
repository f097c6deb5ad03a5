//! Invariant suite behind `nhloop validate`.

use std::f64::consts::{FRAC_PI_3, FRAC_PI_4, FRAC_PI_6};

use nhloop::asymptotics::{finite_difference_check, integrate_energy, psi_integral, w_integral, AsymptoticModel, Integrand};
use nhloop::model::{hamiltonian, select_branch, spectral_frame, stability_exchange_times, EnergyPath};
use nhloop::precision::PrecisionSpec;
use nhloop::propagator::{propagate_riccati, propagate_schrodinger};
use nhloop::{LoopGeometry, Result};
use num_complex::Complex64;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

fn check(name: &'static str, value: f64, limit: f64) -> Check {
    Check { name, value, limit, passed: value < limit }
}

fn frame_residuals(z: Complex64) -> Result<(f64, f64)> {
    let f = spectral_frame(z, 1e-6)?;
    let (p, q) = (f.p(), f.p_inv());
    let mut bio: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let id = if i == j { 1.0 } else { 0.0 };
            bio = bio.max((p[i][0] * q[0][j] + p[i][1] * q[1][j] - id).norm());
        }
    }
    let h = hamiltonian(z);
    let mut eig: f64 = 0.0;
    for (v, e) in [(f.v_plus, f.energy), (f.v_minus, -f.energy)] {
        for i in 0..2 {
            eig = eig.max((h[i][0] * v[0] + h[i][1] * v[1] - e * v[i]).norm());
        }
    }
    Ok((bio, eig))
}

pub fn run_suite() -> Result<Vec<Check>> {
    let ulp = f64::EPSILON;
    let loops = [
        LoopGeometry::symmetric(0.5, 400.0)?,
        LoopGeometry::phase_shifted(0.3, FRAC_PI_4, 400.0)?,
        LoopGeometry::offset(0.05, 0.2, 400.0)?,
        LoopGeometry::offset(0.5, 0.2, 400.0)?,
        LoopGeometry::ep_encircling(0.3, 300.0)?,
    ];

    let (mut bio, mut eig): (f64, f64) = (0.0, 0.0);
    for g in &loops {
        for k in 0..256 {
            let (b, e) = frame_residuals(g.z_at(k as f64 * g.period() / 256.0))?;
            bio = bio.max(b);
            eig = eig.max(e);
        }
    }

    let mut im_at_exchange: f64 = 0.0;
    for g in &loops[..4] {
        let path = EnergyPath::new(g);
        for t in stability_exchange_times(g)? {
            im_at_exchange = im_at_exchange.max(path.energy(t).im.abs());
        }
    }

    let spec = PrecisionSpec::floor(53, 0.01)?;
    let mut ric: f64 = 0.0;
    for g in [LoopGeometry::symmetric(0.5, 300.0)?, LoopGeometry::phase_shifted(0.3, FRAC_PI_3, 300.0)?] {
        let sel = select_branch(&g)?;
        let s = propagate_schrodinger(&g, sel, &spec, 129)?;
        let r = propagate_riccati(&g, sel, &spec, 129)?;
        for (a, b) in s.ln_abs_ratio.iter().zip(&r.ln_abs_ratio) {
            ric = ric.max((a - b).abs());
        }
    }

    let mut quad: f64 = 0.0;
    for g in loops.iter().chain([&LoopGeometry::phase_shifted(0.3, FRAC_PI_6, 2000.0)?]) {
        let t = g.period();
        let w = w_integral(g, 0.6 * t)?;
        quad = quad.max((w - integrate_energy(g, 0.0, 0.6 * t, Integrand::Approximate)?).norm() / w.norm());
        let t_star = AsymptoticModel::new(g, 1)?.t_star;
        let sign = select_branch(g)?.initial_branch.sign();
        let p = psi_integral(g, t)?;
        quad = quad.max((p - sign * integrate_energy(g, t_star, t, Integrand::Approximate)?).norm() / p.norm());
    }

    let mut fd: f64 = 0.0;
    for g in &loops {
        fd = fd.max(finite_difference_check(g, 0.37 * g.period())?);
    }

    Ok(vec![
        check("biorthogonality", bio, 10.0 * ulp),
        check("eigen_residual", eig, 100.0 * ulp),
        check("im_energy_at_exchange", im_at_exchange, 1e-10),
        check("riccati_vs_schrodinger", ric, 1e-3),
        check("closed_form_vs_quadrature", quad, 1e-8),
        check("series_vs_finite_difference", fd, 1e-8),
    ])
}
