//! Drift–diffusion coefficients and the explicit Fokker–Planck step
//!
//! `∂W/∂t = −∂ₓ(dₓW) − ∂ₚ(dₚW) + ½Dₓₓ∂ₓ²W + ½Dₚₚ∂ₚ²W + Dₓₚ∂ₓ∂ₚW`.
//!
//! Fluxes at cell faces average the cell-centre drift fluxes and use
//! centred gradients for diffusion, so the discrete mean and covariance
//! evolve exactly as the continuum ones; faces on the domain boundary carry
//! no flux. Time stepping is the three-stage strong-stability-preserving
//! Runge–Kutta scheme.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{FeedbackConfig, MeasurementParams, OscillatorParams};

use super::{GridField, GridSpec};

/// `c0 + cx·x + cp·p`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Affine {
    pub c0: f64,
    pub cx: f64,
    pub cp: f64,
}

impl Affine {
    pub fn eval(&self, x: f64, p: f64) -> f64 {
        self.c0 + self.cx * x + self.cp * p
    }

    fn max_abs_on(&self, s: &GridSpec) -> f64 {
        let (x0, x1, p0, p1) = (s.x(0), s.x(s.nx - 1), s.p(0), s.p(s.np - 1));
        [(x0, p0), (x0, p1), (x1, p0), (x1, p1)]
            .iter()
            .map(|&(x, p)| self.eval(x, p).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FpeCoefficients {
    pub dx: Affine,
    pub dp: Affine,
    pub dxx: f64,
    pub dpp: f64,
    pub dxp: f64,
}

impl FpeCoefficients {
    pub fn is_positive_semidefinite(&self) -> bool {
        self.dxx >= 0.0 && self.dpp >= 0.0 && self.dxx * self.dpp >= self.dxp * self.dxp
    }
}

/// Averaged drift and diffusion for the given feedback scheme.
///
/// With measurement in quantum mode `Dₚₚ` carries the back-action term
/// `ħγ/2`. Scheme I needs the delayed mean `⟨x⟩_τ`.
pub fn coefficients_for(
    fb: &FeedbackConfig,
    o: &OscillatorParams,
    mm: &MeasurementParams,
    t: f64,
    delayed_mean: Option<f64>,
) -> Result<FpeCoefficients> {
    let half = 0.5 * o.drift_kappa();
    let thermal = if mm.is_classical() {
        o.classical_thermal_diffusion()
    } else {
        o.thermal_diffusion()
    };
    let decoherence = if mm.has_measurement() {
        mm.decoherence_diffusion(o.hbar)
    } else {
        0.0
    };
    let mut co = FpeCoefficients {
        dx: Affine {
            c0: 0.0,
            cx: -half,
            cp: o.omega,
        },
        dp: Affine {
            c0: 0.0,
            cx: -o.omega,
            cp: -half,
        },
        dxx: thermal,
        dpp: thermal + decoherence,
        dxp: 0.0,
    };
    match *fb {
        FeedbackConfig::None => {}
        FeedbackConfig::Scheme2 { k, reference } => {
            co.dx.cx += k;
            co.dx.c0 -= k * reference.at(t);
            co.dxx += mm.feedback_diffusion(k, o.hbar)?;
        }
        FeedbackConfig::Scheme1 { k, .. } => {
            let delayed = delayed_mean.ok_or_else(|| {
                Error::DelayUnderflow("Scheme I coefficients need the delayed mean".into())
            })?;
            co.dx.cx += k;
            co.dx.c0 -= k * delayed;
            co.dxx += 2.0 * mm.feedback_diffusion(k, o.hbar)?;
        }
    }
    Ok(co)
}

/// Largest admissible step, `0.4·min(hₓ/|dₓ|, hₚ/|dₚ|, hₓ²/2Dₓₓ, hₚ²/2Dₚₚ)`.
pub fn stable_dt(spec: &GridSpec, co: &FpeCoefficients) -> f64 {
    let (hx, hp) = (spec.hx(), spec.hp());
    let bound = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::INFINITY };
    let limits = [
        bound(hx, co.dx.max_abs_on(spec)),
        bound(hp, co.dp.max_abs_on(spec)),
        bound(hx * hx, 2.0 * co.dxx),
        bound(hp * hp, 2.0 * co.dpp),
    ];
    0.4 * limits.iter().copied().fold(f64::INFINITY, f64::min)
}

fn check_dt(spec: &GridSpec, co: &FpeCoefficients, dt: f64) -> Result<()> {
    let limit = stable_dt(spec, co);
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::StepSize { dt, limit });
    }
    Ok(())
}

/// `out = L[w]`, the semi-discrete right-hand side.
fn apply_operator(spec: &GridSpec, co: &FpeCoefficients, w: &[f64], out: &mut [f64]) {
    let (nx, np) = (spec.nx, spec.np);
    let (hx, hp) = (spec.hx(), spec.hp());
    let xs = spec.xs();
    let ps = spec.ps();
    let (gx, gp) = (0.5 * co.dxx / hx, 0.5 * co.dpp / hp);
    let mixed = co.dxp / (4.0 * hx * hp);
    out.par_chunks_mut(nx).enumerate().for_each(|(j, row_out)| {
        let row = &w[j * nx..(j + 1) * nx];
        let below = (j > 0).then(|| &w[(j - 1) * nx..j * nx]);
        let above = (j + 1 < np).then(|| &w[(j + 1) * nx..(j + 2) * nx]);
        let p = ps[j];
        let mut f_left = 0.0;
        for i in 0..nx {
            let f_right = if i + 1 < nx {
                0.5 * (co.dx.eval(xs[i], p) * row[i] + co.dx.eval(xs[i + 1], p) * row[i + 1])
                    - gx * (row[i + 1] - row[i])
            } else {
                0.0
            };
            let here = co.dp.eval(xs[i], p) * row[i];
            let g_up = above.map_or(0.0, |a| {
                0.5 * (here + co.dp.eval(xs[i], ps[j + 1]) * a[i]) - gp * (a[i] - row[i])
            });
            let g_down = below.map_or(0.0, |b| {
                0.5 * (co.dp.eval(xs[i], ps[j - 1]) * b[i] + here) - gp * (row[i] - b[i])
            });
            let mut v = -(f_right - f_left) / hx - (g_up - g_down) / hp;
            if mixed != 0.0 {
                let at = |r: Option<&[f64]>, k: isize| {
                    r.and_then(|r| (k >= 0 && (k as usize) < nx).then(|| r[k as usize]))
                        .unwrap_or(0.0)
                };
                let ii = i as isize;
                v += mixed
                    * (at(above, ii + 1) - at(below, ii + 1) - at(above, ii - 1)
                        + at(below, ii - 1));
            }
            row_out[i] = v;
            f_left = f_right;
        }
    });
}

/// One SSP-RK3 step with coefficients evaluated at each stage time; no
/// renormalization.
pub(crate) fn advance<F>(field: &mut GridField, t: f64, dt: f64, coef: F) -> Result<()>
where
    F: Fn(f64) -> Result<FpeCoefficients>,
{
    let spec = field.spec;
    let stages = [coef(t)?, coef(t + dt)?, coef(t + 0.5 * dt)?];
    for co in &stages {
        if !co.is_positive_semidefinite() {
            return Err(Error::Parameter(format!(
                "diffusion matrix is not positive semidefinite: {co:?}"
            )));
        }
        check_dt(&spec, co, dt)?;
    }
    let u0 = &field.values;
    let n = u0.len();
    let mut l = vec![0.0; n];

    apply_operator(&spec, &stages[0], u0, &mut l);
    let u1: Vec<f64> = u0.iter().zip(&l).map(|(u, l)| u + dt * l).collect();

    apply_operator(&spec, &stages[1], &u1, &mut l);
    let u2: Vec<f64> = u0
        .iter()
        .zip(&u1)
        .zip(&l)
        .map(|((u, v), l)| 0.75 * u + 0.25 * (v + dt * l))
        .collect();

    apply_operator(&spec, &stages[2], &u2, &mut l);
    let next: Vec<f64> = u0
        .iter()
        .zip(&u2)
        .zip(&l)
        .map(|((u, v), l)| u / 3.0 + 2.0 / 3.0 * (v + dt * l))
        .collect();
    field.values = next;
    if field.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            time: t + dt,
            step: 0,
        });
    }
    Ok(())
}

/// Explicit step with fixed coefficients, followed by renormalization.
pub fn fpe_step(field: &GridField, co: &FpeCoefficients, dt: f64) -> Result<GridField> {
    fpe_step_timed(field, 0.0, dt, |_| Ok(*co))
}

/// Explicit step with time-dependent coefficients, followed by renormalization.
pub fn fpe_step_timed<F>(field: &GridField, t: f64, dt: f64, coef: F) -> Result<GridField>
where
    F: Fn(f64) -> Result<FpeCoefficients>,
{
    let mut next = field.clone();
    advance(&mut next, t, dt, coef)?;
    next.enforce_positivity();
    next.renormalize()?;
    Ok(next)
}
