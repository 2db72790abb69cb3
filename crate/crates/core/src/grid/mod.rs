//! Phase-space fields on a uniform cell-centred lattice.
//!
//! Values are stored row-major with index `ip * nx + ix`; each row is one
//! momentum slice.

mod fpe;
mod stochastic;

pub use fpe::{coefficients_for, fpe_step, fpe_step_timed, stable_dt, Affine, FpeCoefficients};
pub use stochastic::{
    bayes_measurement_update, feedback_noise_update, measurement_update, translate_x,
    ConditionalGrid, StepReport,
};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::GaussianState;

/// Mass deviation above which moments are refused.
pub const MASS_INTEGRITY_TOLERANCE: f64 = 1e-3;
/// Tolerated negativity of classical densities before clamping.
pub const NEGATIVITY_FLOOR: f64 = -1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub nx: usize,
    pub np: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl GridSpec {
    pub fn new(nx: usize, np: usize, x: (f64, f64), p: (f64, f64)) -> Result<Self> {
        if nx < 3 || np < 3 {
            return Err(Error::Shape(format!(
                "grid needs at least 3×3 cells, got {nx}×{np}"
            )));
        }
        if !(x.1 > x.0 && p.1 > p.0) || ![x.0, x.1, p.0, p.1].iter().all(|v| v.is_finite()) {
            return Err(Error::Shape(format!(
                "empty or non-finite bounds {x:?} × {p:?}"
            )));
        }
        Ok(Self {
            nx,
            np,
            x_min: x.0,
            x_max: x.1,
            p_min: p.0,
            p_max: p.1,
        })
    }

    /// Square `n × n` grid on `[−half, half]²`.
    pub fn symmetric(n: usize, half: f64) -> Result<Self> {
        Self::new(n, n, (-half, half), (-half, half))
    }

    /// 256² grid reaching six standard deviations past `reach` in both
    /// directions, where `reach` bounds the expected mean excursion.
    pub fn default_for(reach: f64, max_variance: f64) -> Result<Self> {
        Self::symmetric(256, reach.abs() + 6.0 * max_variance.sqrt())
    }

    pub fn hx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn hp(&self) -> f64 {
        (self.p_max - self.p_min) / self.np as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hp()
    }

    pub fn x(&self, ix: usize) -> f64 {
        self.x_min + (ix as f64 + 0.5) * self.hx()
    }

    pub fn p(&self, ip: usize) -> f64 {
        self.p_min + (ip as f64 + 0.5) * self.hp()
    }

    pub fn len(&self) -> usize {
        self.nx * self.np
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn ps(&self) -> Vec<f64> {
        (0..self.np).map(|j| self.p(j)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    /// Quasi-probability; negative values are physical.
    Wigner,
    /// Classical density; must stay non-negative.
    Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub spec: GridSpec,
    pub kind: FieldKind,
    pub values: Vec<f64>,
}

/// Midpoint-rule moments of a field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridMoments {
    pub mass: f64,
    pub mean_x: f64,
    pub mean_p: f64,
    pub vx: f64,
    pub vp: f64,
    pub c: f64,
    pub k30: f64,
    pub k21: f64,
    pub k12: f64,
    pub k03: f64,
}

impl GridMoments {
    pub fn max_third_cumulant(&self) -> f64 {
        self.k30
            .abs()
            .max(self.k21.abs())
            .max(self.k12.abs())
            .max(self.k03.abs())
    }

    pub fn as_gaussian(&self) -> GaussianState {
        GaussianState {
            mean_x: self.mean_x,
            mean_p: self.mean_p,
            v_x: self.vx,
            v_p: self.vp,
            c: self.c,
        }
    }
}

impl GridField {
    pub fn zeros(spec: GridSpec, kind: FieldKind) -> Self {
        Self {
            spec,
            kind,
            values: vec![0.0; spec.len()],
        }
    }

    pub fn from_values(spec: GridSpec, kind: FieldKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::Shape(format!(
                "{} values for a {}×{} grid",
                values.len(),
                spec.nx,
                spec.np
            )));
        }
        Ok(Self { spec, kind, values })
    }

    /// Gaussian with the given moments, sampled at cell centres and
    /// normalized to unit discrete mass.
    pub fn gaussian(spec: GridSpec, kind: FieldKind, g: &GaussianState) -> Result<Self> {
        let det = g.determinant();
        if !(g.v_x > 0.0 && g.v_p > 0.0 && det > 0.0) {
            return Err(Error::Parameter(format!(
                "covariance is not positive definite: {g:?}"
            )));
        }
        let (ixx, ipp, ixp) = (g.v_p / det, g.v_x / det, -g.c / det);
        let mut f = Self::zeros(spec, kind);
        for ip in 0..spec.np {
            let dp = spec.p(ip) - g.mean_p;
            for ix in 0..spec.nx {
                let dx = spec.x(ix) - g.mean_x;
                let q = ixx * dx * dx + 2.0 * ixp * dx * dp + ipp * dp * dp;
                f.values[ip * spec.nx + ix] = (-0.5 * q).exp();
            }
        }
        f.renormalize()?;
        Ok(f)
    }

    pub fn at(&self, ix: usize, ip: usize) -> f64 {
        self.values[ip * self.spec.nx + ix]
    }

    pub fn mass(&self) -> f64 {
        crate::sde::compensated_sum(self.values.iter().copied()) * self.spec.cell_area()
    }

    pub fn renormalize(&mut self) -> Result<f64> {
        let m = self.mass();
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::Mass {
                mass: m,
                tolerance: MASS_INTEGRITY_TOLERANCE,
            });
        }
        let inv = 1.0 / m;
        self.values.iter_mut().for_each(|v| *v *= inv);
        Ok(m)
    }

    /// Clamp classical negativity below the floor; Wigner fields are left as is.
    pub fn enforce_positivity(&mut self) -> usize {
        if self.kind == FieldKind::Wigner {
            return 0;
        }
        let mut n = 0;
        let mut worst = 0.0f64;
        for v in self.values.iter_mut().filter(|v| **v < NEGATIVITY_FLOOR) {
            worst = worst.min(*v);
            *v = 0.0;
            n += 1;
        }
        if n > 0 {
            log::warn!("clamped {n} negative density cells (most negative {worst:.3e})");
        }
        n
    }

    pub fn moments(&self) -> Result<GridMoments> {
        let s = &self.spec;
        let area = s.cell_area();
        let xs = s.xs();
        let (mut m0, mut mx, mut mp) = (0.0, 0.0, 0.0);
        for ip in 0..s.np {
            let p = s.p(ip);
            let row = &self.values[ip * s.nx..(ip + 1) * s.nx];
            for (w, x) in row.iter().zip(&xs) {
                m0 += w;
                mx += w * x;
                mp += w * p;
            }
        }
        let mass = m0 * area;
        if !((mass - 1.0).abs() <= MASS_INTEGRITY_TOLERANCE) {
            return Err(Error::Mass {
                mass,
                tolerance: MASS_INTEGRITY_TOLERANCE,
            });
        }
        let (mean_x, mean_p) = (mx / m0, mp / m0);
        let mut acc = [0.0f64; 7];
        for ip in 0..s.np {
            let dp = s.p(ip) - mean_p;
            let row = &self.values[ip * s.nx..(ip + 1) * s.nx];
            for (w, x) in row.iter().zip(&xs) {
                let dx = x - mean_x;
                let (wx, wp) = (w * dx, w * dp);
                acc[0] += wx * dx;
                acc[1] += wp * dp;
                acc[2] += wx * dp;
                acc[3] += wx * dx * dx;
                acc[4] += wx * dx * dp;
                acc[5] += wx * dp * dp;
                acc[6] += wp * dp * dp;
            }
        }
        let n = |a: f64| a / m0;
        Ok(GridMoments {
            mass,
            mean_x,
            mean_p,
            vx: n(acc[0]),
            vp: n(acc[1]),
            c: n(acc[2]),
            k30: n(acc[3]),
            k21: n(acc[4]),
            k12: n(acc[5]),
            k03: n(acc[6]),
        })
    }
}
