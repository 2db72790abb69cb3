//! Deterministic equations for first and second moments.
//!
//! Means obey linear (delay) ODEs; conditional covariances obey a Riccati
//! equation that is independent of the feedback gain, the delay and the
//! reference; unconditional Scheme II covariances obey a linear ODE.

mod integrate;
mod steady;

pub use integrate::{amplitude_window_max, integrate_dde, integrate_ode, steps_for, Path};
pub use steady::{conditional_steady_state, unconditional_steady_state_scheme2};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{MeasurementParams, OscillatorParams, Reference};

/// First moments `(⟨x⟩, ⟨p⟩)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Mean {
    pub x: f64,
    pub p: f64,
}

impl Mean {
    pub const fn new(x: f64, p: f64) -> Self {
        Self { x, p }
    }

    pub fn radius(&self) -> f64 {
        self.x.hypot(self.p)
    }

    pub fn scale(self, a: f64) -> Self {
        Self::new(a * self.x, a * self.p)
    }
}

impl From<[f64; 2]> for Mean {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Mean> for [f64; 2] {
    fn from(m: Mean) -> Self {
        [m.x, m.p]
    }
}

/// Second moments `(Vx, Vp, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Cov {
    pub vx: f64,
    pub vp: f64,
    pub c: f64,
}

impl Cov {
    pub const fn new(vx: f64, vp: f64, c: f64) -> Self {
        Self { vx, vp, c }
    }

    pub fn determinant(&self) -> f64 {
        self.vx * self.vp - self.c * self.c
    }

    pub fn is_positive_semidefinite(&self, tol: f64) -> bool {
        self.vx >= -tol && self.vp >= -tol && self.determinant() >= -tol
    }

    pub fn max_abs_diff(&self, other: &Cov) -> f64 {
        (self.vx - other.vx)
            .abs()
            .max((self.vp - other.vp).abs())
            .max((self.c - other.c).abs())
    }
}

impl From<[f64; 3]> for Cov {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Cov> for [f64; 3] {
    fn from(c: Cov) -> Self {
        [c.vx, c.vp, c.c]
    }
}

/// Past `(x, p)` samples on a uniform grid, for reading delayed means.
#[derive(Debug, Clone)]
pub struct MeanHistory {
    dt: f64,
    lag: usize,
    initial: Mean,
    samples: Vec<Mean>,
}

impl MeanHistory {
    /// History for delay `tau`; `initial` is the constant value for t ≤ 0.
    pub fn new(initial: Mean, tau: f64, dt: f64) -> Result<Self> {
        let lag = delay_steps(tau, dt)?;
        Ok(Self {
            dt,
            lag,
            initial,
            samples: vec![initial],
        })
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn push(&mut self, m: Mean) {
        self.samples.push(m);
    }

    pub fn current_step(&self) -> usize {
        self.samples.len() - 1
    }

    /// Value at `t_step − τ`; the constant pre-history for negative times.
    pub fn delayed(&self, step: usize) -> Result<Mean> {
        if step >= self.samples.len() {
            return Err(Error::DelayUnderflow(format!(
                "step {step} not yet recorded (have {})",
                self.samples.len()
            )));
        }
        Ok(match step.checked_sub(self.lag) {
            Some(j) => self.samples[j],
            None => self.initial,
        })
    }
}

/// Number of grid steps in a delay; errors unless `tau/dt` is a positive integer.
pub fn delay_steps(tau: f64, dt: f64) -> Result<usize> {
    if !(tau > 0.0 && dt > 0.0) {
        return Err(Error::DelayAlignment { tau, dt });
    }
    let ratio = tau / dt;
    let lag = ratio.round();
    if lag < 1.0 || (ratio - lag).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::DelayAlignment { tau, dt });
    }
    Ok(lag as usize)
}

/// Free damped rotation `(ωp − κx/2, −ωx − κp/2)`.
pub fn free_mean_rhs(m: Mean, o: &OscillatorParams) -> Mean {
    let half = 0.5 * o.drift_kappa();
    Mean::new(o.omega * m.p - half * m.x, -o.omega * m.x - half * m.p)
}

/// Averaged Scheme I means: free drift plus `k(x − x_τ)` on the position.
pub fn scheme1_mean_rhs(m: Mean, delayed_x: f64, o: &OscillatorParams, k: f64) -> Mean {
    let free = free_mean_rhs(m, o);
    Mean::new(free.x + k * (m.x - delayed_x), free.p)
}

/// Averaged Scheme II means: free drift plus `k(x − x*(t))` on the position.
pub fn scheme2_mean_rhs(
    m: Mean,
    t: f64,
    o: &OscillatorParams,
    k: f64,
    reference: &Reference,
) -> Mean {
    let free = free_mean_rhs(m, o);
    Mean::new(free.x + k * (m.x - reference.at(t)), free.p)
}

/// Limit cycle of Scheme II for `k = κ/2` and `x*(t) = −y0 cos ωt`.
pub fn scheme2_asymptote(t: f64, y0: f64, omega: f64, kappa: f64) -> Mean {
    let (s, c) = (omega * t).sin_cos();
    Mean::new(y0 * c + kappa * y0 / (2.0 * omega) * s, -y0 * s)
}

/// Coefficients shared by every covariance equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovCoefficients {
    pub omega: f64,
    /// κ with the fixed-point sign applied.
    pub drift_kappa: f64,
    /// Bath diffusion (quantum `κħ(1+2n_B)/2`, classical `κ/(βω)`).
    pub thermal: f64,
    /// Measurement back-action diffusion on p (quantum only).
    pub decoherence: f64,
    /// Localization rate `2γη/ħ` (classical `2γ/σ`), zero without measurement.
    pub riccati: f64,
}

impl CovCoefficients {
    pub fn new(o: &OscillatorParams, mm: &MeasurementParams) -> Self {
        let measured = mm.has_measurement();
        Self {
            omega: o.omega,
            drift_kappa: o.drift_kappa(),
            thermal: if mm.is_classical() {
                o.classical_thermal_diffusion()
            } else {
                o.thermal_diffusion()
            },
            decoherence: if measured {
                mm.decoherence_diffusion(o.hbar)
            } else {
                0.0
            },
            riccati: if measured {
                mm.riccati_rate(o.hbar)
            } else {
                0.0
            },
        }
    }
}

/// Conditional covariance Riccati right-hand side (Gaussian closure).
pub fn conditional_cov_rhs(cv: Cov, o: &OscillatorParams, mm: &MeasurementParams) -> Cov {
    conditional_cov_rhs_with(cv, &CovCoefficients::new(o, mm))
}

pub fn conditional_cov_rhs_with(cv: Cov, k: &CovCoefficients) -> Cov {
    let Cov { vx, vp, c } = cv;
    Cov {
        vx: -k.drift_kappa * vx + 2.0 * k.omega * c - k.riccati * vx * vx + k.thermal,
        vp: -k.drift_kappa * vp - 2.0 * k.omega * c - k.riccati * c * c + k.thermal + k.decoherence,
        c: k.omega * (vp - vx) - k.drift_kappa * c - k.riccati * vx * c,
    }
}

/// Unconditional Scheme II covariances: linear, with the feedback noise
/// diffusion `ħk²/(2γη)` on x.
pub fn unconditional_cov_rhs_scheme2(
    cv: Cov,
    o: &OscillatorParams,
    mm: &MeasurementParams,
    k: f64,
) -> Result<Cov> {
    let fb = mm.feedback_diffusion(k, o.hbar)?;
    let co = CovCoefficients::new(o, mm);
    Ok(unconditional_cov_rhs_with(cv, &co, k, fb))
}

pub(crate) fn unconditional_cov_rhs_with(
    cv: Cov,
    co: &CovCoefficients,
    k: f64,
    fb_diffusion: f64,
) -> Cov {
    let Cov { vx, vp, c } = cv;
    let kap = co.drift_kappa;
    Cov {
        vx: (2.0 * k - kap) * vx + 2.0 * co.omega * c + co.thermal + fb_diffusion,
        vp: -kap * vp - 2.0 * co.omega * c + co.thermal + co.decoherence,
        c: co.omega * (vp - vx) + (k - kap) * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::FixedPointKind;
    use approx::assert_relative_eq;

    fn o() -> OscillatorParams {
        OscillatorParams::new(1.0, 0.1)
    }

    #[test]
    fn free_mean_examples() {
        let r = free_mean_rhs(Mean::new(1.0, 0.0), &o());
        assert_relative_eq!(r.x, -0.05);
        assert_relative_eq!(r.p, -1.0);
        assert_eq!(free_mean_rhs(Mean::default(), &o()), Mean::new(0.0, 0.0));
        let unstable = o().with_fixed_point_kind(FixedPointKind::Unstable);
        let r = free_mean_rhs(Mean::new(1.0, 0.0), &unstable);
        assert_relative_eq!(r.x, 0.05);
        assert_relative_eq!(r.p, -1.0);
    }

    #[test]
    fn scheme1_examples() {
        let m = Mean::new(0.3, -0.7);
        assert_eq!(scheme1_mean_rhs(m, 0.3, &o(), 0.2), free_mean_rhs(m, &o()));
        let r = scheme1_mean_rhs(Mean::new(1.0, 0.0), -1.0, &o(), 0.2);
        assert_relative_eq!(r.x, 0.35, epsilon = 1e-15);
        assert_relative_eq!(r.p, -1.0);
    }

    #[test]
    fn scheme1_rhs_is_homogeneous() {
        let (m, xd, a) = (Mean::new(0.4, -1.3), 0.9, -2.7);
        let r = scheme1_mean_rhs(m, xd, &o(), 0.15);
        let s = scheme1_mean_rhs(m.scale(a), a * xd, &o(), 0.15);
        assert_relative_eq!(s.x, a * r.x, epsilon = 1e-14);
        assert_relative_eq!(s.p, a * r.p, epsilon = 1e-14);
    }

    #[test]
    fn scheme2_examples() {
        let o = OscillatorParams::new(1.0, 0.25);
        let reference = Reference::new(2.0, 1.0);
        let r = scheme2_mean_rhs(Mean::default(), 0.0, &o, 0.125, &reference);
        assert_relative_eq!(r.x, 0.25, epsilon = 1e-15);
        assert_eq!(r.p, 0.0);
        let r = scheme2_mean_rhs(Mean::default(), std::f64::consts::PI, &o, 0.125, &reference);
        assert_relative_eq!(r.x, -0.25, epsilon = 1e-15);
        let m = Mean::new(0.3, 0.1);
        assert_eq!(
            scheme2_mean_rhs(m, 1.3, &o, 0.0, &reference),
            free_mean_rhs(m, &o)
        );
    }

    #[test]
    fn scheme2_specialized_form() {
        // k = κ/2: (ωp + y0 κ/2 cos ωt, −ωx − κp/2)
        let o = OscillatorParams::new(1.3, 0.4);
        let reference = Reference::new(1.7, 1.3);
        for &(x, p, t) in &[(0.2, -0.4, 0.0), (1.5, 2.0, 0.7), (-3.0, 0.1, 5.5)] {
            let r = scheme2_mean_rhs(Mean::new(x, p), t, &o, 0.2, &reference);
            assert_relative_eq!(r.x, 1.3 * p + 1.7 * 0.2 * (1.3 * t).cos(), epsilon = 1e-14);
            assert_relative_eq!(r.p, -1.3 * x - 0.2 * p, epsilon = 1e-14);
        }
    }

    #[test]
    fn asymptote_examples() {
        let a = scheme2_asymptote(0.0, 2.0, 1.0, 0.25);
        assert_eq!((a.x, a.p), (2.0, 0.0));
        let a = scheme2_asymptote(std::f64::consts::FRAC_PI_2, 2.0, 1.0, 0.25);
        assert_relative_eq!(a.x, 0.25, epsilon = 1e-15);
        assert_relative_eq!(a.p, -2.0, epsilon = 1e-15);
        // κ/ω ≪ 1: radius stays within κ y0/(2ω) of y0
        for i in 0..50 {
            let a = scheme2_asymptote(i as f64 * 0.3, 2.0, 1.0, 1e-3);
            assert!((a.radius() - 2.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn asymptote_solves_the_forced_equations() {
        let o = OscillatorParams::new(1.0, 0.25);
        let reference = Reference::new(2.0, 1.0);
        let h = 1e-5;
        for i in 0..20 {
            let t = 0.37 * i as f64;
            let a = scheme2_asymptote(t, 2.0, 1.0, 0.25);
            let (ap, am) = (
                scheme2_asymptote(t + h, 2.0, 1.0, 0.25),
                scheme2_asymptote(t - h, 2.0, 1.0, 0.25),
            );
            let r = scheme2_mean_rhs(a, t, &o, 0.125, &reference);
            assert_relative_eq!((ap.x - am.x) / (2.0 * h), r.x, epsilon = 1e-8);
            assert_relative_eq!((ap.p - am.p) / (2.0 * h), r.p, epsilon = 1e-8);
        }
    }

    #[test]
    fn free_covariances_are_stationary_without_measurement() {
        for beta in [f64::INFINITY, 2.0, 0.3] {
            let o = OscillatorParams::new(1.0, 0.3).with_beta(beta);
            let v = o.free_steady_variance();
            let r = conditional_cov_rhs(Cov::new(v, v, 0.0), &o, &MeasurementParams::none());
            assert!(r.vx.abs() < 1e-15 && r.vp.abs() < 1e-15 && r.c.abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_covariance_has_no_correlation_drift() {
        let r = conditional_cov_rhs(Cov::new(0.8, 0.8, 0.0), &o(), &MeasurementParams::none());
        assert_eq!(r.c, 0.0);
    }

    #[test]
    fn unconditional_reduces_to_free() {
        let o = OscillatorParams::new(1.0, 0.25);
        let none = MeasurementParams::none();
        let cv = Cov::new(0.7, 0.4, 0.1);
        let a = unconditional_cov_rhs_scheme2(cv, &o, &none, 0.0).unwrap();
        let b = conditional_cov_rhs(cv, &o, &none);
        assert_eq!(a, b);
        assert!(matches!(
            unconditional_cov_rhs_scheme2(cv, &o, &none, 0.05),
            Err(Error::DivergentFeedback { .. })
        ));
    }

    #[test]
    fn unconditional_is_affine() {
        let o = OscillatorParams::new(1.0, 0.25);
        let mm = MeasurementParams::quantum(0.2, 1.0);
        let (c1, c2, a) = (Cov::new(0.3, 1.1, -0.2), Cov::new(2.0, 0.1, 0.4), 0.35);
        let f = |cv| unconditional_cov_rhs_scheme2(cv, &o, &mm, 0.05).unwrap();
        let f0 = f(Cov::default());
        let hom = |cv| {
            let r = f(cv);
            Cov::new(r.vx - f0.vx, r.vp - f0.vp, r.c - f0.c)
        };
        let mix = Cov::new(
            a * c1.vx + (1.0 - a) * c2.vx,
            a * c1.vp + (1.0 - a) * c2.vp,
            a * c1.c + (1.0 - a) * c2.c,
        );
        let (h1, h2, hm) = (hom(c1), hom(c2), hom(mix));
        assert_relative_eq!(hm.vx, a * h1.vx + (1.0 - a) * h2.vx, epsilon = 1e-14);
        assert_relative_eq!(hm.vp, a * h1.vp + (1.0 - a) * h2.vp, epsilon = 1e-14);
        assert_relative_eq!(hm.c, a * h1.c + (1.0 - a) * h2.c, epsilon = 1e-14);
    }

    #[test]
    fn delay_steps_requires_alignment() {
        assert_eq!(
            delay_steps(std::f64::consts::PI, std::f64::consts::PI / 256.0).unwrap(),
            256
        );
        assert!(matches!(
            delay_steps(1.0, 0.3),
            Err(Error::DelayAlignment { .. })
        ));
        assert!(delay_steps(0.0, 0.1).is_err());
    }

    #[test]
    fn history_reads() {
        let mut h = MeanHistory::new(Mean::new(1.0, 0.0), 0.2, 0.1).unwrap();
        assert_eq!(h.lag(), 2);
        assert_eq!(h.delayed(0).unwrap(), Mean::new(1.0, 0.0));
        h.push(Mean::new(2.0, 0.0));
        h.push(Mean::new(3.0, 0.0));
        assert_eq!(h.delayed(1).unwrap().x, 1.0);
        assert_eq!(h.delayed(2).unwrap().x, 1.0);
        h.push(Mean::new(4.0, 0.0));
        assert_eq!(h.delayed(3).unwrap().x, 2.0);
        assert!(matches!(h.delayed(7), Err(Error::DelayUnderflow(_))));
    }
}
