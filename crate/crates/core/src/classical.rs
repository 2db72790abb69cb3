//! Classical measurement: the free classical oscillator, the overdamped
//! Brownian particle under continuous position measurement, and its
//! error-free (Langevin) limit.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Affine, FpeCoefficients};
use crate::moments::unconditional_steady_state_scheme2;
use crate::params::{MeasurementParams, OscillatorParams};
use crate::rng::NoiseStream;
use crate::sde::compensated_sum;

/// Classical free oscillator coefficients with `Dₓₓ = Dₚₚ = κ/(βω)`.
pub fn classical_free_coefficients(o: &OscillatorParams, beta: f64) -> Result<FpeCoefficients> {
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!(
            "beta must be > 0 or inf, got {beta}"
        )));
    }
    let d = if beta.is_infinite() {
        0.0
    } else {
        o.kappa / (beta * o.omega)
    };
    let half = 0.5 * o.drift_kappa();
    Ok(FpeCoefficients {
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
        dxx: d,
        dpp: d,
        dxp: 0.0,
    })
}

/// Stationary unconditional `Vx` of the classically measured oscillator
/// under Scheme II.
pub fn classical_scheme2_stationary_vx(
    o: &OscillatorParams,
    gamma: f64,
    sigma: f64,
    k: f64,
) -> Result<f64> {
    let mm = MeasurementParams::classical(gamma, sigma);
    Ok(unconditional_steady_state_scheme2(o, &mm, k)?.vx)
}

/// `U(x) = a x² + b x + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticPotential {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl QuadraticPotential {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub fn value(&self, x: f64) -> f64 {
        (self.a * x + self.b) * x + self.c
    }

    pub fn derivative(&self, x: f64) -> f64 {
        2.0 * self.a * x + self.b
    }

    pub fn minimum(&self) -> f64 {
        -self.b / (2.0 * self.a)
    }
}

/// Overdamped particle with friction `κ/2`, measured with error scale `σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverdampedParams {
    pub kappa: f64,
    pub temperature: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub potential: QuadraticPotential,
}

impl OverdampedParams {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            bad.push(format!("kappa must be > 0, got {}", self.kappa));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            bad.push(format!("T must be ≥ 0, got {}", self.temperature));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            bad.push(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            bad.push(format!("gamma must be > 0, got {}", self.gamma));
        }
        if !(self.potential.a > 0.0) {
            bad.push(format!(
                "potential must be confining (a > 0), got a = {}",
                self.potential.a
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(bad.join("; ")))
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    /// Measurement gain `√(2γ/σ)`.
    pub fn gain(&self) -> f64 {
        (2.0 * self.gamma / self.sigma).sqrt()
    }

    /// Stationary position variance of the unmeasured particle, `T/(2a)`.
    pub fn equilibrium_variance(&self) -> f64 {
        self.temperature / (2.0 * self.potential.a)
    }
}

/// How `⟨xU′⟩ − ⟨x⟩⟨U′⟩` is closed in the conditional variance equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceClosure {
    /// `dV/dt = 4T/κ − (4a/κ)V − (2γ/σ)V²`, whose steady state is
    /// `(aσ/γκ)(√(1 + 2Tγκ/(a²σ)) − 1)`.
    #[default]
    Published,
    /// `dV/dt = 4T/κ − (8a/κ)V − (2γ/σ)V²`, the exact Gaussian moment of the
    /// Fokker–Planck operator since `⟨xU′⟩ − ⟨x⟩⟨U′⟩ = 2aV`.
    FpeConsistent,
}

impl VarianceClosure {
    fn relaxation(&self) -> f64 {
        match self {
            VarianceClosure::Published => 4.0,
            VarianceClosure::FpeConsistent => 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionalGaussian1D {
    pub mean: f64,
    pub variance: f64,
}

/// Right-hand side of the closed conditional variance equation.
pub fn conditional_variance_rhs(v: f64, op: &OverdampedParams, closure: VarianceClosure) -> f64 {
    4.0 * op.temperature / op.kappa
        - closure.relaxation() * op.potential.a / op.kappa * v
        - 2.0 * op.gamma / op.sigma * v * v
}

/// Positive root of the closed variance equation.
pub fn steady_conditional_variance(op: &OverdampedParams, closure: VarianceClosure) -> f64 {
    let q = 2.0 * op.gamma / op.sigma;
    let l = closure.relaxation() * op.potential.a / op.kappa;
    let s = 4.0 * op.temperature / op.kappa;
    // (−l + √(l² + 4qs)) / 2q, written to avoid cancellation
    2.0 * s / (l + (l * l + 4.0 * q * s).sqrt())
}

/// One Euler–Maruyama step of the closed conditional state:
/// `dm = −(2/κ)U′(m)dt + √(2γ/σ)V dW`, `dV = rhs(V) dt`.
pub fn overdamped_conditional_step(
    state: ConditionalGaussian1D,
    dw: f64,
    op: &OverdampedParams,
    dt: f64,
    closure: VarianceClosure,
) -> Result<ConditionalGaussian1D> {
    if !(op.sigma > 0.0) {
        return Err(Error::Parameter(format!(
            "sigma must be > 0, got {}",
            op.sigma
        )));
    }
    let mean = state.mean - 2.0 / op.kappa * op.potential.derivative(state.mean) * dt
        + op.gain() * state.variance * dw;
    let variance = state.variance + conditional_variance_rhs(state.variance, op, closure) * dt;
    if !(variance > 0.0) {
        return Err(Error::Divergence {
            time: f64::NAN,
            step: 0,
        });
    }
    Ok(ConditionalGaussian1D { mean, variance })
}

/// `x′ = x − (2/κ)U′(x)dt + √(4T/κ)dW`.
pub fn langevin_step(x: f64, op: &OverdampedParams, dw: f64, dt: f64) -> f64 {
    x - 2.0 / op.kappa * op.potential.derivative(x) * dt
        + (4.0 * op.temperature / op.kappa).sqrt() * dw
}

/// Conditional density of the overdamped particle on a uniform 1D grid:
/// the full Fokker–Planck operator plus exact Bayesian conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    pub x_min: f64,
    pub h: f64,
    pub values: Vec<f64>,
}

impl Grid1D {
    pub fn gaussian(n: usize, half: f64, mean: f64, variance: f64) -> Self {
        let h = 2.0 * half / n as f64;
        let x_min = -half;
        let values = (0..n)
            .map(|i| {
                let x = x_min + (i as f64 + 0.5) * h;
                (-(x - mean).powi(2) / (2.0 * variance)).exp()
            })
            .collect();
        let mut g = Self { x_min, h, values };
        g.renormalize();
        g
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.h
    }

    fn renormalize(&mut self) {
        let m = self.values.iter().sum::<f64>() * self.h;
        self.values.iter_mut().for_each(|v| *v /= m);
    }

    pub fn mean_variance(&self) -> (f64, f64) {
        let m0: f64 = self.values.iter().sum();
        let m1: f64 = self
            .values
            .iter()
            .enumerate()
            .map(|(i, w)| w * self.x(i))
            .sum::<f64>()
            / m0;
        let v = self
            .values
            .iter()
            .enumerate()
            .map(|(i, w)| w * (self.x(i) - m1).powi(2))
            .sum::<f64>()
            / m0;
        (m1, v)
    }

    /// Largest stable step for the explicit operator.
    pub fn stable_dt(&self, op: &OverdampedParams) -> f64 {
        let n = self.values.len();
        let drift = (0..n)
            .map(|i| (2.0 / op.kappa * op.potential.derivative(self.x(i))).abs())
            .fold(0.0, f64::max);
        let d = 2.0 * op.temperature / op.kappa;
        let adv = if drift > 0.0 {
            self.h / drift
        } else {
            f64::INFINITY
        };
        let dif = if d > 0.0 {
            self.h * self.h / (2.0 * d)
        } else {
            f64::INFINITY
        };
        0.4 * adv.min(dif)
    }

    fn operator(&self, op: &OverdampedParams, w: &[f64], out: &mut [f64]) {
        let n = w.len();
        let d = 2.0 * op.temperature / op.kappa;
        let drift = |i: usize| -2.0 / op.kappa * op.potential.derivative(self.x(i));
        let mut f_left = 0.0;
        for i in 0..n {
            let f_right = if i + 1 < n {
                0.5 * (drift(i) * w[i] + drift(i + 1) * w[i + 1]) - d * (w[i + 1] - w[i]) / self.h
            } else {
                0.0
            };
            out[i] = -(f_right - f_left) / self.h;
            f_left = f_right;
        }
    }

    /// Drift–diffusion step (SSP-RK3) followed by conditioning on
    /// `dI = ⟨x⟩dt + √(σ/2γ)dW`.
    pub fn step(&mut self, dw: f64, op: &OverdampedParams, dt: f64) -> Result<()> {
        let limit = self.stable_dt(op);
        if dt > limit {
            return Err(Error::StepSize { dt, limit });
        }
        let (m, _) = self.mean_variance();
        let n = self.values.len();
        let mut l = vec![0.0; n];
        let u0 = self.values.clone();
        self.operator(op, &u0, &mut l);
        let u1: Vec<f64> = u0.iter().zip(&l).map(|(u, l)| u + dt * l).collect();
        self.operator(op, &u1, &mut l);
        let u2: Vec<f64> = (0..n)
            .map(|i| 0.75 * u0[i] + 0.25 * (u1[i] + dt * l[i]))
            .collect();
        self.operator(op, &u2, &mut l);
        for i in 0..n {
            self.values[i] = u0[i] / 3.0 + 2.0 / 3.0 * (u2[i] + dt * l[i]);
        }
        let c = op.gain();
        for i in 0..n {
            let d = self.x(i) - m;
            self.values[i] *= (c * d * dw - 0.5 * c * c * d * d * dt).exp();
        }
        self.renormalize();
        Ok(())
    }
}

/// Stationary statistics of the conditional mean for one error scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmaReport {
    pub sigma: f64,
    pub steady_vc: f64,
    pub var_mc: f64,
    pub sem_var_mc: f64,
    /// `Var(m_c) + V_c`.
    pub total: f64,
    /// `|total − T/(2a)|` in standard errors.
    pub total_z: f64,
    /// `|Var(m_c) − Var(x*)|`.
    pub variance_distance: f64,
    pub autocorr_time_mc: f64,
    pub autocorr_time_langevin: f64,
    pub autocorr_mismatch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub target_variance: f64,
    pub langevin_variance: f64,
    pub langevin_sem: f64,
    pub closure: VarianceClosure,
    pub per_sigma: Vec<SigmaReport>,
}

/// Sampling plan for stationary ensembles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingPlan {
    pub n_traj: usize,
    pub dt: f64,
    pub burn_in: f64,
    pub spacing: f64,
    pub samples_per_traj: usize,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            n_traj: 400,
            dt: 1e-3,
            burn_in: 5.0,
            spacing: 2.5,
            samples_per_traj: 40,
            seed: 2024,
        }
    }
}

struct Samples {
    values: Vec<f64>,
    /// Lag-`spacing/10` autocorrelation pairs for the correlation time.
    lag_pairs: Vec<(f64, f64)>,
}

fn sample_process<F>(plan: &SamplingPlan, stream_offset: u64, x0: f64, step: F) -> Samples
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    let burn = (plan.burn_in / plan.dt).round() as usize;
    let gap = (plan.spacing / plan.dt).round() as usize;
    let lag = (gap / 10).max(1);
    let per: Vec<(Vec<f64>, Vec<(f64, f64)>)> = (0..plan.n_traj as u64)
        .into_par_iter()
        .map(|id| {
            let mut noise = NoiseStream::new(plan.seed, stream_offset + id, plan.dt);
            let mut x = x0;
            for _ in 0..burn {
                x = step(x, noise.next_increment().dw);
            }
            let mut vals = Vec::with_capacity(plan.samples_per_traj);
            let mut pairs = Vec::with_capacity(plan.samples_per_traj);
            for _ in 0..plan.samples_per_traj {
                let start = x;
                for j in 0..gap {
                    x = step(x, noise.next_increment().dw);
                    if j + 1 == lag {
                        pairs.push((start, x));
                    }
                }
                vals.push(x);
            }
            (vals, pairs)
        })
        .collect();
    let mut values = Vec::with_capacity(plan.n_traj * plan.samples_per_traj);
    let mut lag_pairs = Vec::with_capacity(values.capacity());
    for (v, p) in per {
        values.extend(v);
        lag_pairs.extend(p);
    }
    Samples { values, lag_pairs }
}

fn variance_with_sem(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    let var = compensated_sum(values.iter().map(|v| (v - mean).powi(2))) / (n - 1.0);
    let m4 = compensated_sum(values.iter().map(|v| (v - mean).powi(4))) / n;
    let sem = ((m4 - var * var * (n - 3.0) / (n - 1.0)) / n)
        .max(0.0)
        .sqrt();
    (mean, var, sem)
}

/// `e`-folding time from the lag correlation, assuming exponential decay.
fn correlation_time(pairs: &[(f64, f64)], lag_time: f64) -> f64 {
    let n = pairs.len() as f64;
    let (ma, mb) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let cov = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>();
    let va = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>();
    let vb = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>();
    let rho = cov / (va * vb).sqrt();
    if rho > 0.0 && rho < 1.0 {
        -lag_time / rho.ln()
    } else {
        f64::NAN
    }
}

/// Compare the stationary conditional mean under measurement with error
/// scale `σ` against the Langevin particle, for each `σ` in turn.
pub fn error_free_equivalence(
    op: &OverdampedParams,
    sigmas: &[f64],
    plan: &SamplingPlan,
    closure: VarianceClosure,
) -> Result<EquivalenceReport> {
    op.validate()?;
    if plan.n_traj < 2 || plan.samples_per_traj == 0 {
        return Err(Error::Parameter(
            "sampling plan needs ≥ 2 trajectories and ≥ 1 sample each".into(),
        ));
    }
    let target = op.equilibrium_variance();
    let x0 = op.potential.minimum();
    let lag_time = ((plan.spacing / plan.dt).round() as usize / 10).max(1) as f64 * plan.dt;

    let lang = sample_process(plan, 0, x0, |x, dw| langevin_step(x, op, dw, plan.dt));
    let (_, lang_var, lang_sem) = variance_with_sem(&lang.values);
    let lang_tau = correlation_time(&lang.lag_pairs, lag_time);

    let mut per_sigma = Vec::with_capacity(sigmas.len());
    for (i, &sigma) in sigmas.iter().enumerate() {
        let ops = op.with_sigma(sigma);
        ops.validate()?;
        let vc = steady_conditional_variance(&ops, closure);
        let noise = ops.gain() * vc;
        let offset = (i as u64 + 1) * plan.n_traj as u64;
        let s = sample_process(plan, offset, x0, |m, dw| {
            m - 2.0 / ops.kappa * ops.potential.derivative(m) * plan.dt + noise * dw
        });
        let (_, var_mc, sem) = variance_with_sem(&s.values);
        let tau = correlation_time(&s.lag_pairs, lag_time);
        let total = var_mc + vc;
        per_sigma.push(SigmaReport {
            sigma,
            steady_vc: vc,
            var_mc,
            sem_var_mc: sem,
            total,
            total_z: (total - target).abs() / sem,
            variance_distance: (var_mc - lang_var).abs(),
            autocorr_time_mc: tau,
            autocorr_time_langevin: lang_tau,
            autocorr_mismatch: (tau - lang_tau).abs(),
        });
    }
    Ok(EquivalenceReport {
        target_variance: target,
        langevin_variance: lang_var,
        langevin_sem: lang_sem,
        closure,
        per_sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn op() -> OverdampedParams {
        OverdampedParams {
            kappa: 1.0,
            temperature: 1.0,
            sigma: 1.0,
            gamma: 1.0,
            potential: QuadraticPotential::new(0.5, 0.0, 0.0),
        }
    }

    #[test]
    fn free_coefficients() {
        let o = OscillatorParams::new(1.0, 0.1);
        let co = classical_free_coefficients(&o, 1.0).unwrap();
        assert_relative_eq!(co.dxx, 0.1);
        assert_relative_eq!(co.dpp, 0.1);
        let rot = classical_free_coefficients(&OscillatorParams::new(1.0, 0.0), 1.0).unwrap();
        assert_eq!(
            (rot.dxx, rot.dpp, rot.dx.cx, rot.dp.cp),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(
            classical_free_coefficients(&o, f64::INFINITY).unwrap().dxx,
            0.0
        );
        assert!(classical_free_coefficients(&o, 0.0).is_err());
    }

    #[test]
    fn published_steady_state() {
        assert_relative_eq!(
            steady_conditional_variance(&op(), VarianceClosure::Published),
            1.0,
            epsilon = 1e-15
        );
        for (sigma, t, gamma, a, kappa) in [
            (0.3, 2.0, 0.7, 0.8, 1.5),
            (0.01, 1.0, 1.0, 0.5, 1.0),
            (5.0, 0.2, 3.0, 2.0, 0.4),
        ] {
            let p = OverdampedParams {
                kappa,
                temperature: t,
                sigma,
                gamma,
                potential: QuadraticPotential::new(a, 0.3, 0.0),
            };
            let closed = a * sigma / (gamma * kappa)
                * ((1.0 + 2.0 * t * gamma * kappa / (a * a * sigma)).sqrt() - 1.0);
            let v = steady_conditional_variance(&p, VarianceClosure::Published);
            assert_relative_eq!(v, closed, max_relative = 1e-12);
            assert!(conditional_variance_rhs(v, &p, VarianceClosure::Published).abs() < 1e-12);
        }
        assert_relative_eq!(
            steady_conditional_variance(&op().with_sigma(0.01), VarianceClosure::Published),
            0.005 * (801f64.sqrt() - 1.0),
            epsilon = 1e-14
        );
    }

    #[test]
    fn fpe_consistent_steady_state() {
        assert_relative_eq!(
            steady_conditional_variance(&op(), VarianceClosure::FpeConsistent),
            3f64.sqrt() - 1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn steady_variance_monotonicity() {
        for closure in [VarianceClosure::Published, VarianceClosure::FpeConsistent] {
            let v = |f: &dyn Fn(&mut OverdampedParams)| {
                let mut p = op();
                f(&mut p);
                steady_conditional_variance(&p, closure)
            };
            let base = v(&|_| {});
            assert!(v(&|p| p.sigma = 2.0) > base);
            assert!(v(&|p| p.temperature = 2.0) > base);
            assert!(v(&|p| p.gamma = 2.0) < base);
        }
    }

    #[test]
    fn pure_diffusion_step() {
        let p = OverdampedParams {
            potential: QuadraticPotential::new(1e-12, 0.0, 0.0),
            ..op()
        };
        let s = ConditionalGaussian1D {
            mean: 0.0,
            variance: 0.5,
        };
        let n = overdamped_conditional_step(s, 0.0, &p, 0.01, VarianceClosure::Published).unwrap();
        assert_relative_eq!((n.variance - 0.5) / 0.01, 4.0 - 2.0 * 0.25, epsilon = 1e-9);
        assert!(overdamped_conditional_step(
            s,
            0.0,
            &p.with_sigma(0.0),
            0.01,
            VarianceClosure::Published
        )
        .is_err());
    }

    #[test]
    fn langevin_relaxation() {
        let p = OverdampedParams {
            temperature: 0.0,
            ..op()
        };
        let dt = 1e-4;
        let mut x = 1.0;
        for _ in 0..10_000 {
            x = langevin_step(x, &p, 0.0, dt);
        }
        assert_relative_eq!(x, (-2.0f64).exp(), max_relative = 1e-3);
    }

    #[test]
    fn grid_oracle_matches_consistent_closure() {
        let p = op();
        let mut g = Grid1D::gaussian(240, 6.0, 0.0, 1.0);
        let dt = g.stable_dt(&p);
        let n = (8.0 / dt).ceil() as usize;
        for _ in 0..n {
            g.step(0.0, &p, dt).unwrap();
        }
        let (_, v) = g.mean_variance();
        assert_relative_eq!(
            v,
            steady_conditional_variance(&p, VarianceClosure::FpeConsistent),
            max_relative = 1e-3
        );
        assert!((v - steady_conditional_variance(&p, VarianceClosure::Published)).abs() > 0.2);
    }

    #[test]
    fn scheme2_feedback_raises_vx() {
        let o = OscillatorParams::new(1.0, 0.5);
        let base = classical_scheme2_stationary_vx(&o, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(base, 0.0);
        let a = classical_scheme2_stationary_vx(&o, 1.0, 1.0, 0.05).unwrap();
        let b = classical_scheme2_stationary_vx(&o, 1.0, 1.0, 0.1).unwrap();
        assert!(a > 0.0 && b > 3.0 * a);
    }

    #[test]
    fn consistent_closure_satisfies_total_variance() {
        let plan = SamplingPlan {
            n_traj: 100,
            samples_per_traj: 20,
            ..SamplingPlan::default()
        };
        let r =
            error_free_equivalence(&op(), &[1.0], &plan, VarianceClosure::FpeConsistent).unwrap();
        let s = r.per_sigma[0];
        assert!(s.total_z < 4.0, "{s:?}");
    }
}
