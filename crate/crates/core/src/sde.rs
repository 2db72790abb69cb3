//! Euler–Maruyama integration of conditional means under continuous
//! position measurement, with either feedback scheme.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::moments::{
    conditional_cov_rhs_with, delay_steps, free_mean_rhs, integrate_dde, integrate_ode,
    scheme1_mean_rhs, scheme2_mean_rhs, unconditional_cov_rhs_scheme2, Cov, CovCoefficients, Mean,
    Path,
};
use crate::params::{
    ensure_valid, FeedbackConfig, GaussianState, MeasurementParams, OscillatorParams, Reference,
};
use crate::rng::NoiseStream;

fn require_measurement(mm: &MeasurementParams) -> Result<()> {
    if mm.gamma == 0.0 {
        Err(Error::NoMeasurement)
    } else {
        Ok(())
    }
}

/// Record increment `dI = x_c dt + √(ħ/2γη) dW` (classical `√(σ/2γ)`).
pub fn measurement_increment(
    xc: f64,
    mm: &MeasurementParams,
    o: &OscillatorParams,
    dt: f64,
    dw: f64,
) -> Result<f64> {
    require_measurement(mm)?;
    Ok(xc * dt + mm.noise_amplitude(o.hbar) * dw)
}

/// One Itô step of the Scheme I conditional means.
#[allow(clippy::too_many_arguments)]
pub fn step_scheme1(
    m: Mean,
    cv: Cov,
    o: &OscillatorParams,
    mm: &MeasurementParams,
    k: f64,
    dw: f64,
    dw_tau: f64,
    delayed_x: f64,
    dt: f64,
) -> Result<Mean> {
    require_measurement(mm)?;
    let drift = scheme1_mean_rhs(m, delayed_x, o, k);
    let (g, amp) = (mm.backaction_gain(o.hbar), mm.noise_amplitude(o.hbar));
    let fb_noise = if k == 0.0 {
        0.0
    } else {
        k * amp * (dw - dw_tau)
    };
    Ok(Mean::new(
        m.x + drift.x * dt + fb_noise + g * cv.vx * dw,
        m.p + drift.p * dt + g * cv.c * dw,
    ))
}

/// One Itô step of the Scheme II conditional means. `FeedbackConfig::None`
/// steps the measured but uncontrolled oscillator.
#[allow(clippy::too_many_arguments)]
pub fn step_scheme2(
    m: Mean,
    cv: Cov,
    o: &OscillatorParams,
    mm: &MeasurementParams,
    fb: &FeedbackConfig,
    t: f64,
    dw: f64,
    dt: f64,
) -> Result<Mean> {
    require_measurement(mm)?;
    let (drift, k) = match fb {
        FeedbackConfig::Scheme2 { k, reference } => (scheme2_mean_rhs(m, t, o, *k, reference), *k),
        FeedbackConfig::None => (free_mean_rhs(m, o), 0.0),
        FeedbackConfig::Scheme1 { .. } => {
            return Err(Error::Parameter(
                "step_scheme2 called with a Scheme I configuration".into(),
            ))
        }
    };
    let (g, amp) = (mm.backaction_gain(o.hbar), mm.noise_amplitude(o.hbar));
    let fb_amp = if k == 0.0 { 0.0 } else { k * amp };
    Ok(Mean::new(
        m.x + drift.x * dt + (g * cv.vx + fb_amp) * dw,
        m.p + drift.p * dt + g * cv.c * dw,
    ))
}

/// Everything that defines an ensemble run.
#[derive(Debug, Clone, Serialize)]
pub struct SdeSetup {
    pub oscillator: OscillatorParams,
    pub measurement: MeasurementParams,
    pub feedback: FeedbackConfig,
    pub initial: GaussianState,
    pub t_end: f64,
    /// Fixed step; `None` selects the default grid.
    pub dt: Option<f64>,
    /// Record every `record_stride`-th step.
    pub record_stride: usize,
}

impl SdeSetup {
    pub fn new(
        oscillator: OscillatorParams,
        measurement: MeasurementParams,
        feedback: FeedbackConfig,
        initial: GaussianState,
        t_end: f64,
    ) -> Self {
        Self {
            oscillator,
            measurement,
            feedback,
            initial,
            t_end,
            dt: None,
            record_stride: 1,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn with_record_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride.max(1);
        self
    }
}

/// Default step: `min(τ/256, 2π/(2048ω))`, rounded down so `τ/dt` is an integer.
pub fn default_dt(omega: f64, tau: Option<f64>) -> f64 {
    let base = std::f64::consts::TAU / (2048.0 * omega);
    match tau {
        Some(tau) => tau / (tau / base).ceil().max(256.0),
        None => base,
    }
}

/// One conditional trajectory sampled on the record grid.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub stream_id: u64,
    pub times: Arc<[f64]>,
    pub xc: Vec<f64>,
    pub pc: Vec<f64>,
    /// Record increments accumulated between consecutive samples.
    pub d_i: Vec<f64>,
    pub covariances: Arc<[Cov]>,
}

/// A validated setup with its shared covariance path.
#[derive(Debug, Clone)]
pub struct Simulation {
    setup: SdeSetup,
    dt: f64,
    n_steps: usize,
    lag: Option<usize>,
    step_covs: Arc<[Cov]>,
    record_times: Arc<[f64]>,
    record_covs: Arc<[Cov]>,
}

impl Simulation {
    pub fn new(setup: SdeSetup) -> Result<Self> {
        require_measurement(&setup.measurement)?;
        ensure_valid(&setup.oscillator, &setup.measurement, &setup.feedback)?;
        if !(setup.t_end > 0.0 && setup.t_end.is_finite()) {
            return Err(Error::Parameter(format!(
                "t_end must be > 0, got {}",
                setup.t_end
            )));
        }
        let tau = setup.feedback.delay();
        let dt = setup
            .dt
            .unwrap_or_else(|| default_dt(setup.oscillator.omega, tau));
        let lag = tau.map(|tau| delay_steps(tau, dt)).transpose()?;
        let n_steps = (setup.t_end / dt - 1e-9).ceil() as usize;

        let co = CovCoefficients::new(&setup.oscillator, &setup.measurement);
        let g0 = setup.initial;
        let path = integrate_ode(
            |_, y: &[f64; 3]| conditional_cov_rhs_with(Cov::from(*y), &co).into(),
            [g0.v_x, g0.v_p, g0.c],
            (0.0, n_steps as f64 * dt),
            dt,
        )?;
        let step_covs: Arc<[Cov]> = path.states.iter().map(|s| Cov::from(*s)).collect();
        let stride = setup.record_stride;
        let record_times: Arc<[f64]> = (0..=n_steps)
            .step_by(stride)
            .map(|i| i as f64 * dt)
            .collect();
        let record_covs: Arc<[Cov]> = (0..=n_steps)
            .step_by(stride)
            .map(|i| step_covs[i])
            .collect();
        Ok(Self {
            setup,
            dt,
            n_steps,
            lag,
            step_covs,
            record_times,
            record_covs,
        })
    }

    pub fn setup(&self) -> &SdeSetup {
        &self.setup
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn delay_lag(&self) -> Option<usize> {
        self.lag
    }

    pub fn record_times(&self) -> &Arc<[f64]> {
        &self.record_times
    }

    /// Conditional covariances on the record grid.
    pub fn covariances(&self) -> &Arc<[Cov]> {
        &self.record_covs
    }

    /// Conditional covariances at every integration step.
    pub fn step_covariances(&self) -> &Arc<[Cov]> {
        &self.step_covs
    }

    pub fn run_trajectory(&self, seed: u64, stream_id: u64) -> Result<TrajectoryRecord> {
        self.run_with_noise(seed, stream_id, |_| {})
    }

    /// Like [`run_trajectory`](Self::run_trajectory), also reporting each
    /// step's `(dW, dW_τ)` to `observe`.
    pub fn run_with_noise<F>(
        &self,
        seed: u64,
        stream_id: u64,
        mut observe: F,
    ) -> Result<TrajectoryRecord>
    where
        F: FnMut((f64, f64)),
    {
        let s = &self.setup;
        let (o, mm, dt) = (&s.oscillator, &s.measurement, self.dt);
        let stride = s.record_stride;
        let mut noise = NoiseStream::new(seed, stream_id, dt);
        if let Some(lag) = self.lag {
            noise = noise.with_delay(lag);
        }
        let cap = self.record_times.len();
        let mut rec = TrajectoryRecord {
            seed,
            stream_id,
            times: self.record_times.clone(),
            xc: Vec::with_capacity(cap),
            pc: Vec::with_capacity(cap),
            d_i: Vec::with_capacity(cap),
            covariances: self.record_covs.clone(),
        };
        let mut m = Mean::new(s.initial.mean_x, s.initial.mean_p);
        let mut x_hist: Vec<f64> = Vec::with_capacity(if self.lag.is_some() {
            self.n_steps + 1
        } else {
            0
        });
        if self.lag.is_some() {
            x_hist.push(m.x);
        }
        rec.xc.push(m.x);
        rec.pc.push(m.p);
        rec.d_i.push(0.0);
        let amp = mm.noise_amplitude(o.hbar);
        let mut acc_i = 0.0;
        for n in 0..self.n_steps {
            let t = n as f64 * dt;
            let cv = self.step_covs[n];
            let inc = noise.next_increment();
            acc_i += m.x * dt + amp * inc.dw;
            m = match (&s.feedback, self.lag) {
                (FeedbackConfig::Scheme1 { k, .. }, Some(lag)) => {
                    let dw_tau = inc.dw_delayed.unwrap_or(0.0);
                    observe((inc.dw, dw_tau));
                    let delayed_x = if n >= lag {
                        x_hist[n - lag]
                    } else {
                        s.initial.mean_x
                    };
                    step_scheme1(m, cv, o, mm, *k, inc.dw, dw_tau, delayed_x, dt)?
                }
                (fb, _) => {
                    observe((inc.dw, 0.0));
                    step_scheme2(m, cv, o, mm, fb, t, inc.dw, dt)?
                }
            };
            if !(m.x.is_finite() && m.p.is_finite()) {
                return Err(Error::Divergence {
                    time: t + dt,
                    step: n + 1,
                });
            }
            if self.lag.is_some() {
                x_hist.push(m.x);
            }
            if (n + 1) % stride == 0 {
                rec.xc.push(m.x);
                rec.pc.push(m.p);
                rec.d_i.push(acc_i);
                acc_i = 0.0;
            }
        }
        Ok(rec)
    }

    /// Trajectories `0..n` for `seed`, run in parallel and returned in stream order.
    pub fn run_ensemble(&self, seed: u64, n: usize) -> Result<Vec<TrajectoryRecord>> {
        (0..n as u64)
            .into_par_iter()
            .map(|id| self.run_trajectory(seed, id))
            .collect()
    }

    /// Deterministic ensemble-averaged means on the step grid: the averaged
    /// delay equation for Scheme I, the linear ODE otherwise.
    pub fn averaged_means(&self) -> Result<Path<2>> {
        let s = &self.setup;
        let o = s.oscillator;
        let y0 = [s.initial.mean_x, s.initial.mean_p];
        let span = (0.0, self.n_steps as f64 * self.dt);
        match s.feedback {
            FeedbackConfig::Scheme1 { k, tau } => integrate_dde(
                |_, y: &[f64; 2], d: &[f64; 2]| {
                    scheme1_mean_rhs(Mean::from(*y), d[0], &o, k).into()
                },
                y0,
                tau,
                span,
                self.dt,
            ),
            FeedbackConfig::Scheme2 { k, reference } => integrate_ode(
                |t, y: &[f64; 2]| scheme2_mean_rhs(Mean::from(*y), t, &o, k, &reference).into(),
                y0,
                span,
                self.dt,
            ),
            FeedbackConfig::None => integrate_ode(
                |_, y: &[f64; 2]| free_mean_rhs(Mean::from(*y), &o).into(),
                y0,
                span,
                self.dt,
            ),
        }
    }

    /// Unconditional covariance path (Scheme II or no feedback).
    pub fn unconditional_covariances(&self) -> Result<Path<3>> {
        let s = &self.setup;
        let k = match s.feedback {
            FeedbackConfig::Scheme2 { k, .. } => k,
            FeedbackConfig::None => 0.0,
            FeedbackConfig::Scheme1 { .. } => {
                return Err(Error::Analysis(
                    "Scheme I has no closed unconditional covariance equation".into(),
                ))
            }
        };
        let (o, mm) = (s.oscillator, s.measurement);
        integrate_ode(
            |_, y: &[f64; 3]| {
                unconditional_cov_rhs_scheme2(Cov::from(*y), &o, &mm, k)
                    .map(Into::into)
                    .unwrap_or([f64::NAN; 3])
            },
            [s.initial.v_x, s.initial.v_p, s.initial.c],
            (0.0, self.n_steps as f64 * self.dt),
            self.dt,
        )
    }

    /// Smallest `Vx Vp − C²` along the covariance path, against `ħ²/4`.
    pub fn heisenberg(&self) -> HeisenbergReport {
        let hbar = self.setup.oscillator.hbar;
        let (idx, min_det) = self
            .step_covs
            .iter()
            .map(Cov::determinant)
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |a, (i, d)| if d < a.1 { (i, d) } else { a },
            );
        let bound = hbar * hbar / 4.0;
        HeisenbergReport {
            min_determinant: min_det,
            bound,
            time: idx as f64 * self.dt,
            satisfied: self.setup.measurement.is_classical() || min_det >= bound * (1.0 - 1e-6),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeisenbergReport {
    pub min_determinant: f64,
    pub bound: f64,
    pub time: f64,
    pub satisfied: bool,
}

/// Per-time mean, unbiased variance and standard error of the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub n: usize,
    pub times: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub mean_p: Vec<f64>,
    pub var_x: Vec<f64>,
    pub var_p: Vec<f64>,
    pub sem_x: Vec<f64>,
    pub sem_p: Vec<f64>,
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, var)
}

/// Reduce records in `stream_id` order so the result is independent of
/// completion order.
pub fn ensemble_stats(records: &[TrajectoryRecord]) -> Result<EnsembleStats> {
    if records.len() < 2 {
        return Err(Error::Shape(format!(
            "need at least 2 records, got {}",
            records.len()
        )));
    }
    let mut order: Vec<&TrajectoryRecord> = records.iter().collect();
    order.sort_by_key(|r| r.stream_id);
    let times = &order[0].times;
    for r in &order {
        if r.times.len() != times.len()
            || r.times.iter().zip(times.iter()).any(|(a, b)| a != b)
            || r.xc.len() != times.len()
            || r.pc.len() != times.len()
        {
            return Err(Error::Shape(format!(
                "record {} does not share the common time grid",
                r.stream_id
            )));
        }
    }
    let n = order.len();
    let mut stats = EnsembleStats {
        n,
        times: times.to_vec(),
        mean_x: Vec::with_capacity(times.len()),
        mean_p: Vec::with_capacity(times.len()),
        var_x: Vec::with_capacity(times.len()),
        var_p: Vec::with_capacity(times.len()),
        sem_x: Vec::with_capacity(times.len()),
        sem_p: Vec::with_capacity(times.len()),
    };
    let mut column = vec![0.0; n];
    for i in 0..times.len() {
        for (slot, r) in column.iter_mut().zip(&order) {
            *slot = r.xc[i];
        }
        let (mx, vx) = mean_var(&column);
        for (slot, r) in column.iter_mut().zip(&order) {
            *slot = r.pc[i];
        }
        let (mp, vp) = mean_var(&column);
        stats.mean_x.push(mx);
        stats.var_x.push(vx);
        stats.sem_x.push((vx / n as f64).sqrt());
        stats.mean_p.push(mp);
        stats.var_p.push(vp);
        stats.sem_p.push((vp / n as f64).sqrt());
    }
    Ok(stats)
}

/// Scheme II with gain `k` and reference `−y0 cos ωt`.
pub fn scheme2(k: f64, y0: f64, omega: f64) -> FeedbackConfig {
    FeedbackConfig::Scheme2 {
        k,
        reference: Reference::new(y0, omega),
    }
}
