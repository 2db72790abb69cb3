//! Measurement conditioning and feedback translation of phase-space fields.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::moments::delay_steps;
use crate::params::{ensure_valid, FeedbackConfig, MeasurementParams, OscillatorParams};

use super::fpe::{advance, coefficients_for, stable_dt};
use super::{GridField, GridMoments};

fn mean_x(field: &GridField) -> f64 {
    let s = &field.spec;
    let xs = s.xs();
    let (mut m0, mut m1) = (0.0, 0.0);
    for row in field.values.chunks(s.nx) {
        for (w, x) in row.iter().zip(&xs) {
            m0 += w;
            m1 += w * x;
        }
    }
    m1 / m0
}

/// Linearized conditioning `W ← W + dW·√(2γη/ħ)·(x − ⟨x⟩)·W`, renormalized.
pub fn measurement_update(
    field: &GridField,
    dw: f64,
    mm: &MeasurementParams,
    o: &OscillatorParams,
) -> Result<GridField> {
    if !mm.has_measurement() {
        return Err(Error::NoMeasurement);
    }
    let mut next = field.clone();
    if dw == 0.0 {
        return Ok(next);
    }
    let g = mm.backaction_gain(o.hbar) * dw;
    let m = mean_x(field);
    let xs = field.spec.xs();
    next.values.par_chunks_mut(field.spec.nx).for_each(|row| {
        for (w, x) in row.iter_mut().zip(&xs) {
            *w += g * (x - m) * *w;
        }
    });
    next.enforce_positivity();
    next.renormalize()?;
    Ok(next)
}

/// Exact Bayesian conditioning on the record increment
/// `dI = m·dt + √(ħ/2γη)·dW`: multiplies by the Gaussian likelihood
/// `exp(c(x − m)dW − ½c²(x − m)²dt)`, `c = √(2γη/ħ)`, and renormalizes.
pub fn bayes_measurement_update(
    field: &mut GridField,
    m: f64,
    dw: f64,
    dt: f64,
    mm: &MeasurementParams,
    o: &OscillatorParams,
) -> Result<()> {
    if !mm.has_measurement() {
        return Err(Error::NoMeasurement);
    }
    let c = mm.backaction_gain(o.hbar);
    let xs = field.spec.xs();
    let factors: Vec<f64> = xs
        .iter()
        .map(|x| {
            let d = x - m;
            (c * d * dw - 0.5 * c * c * d * d * dt).exp()
        })
        .collect();
    let nx = field.spec.nx;
    field.values.par_chunks_mut(nx).for_each(|row| {
        for (w, f) in row.iter_mut().zip(&factors) {
            *w *= f;
        }
    });
    field.renormalize()?;
    Ok(())
}

/// Rigid shift `W(x, p) → W(x − δ, p)` by Lax–Wendroff sub-steps of at most
/// one cell; returns the mass change from the boundary.
pub fn translate_x(field: &mut GridField, delta: f64) -> f64 {
    if delta == 0.0 {
        return 0.0;
    }
    let nx = field.spec.nx;
    let h = field.spec.hx();
    let n = (delta.abs() / h).ceil().max(1.0) as usize;
    let a = delta / n as f64 / h;
    let before = field.mass();
    let mut row_buf = vec![0.0; nx];
    for _ in 0..n {
        for row in field.values.chunks_mut(nx) {
            row_buf.copy_from_slice(row);
            for i in 0..nx {
                let left = if i > 0 { row_buf[i - 1] } else { 0.0 };
                let right = if i + 1 < nx { row_buf[i + 1] } else { 0.0 };
                let w = row_buf[i];
                row[i] = w - 0.5 * a * (right - left) + 0.5 * a * a * (right - 2.0 * w + left);
            }
        }
    }
    field.mass() - before
}

/// Feedback of the record noise: shift by `k·√(ħ/2γη)·(dW − dW_τ)`
/// (`dW_τ` absent for Scheme II), renormalized.
pub fn feedback_noise_update(
    field: &GridField,
    dw: f64,
    dw_tau: Option<f64>,
    k: f64,
    mm: &MeasurementParams,
    o: &OscillatorParams,
) -> Result<GridField> {
    let mut next = field.clone();
    if k == 0.0 {
        return Ok(next);
    }
    if !mm.has_measurement() {
        return Err(Error::DivergentFeedback { k });
    }
    let delta = k * mm.noise_amplitude(o.hbar) * (dw - dw_tau.unwrap_or(0.0));
    if delta == 0.0 {
        return Ok(next);
    }
    translate_x(&mut next, delta);
    next.enforce_positivity();
    next.renormalize()?;
    Ok(next)
}

/// Mass bookkeeping of one composite step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    pub time: f64,
    /// Mass after the drift–diffusion stage, before renormalization.
    pub fpe_mass: f64,
    /// Mass change from the feedback translation, before renormalization.
    pub translation_leak: f64,
    /// Mass after the full step.
    pub mass: f64,
}

impl StepReport {
    pub fn max_deviation(&self) -> f64 {
        (self.fpe_mass - 1.0)
            .abs()
            .max(self.translation_leak.abs())
            .max((self.mass - 1.0).abs())
    }
}

/// Conditional field under continuous measurement and feedback.
///
/// Each step applies, in causal order, the feedback-free drift–diffusion
/// (with measurement back-action diffusion), Bayesian conditioning on the
/// record increment, and the rigid translation produced by feeding the
/// record back: `k[(⟨x⟩ − x*(t))dt + √(ħ/2γη)dW]` for Scheme II or
/// `k[(⟨x⟩ − ⟨x⟩_τ)dt + √(ħ/2γη)(dW − dW_τ)]` for Scheme I.
#[derive(Debug, Clone)]
pub struct ConditionalGrid {
    field: GridField,
    o: OscillatorParams,
    mm: MeasurementParams,
    fb: FeedbackConfig,
    dt: f64,
    step: usize,
    lag: Option<usize>,
    mean_history: Vec<f64>,
}

impl ConditionalGrid {
    pub fn new(
        field: GridField,
        o: OscillatorParams,
        mm: MeasurementParams,
        fb: FeedbackConfig,
        dt: f64,
    ) -> Result<Self> {
        if !mm.has_measurement() {
            return Err(Error::NoMeasurement);
        }
        ensure_valid(&o, &mm, &fb)?;
        let co = coefficients_for(&FeedbackConfig::None, &o, &mm, 0.0, None)?;
        let limit = stable_dt(&field.spec, &co);
        if dt > limit {
            return Err(Error::StepSize { dt, limit });
        }
        let lag = fb.delay().map(|tau| delay_steps(tau, dt)).transpose()?;
        let m0 = mean_x(&field);
        Ok(Self {
            field,
            o,
            mm,
            fb,
            dt,
            step: 0,
            lag,
            mean_history: vec![m0],
        })
    }

    pub fn field(&self) -> &GridField {
        &self.field
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn moments(&self) -> Result<GridMoments> {
        self.field.moments()
    }

    /// Advance by `dt` with record noise `dW` (and `dW_τ` for Scheme I).
    pub fn step(&mut self, dw: f64, dw_tau: f64) -> Result<StepReport> {
        let (o, mm, dt) = (self.o, self.mm, self.dt);
        let t = self.time();
        let m0 = *self.mean_history.last().unwrap();

        let free = coefficients_for(&FeedbackConfig::None, &o, &mm, t, None)?;
        advance(&mut self.field, t, dt, |_| Ok(free))?;
        let fpe_mass = self.field.mass();
        self.field.renormalize()?;

        bayes_measurement_update(&mut self.field, m0, dw, dt, &mm, &o)?;

        let amp = mm.noise_amplitude(o.hbar);
        let delta = match self.fb {
            FeedbackConfig::None => 0.0,
            FeedbackConfig::Scheme2 { k, reference } => {
                k * ((m0 - reference.at(t)) * dt + amp * dw)
            }
            FeedbackConfig::Scheme1 { k, .. } => {
                let lag = self.lag.unwrap_or(0);
                let delayed = if self.step >= lag {
                    self.mean_history[self.step - lag]
                } else {
                    self.mean_history[0]
                };
                k * ((m0 - delayed) * dt + amp * (dw - dw_tau))
            }
        };
        let translation_leak = translate_x(&mut self.field, delta);
        self.field.enforce_positivity();
        self.field.renormalize()?;
        self.step += 1;
        self.mean_history.push(mean_x(&self.field));
        if !self.mean_history.last().unwrap().is_finite() {
            return Err(Error::Divergence {
                time: self.time(),
                step: self.step,
            });
        }
        Ok(StepReport {
            time: self.time(),
            fpe_mass,
            translation_leak,
            mass: self.field.mass(),
        })
    }
}
