use thiserror::Error;

use crate::params::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("parameter validation failed: {}", format_violations(.0))]
    Invalid(Vec<Violation>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("feedback gain k = {k} needs γη > 0; the feedback noise term diverges")]
    DivergentFeedback { k: f64 },

    #[error("measurement rate γ = 0: there is no measurement record")]
    NoMeasurement,

    #[error("state diverged at t = {time} (step {step})")]
    Divergence { time: f64, step: usize },

    #[error("delayed value requested before the history covers it: {0}")]
    DelayUnderflow(String),

    #[error("delay τ = {tau} is not an integer multiple of dt = {dt}")]
    DelayAlignment { tau: f64, dt: f64 },

    #[error("step size dt = {dt} exceeds the explicit stability bound {limit}")]
    StepSize { dt: f64, limit: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("field mass {mass} deviates from 1 by more than {tolerance}")]
    Mass { mass: f64, tolerance: f64 },

    #[error("analysis failed: {0}")]
    Analysis(String),

    #[error("growth rate does not change sign on k ∈ [{lo}, {hi}]")]
    Range { lo: f64, hi: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| format!("[{}] {}", v.code, v.message))
        .collect::<Vec<_>>()
        .join("; ")
}
