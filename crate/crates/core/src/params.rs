//! Physical parameters of the monitored oscillator, its detector and the
//! feedback loop.
//!
//! All quantities live in the rescaled canonical units where the Hamiltonian
//! reads `ω (p² + x²) / 2`. Every type here is an immutable value object.

use std::fmt;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Whether the bath pulls the oscillator towards or away from the origin.
///
/// `Unstable` flips the sign of κ in drift terms only; diffusion keeps |κ|.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedPointKind {
    #[default]
    Stable,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OscillatorParams {
    pub omega: f64,
    pub kappa: f64,
    pub hbar: f64,
    /// Inverse temperature; `f64::INFINITY` is the zero-temperature bath.
    #[serde(serialize_with = "serialize_extended_f64")]
    pub beta: f64,
    pub fixed_point_kind: FixedPointKind,
}

impl OscillatorParams {
    /// Zero-temperature oscillator with ħ = 1.
    pub fn new(omega: f64, kappa: f64) -> Self {
        Self {
            omega,
            kappa,
            hbar: 1.0,
            beta: f64::INFINITY,
            fixed_point_kind: FixedPointKind::Stable,
        }
    }

    pub fn with_hbar(mut self, hbar: f64) -> Self {
        self.hbar = hbar;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_fixed_point_kind(mut self, kind: FixedPointKind) -> Self {
        self.fixed_point_kind = kind;
        self
    }

    /// Bose–Einstein occupation of the bath mode.
    pub fn n_bose(&self) -> f64 {
        bose_einstein(self.beta, self.hbar, self.omega).unwrap_or(f64::NAN)
    }

    /// κ as it enters mean-drift terms (negated for an unstable fixed point).
    pub fn drift_kappa(&self) -> f64 {
        match self.fixed_point_kind {
            FixedPointKind::Stable => self.kappa,
            FixedPointKind::Unstable => -self.kappa,
        }
    }

    /// Bath diffusion `κħ(1 + 2n_B)/2` of the quantum phase-space equation.
    pub fn thermal_diffusion(&self) -> f64 {
        self.kappa * self.hbar * (1.0 + 2.0 * self.n_bose()) / 2.0
    }

    /// Bath diffusion of the classical (ħ → 0) equation, `κ/(βω)`.
    pub fn classical_thermal_diffusion(&self) -> f64 {
        if self.beta.is_infinite() {
            0.0
        } else {
            self.kappa / (self.beta * self.omega)
        }
    }

    /// Covariances `Vx = Vp = ħ(n_B + ½)` of the bath equilibrium.
    pub fn free_steady_variance(&self) -> f64 {
        self.hbar * (self.n_bose() + 0.5)
    }
}

impl Default for OscillatorParams {
    fn default() -> Self {
        Self::new(1.0, 0.1)
    }
}

/// `1 / (exp(βħω) − 1)`, with `β = +∞` mapped to exactly zero.
pub fn bose_einstein(beta: f64, hbar: f64, omega: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("beta must be > 0, got {beta}")));
    }
    if !(hbar > 0.0 && hbar.is_finite()) {
        return Err(Error::Parameter(format!("hbar must be > 0, got {hbar}")));
    }
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::Parameter(format!("omega must be > 0, got {omega}")));
    }
    if beta.is_infinite() {
        return Ok(0.0);
    }
    Ok(1.0 / (beta * hbar * omega).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasurementMode {
    Quantum,
    Classical,
}

/// Continuous position measurement.
///
/// In classical mode the detector efficiency is not a free parameter: it is
/// `ħ/σ`, so that `ħ/(γη)` becomes `σ/γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeasurementParams {
    pub gamma: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    eta: f64,
    pub mode: MeasurementMode,
    #[serde(serialize_with = "serialize_extended_f64")]
    sigma: f64,
}

/// Below this signal-noise amplitude a classical detector counts as error free.
pub const ERROR_FREE_AMPLITUDE: f64 = 1e-6;

impl MeasurementParams {
    pub fn quantum(gamma: f64, eta: f64) -> Self {
        Self {
            gamma,
            eta,
            mode: MeasurementMode::Quantum,
            sigma: f64::NAN,
        }
    }

    pub fn classical(gamma: f64, sigma: f64) -> Self {
        Self {
            gamma,
            eta: f64::NAN,
            mode: MeasurementMode::Classical,
            sigma,
        }
    }

    /// No measurement at all (γ = 0).
    pub fn none() -> Self {
        Self::quantum(0.0, 1.0)
    }

    /// Map quantum detector settings onto the classical model with error scale σ.
    pub fn to_classical(&self, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
        }
        Ok(Self::classical(self.gamma, sigma))
    }

    pub fn is_classical(&self) -> bool {
        self.mode == MeasurementMode::Classical
    }

    /// Detector efficiency; `ħ/σ` in classical mode.
    pub fn eta(&self, hbar: f64) -> f64 {
        match self.mode {
            MeasurementMode::Quantum => self.eta,
            MeasurementMode::Classical => hbar / self.sigma,
        }
    }

    pub fn sigma(&self) -> Option<f64> {
        self.is_classical().then_some(self.sigma)
    }

    /// Spectral density of the measurement noise: `ħ/(2γη)` or `σ/(2γ)`.
    pub fn noise_variance(&self, hbar: f64) -> f64 {
        match self.mode {
            MeasurementMode::Quantum => hbar / (2.0 * self.gamma * self.eta),
            MeasurementMode::Classical => self.sigma / (2.0 * self.gamma),
        }
    }

    /// Amplitude multiplying dW in the record dI.
    pub fn noise_amplitude(&self, hbar: f64) -> f64 {
        self.noise_variance(hbar).sqrt()
    }

    /// Back-action gain `√(2γη/ħ)` (classical `√(2γ/σ)`) on conditional means.
    pub fn backaction_gain(&self, hbar: f64) -> f64 {
        self.riccati_rate(hbar).sqrt()
    }

    /// Rate of the quadratic localization term, `2γη/ħ` (classical `2γ/σ`).
    pub fn riccati_rate(&self, hbar: f64) -> f64 {
        match self.mode {
            MeasurementMode::Quantum => 2.0 * self.gamma * self.eta / hbar,
            MeasurementMode::Classical => 2.0 * self.gamma / self.sigma,
        }
    }

    /// Momentum diffusion `ħγ/2` from measurement back-action; absent classically.
    pub fn decoherence_diffusion(&self, hbar: f64) -> f64 {
        match self.mode {
            MeasurementMode::Quantum => hbar * self.gamma / 2.0,
            MeasurementMode::Classical => 0.0,
        }
    }

    /// Position diffusion injected by feeding the noisy record back with gain
    /// `k`: `ħk²/(2γη)` or `k²σ/(2γ)`.
    pub fn feedback_diffusion(&self, k: f64, hbar: f64) -> Result<f64> {
        if k == 0.0 {
            return Ok(0.0);
        }
        if !self.has_measurement() {
            return Err(Error::DivergentFeedback { k });
        }
        Ok(k * k * self.noise_variance(hbar))
    }

    pub fn has_measurement(&self) -> bool {
        self.gamma > 0.0
            && match self.mode {
                MeasurementMode::Quantum => self.eta > 0.0,
                MeasurementMode::Classical => self.sigma.is_finite(),
            }
    }

    pub fn is_error_free_limit(&self) -> bool {
        self.is_classical() && self.gamma > 0.0 && self.noise_amplitude(1.0) < ERROR_FREE_AMPLITUDE
    }
}

impl Default for MeasurementParams {
    fn default() -> Self {
        Self::quantum(0.2, 1.0)
    }
}

/// Predetermined reference `x*(t) = −y0 cos(Ω t + φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reference {
    pub y0: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Reference {
    pub fn new(y0: f64, frequency: f64) -> Self {
        Self {
            y0,
            frequency,
            phase: 0.0,
        }
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }

    pub fn at(&self, t: f64) -> f64 {
        -self.y0 * (self.frequency * t + self.phase).cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum FeedbackConfig {
    None,
    /// Feed back `k·[I(t) − I(t − τ)]`.
    Scheme1 {
        k: f64,
        tau: f64,
    },
    /// Feed back `k·[I(t) − x*(t)]`.
    Scheme2 {
        k: f64,
        reference: Reference,
    },
}

impl FeedbackConfig {
    pub fn gain(&self) -> f64 {
        match *self {
            FeedbackConfig::None => 0.0,
            FeedbackConfig::Scheme1 { k, .. } | FeedbackConfig::Scheme2 { k, .. } => k,
        }
    }

    pub fn delay(&self) -> Option<f64> {
        match *self {
            FeedbackConfig::Scheme1 { tau, .. } => Some(tau),
            _ => None,
        }
    }
}

/// First and second moments of a Gaussian phase-space distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianState {
    pub mean_x: f64,
    pub mean_p: f64,
    pub v_x: f64,
    pub v_p: f64,
    pub c: f64,
}

impl GaussianState {
    /// Minimum-uncertainty packet centred at `(x, p)`.
    pub fn coherent(x: f64, p: f64, hbar: f64) -> Self {
        Self {
            mean_x: x,
            mean_p: p,
            v_x: hbar / 2.0,
            v_p: hbar / 2.0,
            c: 0.0,
        }
    }

    pub fn thermal(o: &OscillatorParams, x: f64, p: f64) -> Self {
        let v = o.free_steady_variance();
        Self {
            mean_x: x,
            mean_p: p,
            v_x: v,
            v_p: v,
            c: 0.0,
        }
    }

    pub fn determinant(&self) -> f64 {
        self.v_x * self.v_p - self.c * self.c
    }

    pub fn is_positive_semidefinite(&self, tol: f64) -> bool {
        self.v_x >= -tol && self.v_p >= -tol && self.determinant() >= -tol
    }

    /// `Vx·Vp − C² ≥ ħ²/4 − tol`.
    pub fn satisfies_uncertainty(&self, hbar: f64, tol: f64) -> bool {
        self.determinant() >= hbar * hbar / 4.0 - tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    OmegaRange,
    KappaRange,
    HbarRange,
    BetaRange,
    GammaRange,
    EfficiencyRange,
    SigmaRange,
    GainRange,
    DelayRange,
    ReferenceRange,
    FeedbackRequiresMeasurement,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::OmegaRange => "omega-range",
            ViolationCode::KappaRange => "kappa-range",
            ViolationCode::HbarRange => "hbar-range",
            ViolationCode::BetaRange => "beta-range",
            ViolationCode::GammaRange => "gamma-range",
            ViolationCode::EfficiencyRange => "efficiency-range",
            ViolationCode::SigmaRange => "sigma-range",
            ViolationCode::GainRange => "gain-range",
            ViolationCode::DelayRange => "delay-range",
            ViolationCode::ReferenceRange => "reference-range",
            ViolationCode::FeedbackRequiresMeasurement => "feedback-requires-measurement",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

impl Violation {
    fn new(code: ViolationCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

/// Check every parameter invariant; returns all violations, not just the first.
pub fn validate(
    o: &OscillatorParams,
    m: &MeasurementParams,
    fb: &FeedbackConfig,
) -> std::result::Result<(), Vec<Violation>> {
    use ViolationCode::*;
    let mut out = Vec::new();

    if !(o.omega > 0.0 && o.omega.is_finite()) {
        out.push(Violation::new(
            OmegaRange,
            format!("omega must be > 0, got {}", o.omega),
        ));
    }
    if !(o.kappa >= 0.0 && o.kappa.is_finite()) {
        out.push(Violation::new(
            KappaRange,
            format!("kappa must be ≥ 0, got {}", o.kappa),
        ));
    }
    if !(o.hbar > 0.0 && o.hbar.is_finite()) {
        out.push(Violation::new(
            HbarRange,
            format!("hbar must be > 0, got {}", o.hbar),
        ));
    }
    if !(o.beta > 0.0) {
        out.push(Violation::new(
            BetaRange,
            format!("beta must be > 0 or inf, got {}", o.beta),
        ));
    }
    if !(m.gamma >= 0.0 && m.gamma.is_finite()) {
        out.push(Violation::new(
            GammaRange,
            format!("gamma must be ≥ 0, got {}", m.gamma),
        ));
    }
    match m.mode {
        MeasurementMode::Quantum => {
            if !(m.eta > 0.0 && m.eta <= 1.0) {
                out.push(Violation::new(
                    EfficiencyRange,
                    format!("eta must lie in (0, 1], got {}", m.eta),
                ));
            }
        }
        MeasurementMode::Classical => {
            if !(m.sigma > 0.0 && m.sigma.is_finite()) {
                out.push(Violation::new(
                    SigmaRange,
                    format!("sigma must be > 0, got {}", m.sigma),
                ));
            }
        }
    }

    match *fb {
        FeedbackConfig::None => {}
        FeedbackConfig::Scheme1 { k, tau } => {
            if !k.is_finite() {
                out.push(Violation::new(
                    GainRange,
                    format!("k must be finite, got {k}"),
                ));
            }
            if !(tau > 0.0 && tau.is_finite()) {
                out.push(Violation::new(
                    DelayRange,
                    format!("tau must be > 0, got {tau}"),
                ));
            }
        }
        FeedbackConfig::Scheme2 { k, reference } => {
            if !k.is_finite() {
                out.push(Violation::new(
                    GainRange,
                    format!("k must be finite, got {k}"),
                ));
            }
            if !(reference.y0.is_finite()
                && reference.frequency.is_finite()
                && reference.phase.is_finite())
            {
                out.push(Violation::new(
                    ReferenceRange,
                    "reference waveform must be finite",
                ));
            }
        }
    }
    if fb.gain() != 0.0 && m.gamma == 0.0 {
        out.push(Violation::new(
            FeedbackRequiresMeasurement,
            "feedback with γ = 0 feeds back an infinitely noisy signal (term ∝ 1/γη diverges)",
        ));
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// [`validate`] as a `Result` carrying [`Error::Invalid`].
pub fn ensure_valid(
    o: &OscillatorParams,
    m: &MeasurementParams,
    fb: &FeedbackConfig,
) -> Result<()> {
    validate(o, m, fb).map_err(Error::Invalid)
}

/// Serialize non-finite floats as strings so JSON echoes stay lossless.
pub(crate) fn serialize_extended_f64<S: Serializer>(
    v: &f64,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bose_einstein_reference_values() {
        assert_eq!(bose_einstein(f64::INFINITY, 1.0, 1.0).unwrap(), 0.0);
        assert_relative_eq!(
            bose_einstein(2f64.ln(), 1.0, 1.0).unwrap(),
            1.0,
            epsilon = 1e-14
        );
        // 1/(e − 1)
        assert_relative_eq!(
            bose_einstein(1.0, 1.0, 1.0).unwrap(),
            0.581_976_706_869_326_4,
            epsilon = 1e-15
        );
        assert_eq!(bose_einstein(1e6, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn bose_einstein_rejects_bad_input() {
        assert!(bose_einstein(0.0, 1.0, 1.0).is_err());
        assert!(bose_einstein(1.0, -1.0, 1.0).is_err());
        assert!(bose_einstein(1.0, 1.0, 0.0).is_err());
        assert!(bose_einstein(f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn bose_einstein_strictly_decreasing_on_log_grid() {
        let values: Vec<f64> = (-40..=28)
            .map(|i| 10f64.powf(i as f64 / 10.0))
            .map(|x| bose_einstein(x, 1.0, 1.0).unwrap())
            .collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]));
        assert!(values[0] > 9_000.0);
    }

    #[test]
    fn classical_amplitudes() {
        let q = MeasurementParams::quantum(2.0, 1.0);
        let c = q.to_classical(1.0).unwrap();
        assert_relative_eq!(c.noise_amplitude(1.0), 0.5, epsilon = 1e-15);
        assert_eq!(c.gamma, 2.0);
        let c = MeasurementParams::quantum(0.5, 1.0)
            .to_classical(2.0)
            .unwrap();
        assert_relative_eq!(c.noise_amplitude(1.0), 2f64.sqrt(), epsilon = 1e-15);
        assert!(q.to_classical(0.0).is_err());
        assert!(q.to_classical(-1.0).is_err());
    }

    #[test]
    fn error_free_limit_flag() {
        let q = MeasurementParams::quantum(1.0, 1.0);
        assert!(!q.to_classical(1.0).unwrap().is_error_free_limit());
        assert!(q.to_classical(1e-14).unwrap().is_error_free_limit());
        assert!(q.to_classical(1e-6).unwrap().noise_amplitude(1.0) < 1e-3);
    }

    #[test]
    fn classical_eta_is_hbar_over_sigma() {
        let c = MeasurementParams::classical(0.7, 0.3);
        assert_eq!(c.eta(2.0), 2.0 / 0.3);
        // the quantum formula evaluated at η = ħ/σ reproduces the classical amplitude
        let hbar = 1e-3;
        let q = MeasurementParams::quantum(0.7, c.eta(hbar));
        assert_relative_eq!(
            q.noise_variance(hbar),
            c.noise_variance(hbar),
            max_relative = 1e-12
        );
    }

    #[test]
    fn validate_examples() {
        let o = OscillatorParams::default();
        let m = MeasurementParams::default();
        assert!(validate(&o, &m, &FeedbackConfig::None).is_ok());

        let fb = FeedbackConfig::Scheme2 {
            k: 0.1,
            reference: Reference::new(2.0, 1.0),
        };
        let err = validate(&o, &MeasurementParams::quantum(0.0, 1.0), &fb).unwrap_err();
        assert_eq!(err.len(), 1);
        assert_eq!(err[0].code, ViolationCode::FeedbackRequiresMeasurement);
        assert_eq!(err[0].code.as_str(), "feedback-requires-measurement");

        let err = validate(
            &o,
            &MeasurementParams::quantum(0.2, 1.2),
            &FeedbackConfig::None,
        )
        .unwrap_err();
        assert_eq!(err[0].code, ViolationCode::EfficiencyRange);
    }

    #[test]
    fn validate_collects_every_violation() {
        let o = OscillatorParams::new(-1.0, -0.1)
            .with_hbar(0.0)
            .with_beta(-2.0);
        let m = MeasurementParams::classical(0.0, -1.0);
        let fb = FeedbackConfig::Scheme1 { k: 0.2, tau: 0.0 };
        let codes: Vec<_> = validate(&o, &m, &fb)
            .unwrap_err()
            .into_iter()
            .map(|v| v.code)
            .collect();
        for code in [
            ViolationCode::OmegaRange,
            ViolationCode::KappaRange,
            ViolationCode::HbarRange,
            ViolationCode::BetaRange,
            ViolationCode::SigmaRange,
            ViolationCode::DelayRange,
            ViolationCode::FeedbackRequiresMeasurement,
        ] {
            assert!(codes.contains(&code), "missing {code}");
        }
    }

    #[test]
    fn unstable_kind_flips_drift_only() {
        let o = OscillatorParams::new(1.0, 0.1).with_fixed_point_kind(FixedPointKind::Unstable);
        assert_eq!(o.drift_kappa(), -0.1);
        assert!(o.thermal_diffusion() > 0.0);
        assert_eq!(
            o.thermal_diffusion(),
            OscillatorParams::new(1.0, 0.1).thermal_diffusion()
        );
    }

    #[test]
    fn zero_temperature_diffusions() {
        let o = OscillatorParams::new(1.0, 0.1);
        assert_relative_eq!(o.thermal_diffusion(), 0.05, epsilon = 1e-15);
        assert_eq!(o.classical_thermal_diffusion(), 0.0);
        assert_eq!(o.free_steady_variance(), 0.5);
    }

    #[test]
    fn feedback_without_measurement_diverges() {
        let m = MeasurementParams::none();
        assert!(matches!(
            m.feedback_diffusion(0.1, 1.0),
            Err(Error::DivergentFeedback { .. })
        ));
        assert_eq!(m.feedback_diffusion(0.0, 1.0).unwrap(), 0.0);
    }
}
