//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. Precedence is command line over file over scenario defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{
    ensure_valid, serialize_extended_f64, FeedbackConfig, FixedPointKind, GaussianState,
    MeasurementMode, MeasurementParams, OscillatorParams, Reference,
};

pub const KNOWN_KEYS: &[&str] = &[
    "omega",
    "kappa",
    "hbar",
    "beta",
    "gamma",
    "eta",
    "sigma",
    "mode",
    "scheme",
    "k",
    "tau",
    "y0",
    "Omega",
    "phi",
    "seed",
    "dt",
    "t_end",
    "n_traj",
    "fixed_point",
    "grid.nx",
    "grid.np",
    "grid.x_min",
    "grid.x_max",
    "grid.p_min",
    "grid.p_max",
];

/// Parsed but not yet applied key/value pairs, in key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap(BTreeMap<String, String>);

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    n + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!(
                    "line {}: unknown key `{key}`",
                    n + 1
                )));
            }
            if value.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: empty value for `{key}`",
                    n + 1
                )));
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    n + 1
                )));
            }
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    None,
    Scheme1,
    Scheme2,
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "0" => Ok(SchemeKind::None),
            "1" | "i" | "scheme1" => Ok(SchemeKind::Scheme1),
            "2" | "ii" | "scheme2" => Ok(SchemeKind::Scheme2),
            _ => Err(Error::Config(format!(
                "scheme must be none, 1 or 2, got `{s}`"
            ))),
        }
    }
}

/// Optional grid overrides; unset bounds are chosen by the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct GridOverrides {
    pub nx: Option<usize>,
    pub np: Option<usize>,
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub p_min: Option<f64>,
    pub p_max: Option<f64>,
}

/// Effective parameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub omega: f64,
    pub kappa: f64,
    pub hbar: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub beta: f64,
    pub fixed_point: FixedPointKind,
    pub gamma: f64,
    pub eta: f64,
    pub sigma: f64,
    pub mode: MeasurementMode,
    pub scheme: SchemeKind,
    pub k: f64,
    pub tau: f64,
    pub y0: f64,
    #[serde(rename = "Omega")]
    pub big_omega: f64,
    pub phi: f64,
    pub seed: u64,
    pub dt: Option<f64>,
    pub t_end: f64,
    pub n_traj: usize,
    pub grid: GridOverrides,
    /// Keys given explicitly by the file or the command line.
    #[serde(skip)]
    pub explicit: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            kappa: 0.1,
            hbar: 1.0,
            beta: f64::INFINITY,
            fixed_point: FixedPointKind::Stable,
            gamma: 0.2,
            eta: 1.0,
            sigma: 1.0,
            mode: MeasurementMode::Quantum,
            scheme: SchemeKind::None,
            k: 0.0,
            tau: std::f64::consts::PI,
            y0: 1.0,
            big_omega: 1.0,
            phi: 0.0,
            seed: 1,
            dt: None,
            t_end: 20.0,
            n_traj: 200,
            grid: GridOverrides::default(),
            explicit: Vec::new(),
        }
    }
}

fn num(key: &str, v: &str) -> Result<f64> {
    match v.to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        _ => v
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`"))),
    }
}

fn int<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("`{key}` expects a non-negative integer, got `{v}`")))
}

impl RunConfig {
    /// Overlay every key of `map`.
    pub fn apply(&mut self, map: &ConfigMap) -> Result<()> {
        for (key, v) in &map.0 {
            let key = key.as_str();
            match key {
                "omega" => self.omega = num(key, v)?,
                "kappa" => self.kappa = num(key, v)?,
                "hbar" => self.hbar = num(key, v)?,
                "beta" => self.beta = num(key, v)?,
                "gamma" => self.gamma = num(key, v)?,
                "eta" => self.eta = num(key, v)?,
                "sigma" => self.sigma = num(key, v)?,
                "mode" => {
                    self.mode = match v.to_ascii_lowercase().as_str() {
                        "quantum" => MeasurementMode::Quantum,
                        "classical" => MeasurementMode::Classical,
                        _ => {
                            return Err(Error::Config(format!(
                                "mode must be quantum or classical, got `{v}`"
                            )))
                        }
                    }
                }
                "scheme" => self.scheme = v.parse()?,
                "fixed_point" => {
                    self.fixed_point = match v.to_ascii_lowercase().as_str() {
                        "stable" => FixedPointKind::Stable,
                        "unstable" => FixedPointKind::Unstable,
                        _ => {
                            return Err(Error::Config(format!(
                                "fixed_point must be stable or unstable, got `{v}`"
                            )))
                        }
                    }
                }
                "k" => self.k = num(key, v)?,
                "tau" => self.tau = num(key, v)?,
                "y0" => self.y0 = num(key, v)?,
                "Omega" => self.big_omega = num(key, v)?,
                "phi" => self.phi = num(key, v)?,
                "seed" => self.seed = int(key, v)?,
                "dt" => self.dt = Some(num(key, v)?),
                "t_end" => self.t_end = num(key, v)?,
                "n_traj" => self.n_traj = int(key, v)?,
                "grid.nx" => self.grid.nx = Some(int(key, v)?),
                "grid.np" => self.grid.np = Some(int(key, v)?),
                "grid.x_min" => self.grid.x_min = Some(num(key, v)?),
                "grid.x_max" => self.grid.x_max = Some(num(key, v)?),
                "grid.p_min" => self.grid.p_min = Some(num(key, v)?),
                "grid.p_max" => self.grid.p_max = Some(num(key, v)?),
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            if !self.explicit.iter().any(|k| k == key) {
                self.explicit.push(key.to_string());
            }
        }
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }

    pub fn oscillator(&self) -> OscillatorParams {
        OscillatorParams::new(self.omega, self.kappa)
            .with_hbar(self.hbar)
            .with_beta(self.beta)
            .with_fixed_point_kind(self.fixed_point)
    }

    pub fn measurement(&self) -> MeasurementParams {
        match self.mode {
            MeasurementMode::Quantum => MeasurementParams::quantum(self.gamma, self.eta),
            MeasurementMode::Classical => MeasurementParams::classical(self.gamma, self.sigma),
        }
    }

    pub fn reference(&self) -> Reference {
        Reference::new(self.y0, self.big_omega).with_phase(self.phi)
    }

    pub fn feedback(&self) -> FeedbackConfig {
        match self.scheme {
            SchemeKind::None => FeedbackConfig::None,
            SchemeKind::Scheme1 => FeedbackConfig::Scheme1 {
                k: self.k,
                tau: self.tau,
            },
            SchemeKind::Scheme2 => FeedbackConfig::Scheme2 {
                k: self.k,
                reference: self.reference(),
            },
        }
    }

    /// Physical invariants plus run-control ranges.
    pub fn validate(&self) -> Result<()> {
        ensure_valid(&self.oscillator(), &self.measurement(), &self.feedback())?;
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config(format!(
                "t_end must be > 0, got {}",
                self.t_end
            )));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt < self.t_end) {
                return Err(Error::Config(format!(
                    "dt must lie in (0, t_end), got {dt}"
                )));
            }
        }
        if self.n_traj < 2 {
            return Err(Error::Config(format!(
                "n_traj must be ≥ 2, got {}",
                self.n_traj
            )));
        }
        Ok(())
    }

    pub fn coherent(&self, x: f64, p: f64) -> GaussianState {
        GaussianState::coherent(x, p, self.hbar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_applies() {
        let map = ConfigMap::parse(
            "# run\nomega = 2\nbeta = inf  # zero temperature\nscheme = 2\nmode = classical\nn_traj=50\ngrid.nx = 64\n",
        )
        .unwrap();
        let mut c = RunConfig::default();
        c.apply(&map).unwrap();
        assert_eq!(c.omega, 2.0);
        assert!(c.beta.is_infinite());
        assert_eq!(c.scheme, SchemeKind::Scheme2);
        assert_eq!(c.mode, MeasurementMode::Classical);
        assert_eq!(c.n_traj, 50);
        assert_eq!(c.grid.nx, Some(64));
        assert!(c.is_explicit("omega") && !c.is_explicit("kappa"));
        assert!(matches!(c.feedback(), FeedbackConfig::Scheme2 { .. }));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            ConfigMap::parse("omgea = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(ConfigMap::parse("omega 1"), Err(Error::Config(_))));
        assert!(matches!(
            ConfigMap::parse("omega = 1\nomega = 2"),
            Err(Error::Config(_))
        ));
        assert!(matches!(ConfigMap::parse("omega ="), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        assert!(c.apply(&ConfigMap::parse("omega = fast").unwrap()).is_err());
        assert!(c.apply(&ConfigMap::parse("scheme = 3").unwrap()).is_err());
        assert!(c.apply(&ConfigMap::parse("n_traj = -4").unwrap()).is_err());
    }

    #[test]
    fn echo_is_lossless() {
        let c = RunConfig::default();
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["beta"], "inf");
        assert_eq!(v["Omega"], 1.0);
    }
}
