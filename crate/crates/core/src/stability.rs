//! Linear stability of the averaged Scheme I delay system
//! `ẋ = ωp − κx/2 + k(x − x_τ)`, `ṗ = −ωx − κp/2`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::moments::{amplitude_window_max, integrate_dde, scheme1_mean_rhs, Mean, Path};
use crate::params::OscillatorParams;

/// Roots closer than this are the same root.
const MERGE_DISTANCE: f64 = 1e-6;
const ROOT_RESIDUAL: f64 = 1e-10;
const SEEDS_PER_AXIS: usize = 20;
/// Bisection stops once `|Re λ*| ≤` this.
pub const CRITICAL_TOLERANCE: f64 = 1e-8;
/// Half-width of the marginal band on the amplitude ratio.
pub const MARGINAL_BAND: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CharacteristicProblem {
    pub omega: f64,
    /// Damping with the fixed-point sign applied.
    pub kappa: f64,
    pub k: f64,
    pub tau: f64,
}

impl CharacteristicProblem {
    pub fn new(o: &OscillatorParams, k: f64, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Parameter(format!("tau must be > 0, got {tau}")));
        }
        Ok(Self {
            omega: o.omega,
            kappa: o.drift_kappa(),
            k,
            tau,
        })
    }

    /// Stable-kind oscillator whose drift damping equals `self.kappa`.
    fn oscillator(&self) -> OscillatorParams {
        OscillatorParams::new(self.omega, self.kappa)
    }
}

/// `(λ + κ/2)(λ + κ/2 − k(1 − e^{−λτ})) + ω²`.
pub fn char_fn(lambda: Complex64, cp: &CharacteristicProblem) -> Complex64 {
    let a = lambda + cp.kappa / 2.0;
    a * (a - cp.k * (1.0 - (-lambda * cp.tau).exp())) + cp.omega * cp.omega
}

pub fn char_fn_derivative(lambda: Complex64, cp: &CharacteristicProblem) -> Complex64 {
    let a = lambda + cp.kappa / 2.0;
    let e = (-lambda * cp.tau).exp();
    (a - cp.k * (1.0 - e)) + a * (1.0 - cp.k * cp.tau * e)
}

fn newton(mut z: Complex64, cp: &CharacteristicProblem) -> Option<Complex64> {
    for _ in 0..100 {
        let f = char_fn(z, cp);
        if f.norm() <= ROOT_RESIDUAL {
            return Some(z);
        }
        let d = char_fn_derivative(z, cp);
        if d.norm() == 0.0 {
            return None;
        }
        let step = f / d;
        z -= step;
        if !(z.re.is_finite() && z.im.is_finite()) || z.re.abs() > 1e3 {
            return None;
        }
    }
    (char_fn(z, cp).norm() <= ROOT_RESIDUAL).then_some(z)
}

fn seed_box(cp: &CharacteristicProblem) -> ((f64, f64), (f64, f64)) {
    let k = cp.k.abs();
    let kap = cp.kappa.abs();
    let (mut lo, mut hi) = (-2.0 * kap - k, k + kap);
    let min_width = 0.1 * cp.omega;
    if hi - lo < min_width {
        let mid = 0.5 * (hi + lo);
        lo = mid - 0.5 * min_width;
        hi = mid + 0.5 * min_width;
    }
    ((lo, hi), (0.0, cp.omega + std::f64::consts::TAU / cp.tau))
}

/// Distinct roots reached by Newton from a 20×20 seed grid, with
/// non-negative imaginary part.
pub fn roots(cp: &CharacteristicProblem) -> Vec<Complex64> {
    let ((re0, re1), (im0, im1)) = seed_box(cp);
    let lin = |a: f64, b: f64, i: usize| a + (b - a) * i as f64 / (SEEDS_PER_AXIS - 1) as f64;
    let mut found: Vec<Complex64> = Vec::new();
    for i in 0..SEEDS_PER_AXIS {
        for j in 0..SEEDS_PER_AXIS {
            let seed = Complex64::new(lin(re0, re1, i), lin(im0, im1, j));
            if let Some(mut z) = newton(seed, cp) {
                if z.im < 0.0 {
                    z = z.conj();
                }
                if z.im.abs() < 1e-12 {
                    z.im = 0.0;
                }
                if !found.iter().any(|r| (r - z).norm() < MERGE_DISTANCE) {
                    found.push(z);
                }
            }
        }
    }
    found.sort_by(|a, b| b.re.total_cmp(&a.re));
    found
}

/// Root with the largest real part among all converged roots.
pub fn rightmost_root(cp: &CharacteristicProblem) -> Result<Complex64> {
    roots(cp)
        .first()
        .copied()
        .ok_or_else(|| Error::Analysis(format!("no characteristic root converged for {cp:?}")))
}

/// Smallest gain in `k_range` at which `Re λ*` changes sign, by bisection.
pub fn critical_gain(tau: f64, o: &OscillatorParams, k_range: (f64, f64)) -> Result<f64> {
    let growth =
        |k: f64| -> Result<f64> { Ok(rightmost_root(&CharacteristicProblem::new(o, k, tau)?)?.re) };
    let (mut lo, mut hi) = k_range;
    let (mut g_lo, g_hi) = (growth(lo)?, growth(hi)?);
    if g_lo.abs() <= CRITICAL_TOLERANCE {
        return Ok(lo);
    }
    if g_hi.abs() <= CRITICAL_TOLERANCE {
        return Ok(hi);
    }
    if g_lo.signum() == g_hi.signum() {
        return Err(Error::Range { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let g = growth(mid)?;
        if g.abs() <= CRITICAL_TOLERANCE || hi - lo < 1e-15 {
            return Ok(mid);
        }
        if g.signum() == g_lo.signum() {
            lo = mid;
            g_lo = g;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Stable,
    Unstable,
    Marginal,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::Stable => "stable",
            Classification::Unstable => "unstable",
            Classification::Marginal => "marginal",
        }
    }

    pub fn from_growth(re: f64) -> Self {
        if re > 0.0 {
            Classification::Unstable
        } else if re < 0.0 {
            Classification::Stable
        } else {
            Classification::Marginal
        }
    }
}

/// Averaged Scheme I mean path from constant history `y0` on `[0, horizon]`
/// with `dt = τ/steps_per_delay`.
pub fn averaged_path(
    cp: &CharacteristicProblem,
    y0: Mean,
    horizon: f64,
    steps_per_delay: usize,
) -> Result<Path<2>> {
    let o = cp.oscillator();
    let dt = cp.tau / steps_per_delay as f64;
    let n = (horizon / dt).round().max(1.0);
    integrate_dde(
        |_, y: &[f64; 2], d: &[f64; 2]| scheme1_mean_rhs(Mean::from(*y), d[0], &o, cp.k).into(),
        y0.into(),
        cp.tau,
        (0.0, n * dt),
        dt,
    )
}

/// Amplitude ratio and verdict from a direct simulation of the averaged
/// delay equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulatedClass {
    pub ratio: f64,
    pub classification: Classification,
}

/// Compare the largest radius over the window `max(τ, 2π/ω)` ending at
/// `horizon` with the one ending at `horizon/2`.
pub fn simulate_classify(cp: &CharacteristicProblem, horizon: f64) -> Result<SimulatedClass> {
    let full = averaged_path(cp, Mean::new(1.0, 0.0), horizon, 256)?;
    let window = cp.tau.max(std::f64::consts::TAU / cp.omega);
    let half_n = full.len() / 2 + 1;
    let half = Path {
        times: full.times[..half_n].to_vec(),
        states: full.states[..half_n].to_vec(),
    };
    let ratio =
        amplitude_window_max(&full, 0, 1, window) / amplitude_window_max(&half, 0, 1, window);
    let classification = if ratio > 1.0 + MARGINAL_BAND {
        Classification::Unstable
    } else if ratio < 1.0 - MARGINAL_BAND {
        Classification::Stable
    } else {
        Classification::Marginal
    };
    Ok(SimulatedClass {
        ratio,
        classification,
    })
}

/// `max r / min r` over samples with `t ≥ t_end − window`.
pub fn orbit_radius_ratio(path: &Path<2>, window: f64) -> f64 {
    let t_end = path.last().0;
    let (lo, hi) = path
        .times
        .iter()
        .zip(&path.states)
        .filter(|(t, _)| **t >= t_end - window - 1e-12)
        .map(|(_, s)| s[0].hypot(s[1]))
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), r| {
            (lo.min(r), hi.max(r))
        });
    hi / lo
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityCell {
    pub k: f64,
    pub tau: f64,
    pub re_lambda: f64,
    pub im_lambda: f64,
    pub simulated: Classification,
    pub ratio: f64,
}

impl StabilityCell {
    /// Root sign and simulation agree; cells with `|Re λ*| < band` count as agreeing.
    pub fn agrees(&self, band: f64) -> bool {
        self.re_lambda.abs() < band || Classification::from_growth(self.re_lambda) == self.simulated
    }
}

/// Rightmost root and simulated verdict on every `(k, τ)` pair.
pub fn stability_chart(
    o: &OscillatorParams,
    ks: &[f64],
    taus: &[f64],
    horizon: f64,
) -> Result<Vec<StabilityCell>> {
    let cells: Vec<(f64, f64)> = taus
        .iter()
        .flat_map(|&tau| ks.iter().map(move |&k| (k, tau)))
        .collect();
    cells
        .par_iter()
        .map(|&(k, tau)| {
            let cp = CharacteristicProblem::new(o, k, tau)?;
            let root = rightmost_root(&cp)?;
            let sim = simulate_classify(&cp, horizon)?;
            Ok(StabilityCell {
                k,
                tau,
                re_lambda: root.re,
                im_lambda: root.im,
                simulated: sim.classification,
                ratio: sim.ratio,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn cp(k: f64) -> CharacteristicProblem {
        CharacteristicProblem::new(&OscillatorParams::new(1.0, 0.1), k, PI).unwrap()
    }

    #[test]
    fn residual_examples() {
        assert!(char_fn(Complex64::new(-0.05, 1.0), &cp(0.0)).norm() < 1e-15);
        let undamped =
            CharacteristicProblem::new(&OscillatorParams::new(1.0, 0.0), 0.0, PI).unwrap();
        assert!(char_fn(Complex64::i(), &undamped).norm() < 1e-15);
        assert!(char_fn(-Complex64::i(), &undamped).norm() < 1e-15);
        let r = char_fn(Complex64::i(), &cp(0.05));
        assert_relative_eq!(r.re, -0.0025, epsilon = 1e-14);
        assert!(r.im.abs() < 1e-14);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let c = cp(0.13);
        let z = Complex64::new(0.03, 0.8);
        let h = 1e-6;
        let fd = (char_fn(z + h, &c) - char_fn(z - h, &c)) / (2.0 * h);
        assert!((fd - char_fn_derivative(z, &c)).norm() < 1e-8);
    }

    #[test]
    fn rightmost_roots() {
        let r = rightmost_root(&cp(0.0)).unwrap();
        assert!((r - Complex64::new(-0.05, 1.0)).norm() < 1e-9);
        // reference roots from an independent arbitrary-precision solve
        let r = rightmost_root(&cp(0.2)).unwrap();
        assert!((r - Complex64::new(0.119161784404373, 0.988212566029788)).norm() < 1e-9);
        let r = rightmost_root(&cp(0.05)).unwrap();
        assert!((r - Complex64::new(4.07375983110995e-6, 0.998840325512721)).norm() < 1e-9);
        assert!(r.re.abs() <= 0.05 * 0.1);
    }

    #[test]
    fn roots_come_in_conjugate_pairs() {
        let c = cp(0.13);
        for r in roots(&c) {
            assert!(char_fn(r, &c).norm() <= ROOT_RESIDUAL);
            assert!(char_fn(r.conj(), &c).norm() <= ROOT_RESIDUAL);
        }
    }

    #[test]
    fn small_gain_continuity() {
        let base = rightmost_root(&cp(0.0)).unwrap();
        for k in [1e-3, 2e-3, 4e-3] {
            let d = (rightmost_root(&cp(k)).unwrap() - base).norm();
            assert!(d < 2.0 * k, "k = {k}: {d}");
        }
    }

    #[test]
    fn critical_gains() {
        let kc = critical_gain(PI, &OscillatorParams::new(1.0, 0.1), (0.0, 0.2)).unwrap();
        assert_relative_eq!(kc, 0.049995607657762696, epsilon = 1e-7);
        let kc = critical_gain(PI, &OscillatorParams::new(1.0, 0.2), (0.0, 0.3)).unwrap();
        assert_relative_eq!(kc, 0.09993640739924722, epsilon = 1e-7);
        assert_eq!(
            critical_gain(PI, &OscillatorParams::new(1.0, 0.0), (0.0, 0.2)).unwrap(),
            0.0
        );
        assert!(matches!(
            critical_gain(PI, &OscillatorParams::new(1.0, 0.1), (0.1, 0.2)),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn simulation_classification() {
        assert_eq!(
            simulate_classify(&cp(0.0), 200.0).unwrap().classification,
            Classification::Stable
        );
        assert_eq!(
            simulate_classify(&cp(0.2), 200.0).unwrap().classification,
            Classification::Unstable
        );
        let c = cp(0.1);
        assert_eq!(
            simulate_classify(&c, 200.0).unwrap().classification,
            Classification::Unstable
        );
        let path = averaged_path(&c, Mean::new(1.0, 0.0), 20.0, 256).unwrap();
        assert!(orbit_radius_ratio(&path, 2.0 * PI) > 1.01);
    }
}
