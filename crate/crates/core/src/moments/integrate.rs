use crate::error::{Error, Result};

use super::delay_steps;

/// A sampled solution `t_i ↦ y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path<const N: usize> {
    pub times: Vec<f64>,
    pub states: Vec<[f64; N]>,
}

impl<const N: usize> Path<N> {
    fn with_capacity(n: usize) -> Self {
        Self {
            times: Vec::with_capacity(n),
            states: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> (f64, [f64; N]) {
        (*self.times.last().unwrap(), *self.states.last().unwrap())
    }

    /// Linear interpolation between samples, clamped at the ends.
    pub fn sample(&self, t: f64) -> [f64; N] {
        let i = self.times.partition_point(|&s| s <= t);
        if i == 0 {
            return self.states[0];
        }
        if i == self.times.len() {
            return *self.states.last().unwrap();
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        let (a, b) = (&self.states[i - 1], &self.states[i]);
        std::array::from_fn(|j| a[j] + w * (b[j] - a[j]))
    }

    pub fn component(&self, j: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[j]).collect()
    }
}

/// Number of `dt` steps that cover `span`; the last one may be shorter.
pub fn steps_for(span: (f64, f64), dt: f64) -> usize {
    let n = ((span.1 - span.0) / dt - 1e-9).ceil();
    n.max(0.0) as usize
}

fn axpy<const N: usize>(y: &[f64; N], a: f64, k: &[f64; N]) -> [f64; N] {
    std::array::from_fn(|j| y[j] + a * k[j])
}

fn check_finite<const N: usize>(y: &[f64; N], time: f64, step: usize) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { time, step })
    }
}

fn check_step(span: (f64, f64), dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Parameter(format!(
            "time step must be positive, got {dt}"
        )));
    }
    if !(span.1 >= span.0) {
        return Err(Error::Parameter(format!(
            "empty time span [{}, {}]",
            span.0, span.1
        )));
    }
    Ok(())
}

/// Classical fourth-order Runge–Kutta on `span` with step `dt`.
pub fn integrate_ode<const N: usize, F>(
    mut rhs: F,
    y0: [f64; N],
    span: (f64, f64),
    dt: f64,
) -> Result<Path<N>>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
{
    check_step(span, dt)?;
    let n = steps_for(span, dt);
    let mut path = Path::with_capacity(n + 1);
    let mut y = y0;
    path.times.push(span.0);
    path.states.push(y);
    for step in 0..n {
        let t = span.0 + step as f64 * dt;
        let h = if step + 1 == n { span.1 - t } else { dt };
        let k1 = rhs(t, &y);
        let k2 = rhs(t + 0.5 * h, &axpy(&y, 0.5 * h, &k1));
        let k3 = rhs(t + 0.5 * h, &axpy(&y, 0.5 * h, &k2));
        let k4 = rhs(t + h, &axpy(&y, h, &k3));
        y = std::array::from_fn(|j| y[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]));
        check_finite(&y, t + h, step + 1)?;
        path.times.push(t + h);
        path.states.push(y);
    }
    Ok(path)
}

/// RK4 method of steps for `y' = f(t, y(t), y(t − τ))` with constant history
/// `y0` on `t ≤ t0`. `τ/dt` must be an integer. Delayed values at RK
/// midpoints come from the cubic Hermite interpolant of stored nodes.
pub fn integrate_dde<const N: usize, F>(
    mut rhs: F,
    y0: [f64; N],
    tau: f64,
    span: (f64, f64),
    dt: f64,
) -> Result<Path<N>>
where
    F: FnMut(f64, &[f64; N], &[f64; N]) -> [f64; N],
{
    check_step(span, dt)?;
    let lag = delay_steps(tau, dt)?;
    let n = ((span.1 - span.0) / dt).round() as usize;
    if ((span.1 - span.0) - n as f64 * dt).abs() > 1e-9 * (span.1 - span.0).max(1.0) {
        return Err(Error::Parameter(format!(
            "span length {} is not a multiple of dt = {dt}",
            span.1 - span.0
        )));
    }
    let mut path = Path::with_capacity(n + 1);
    let mut derivs: Vec<[f64; N]> = Vec::with_capacity(n + 1);
    let mut y = y0;
    path.times.push(span.0);
    path.states.push(y);
    derivs.push(rhs(span.0, &y, &y0));

    let node = |states: &[[f64; N]], j: isize| if j < 0 { y0 } else { states[j as usize] };
    for step in 0..n {
        let t = span.0 + step as f64 * dt;
        let j = step as isize - lag as isize;
        let d0 = node(&path.states, j);
        let d1 = node(&path.states, j + 1);
        let dmid = if j < 0 {
            y0
        } else {
            let (f0, f1) = (&derivs[j as usize], &derivs[j as usize + 1]);
            std::array::from_fn(|i| 0.5 * (d0[i] + d1[i]) + dt * (f0[i] - f1[i]) / 8.0)
        };
        let k1 = derivs[step];
        let k2 = rhs(t + 0.5 * dt, &axpy(&y, 0.5 * dt, &k1), &dmid);
        let k3 = rhs(t + 0.5 * dt, &axpy(&y, 0.5 * dt, &k2), &dmid);
        let k4 = rhs(t + dt, &axpy(&y, dt, &k3), &d1);
        y = std::array::from_fn(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        check_finite(&y, t + dt, step + 1)?;
        path.times.push(t + dt);
        path.states.push(y);
        let dnext = node(&path.states, j + 1);
        derivs.push(rhs(t + dt, &y, &dnext));
    }
    Ok(path)
}

/// Largest radius `√(y_a² + y_b²)` over samples with `t ≥ t_end − window`.
pub fn amplitude_window_max<const N: usize>(
    path: &Path<N>,
    a: usize,
    b: usize,
    window: f64,
) -> f64 {
    let t_end = path.last().0;
    path.times
        .iter()
        .zip(&path.states)
        .filter(|(t, _)| **t >= t_end - window - 1e-12)
        .map(|(_, s)| s[a].hypot(s[b]))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rk4_exponential() {
        let p = integrate_ode(|_, y: &[f64; 1]| [-y[0]], [1.0], (0.0, 2.0), 0.01).unwrap();
        assert_relative_eq!(p.last().1[0], (-2.0f64).exp(), epsilon = 1e-10);
        assert_eq!(p.len(), 201);
    }

    #[test]
    fn rk4_truncates_last_step() {
        let p = integrate_ode(|_, _: &[f64; 1]| [1.0], [0.0], (0.0, 1.05), 0.1).unwrap();
        assert_relative_eq!(p.last().0, 1.05, epsilon = 1e-14);
        assert_relative_eq!(p.last().1[0], 1.05, epsilon = 1e-14);
    }

    #[test]
    fn rk4_rotation_is_fourth_order() {
        let err = |dt: f64| {
            let p = integrate_ode(|_, y: &[f64; 2]| [y[1], -y[0]], [1.0, 0.0], (0.0, 10.0), dt)
                .unwrap();
            (p.last().1[0] - 10f64.cos()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    #[test]
    fn divergence_is_reported() {
        let r = integrate_ode(|_, y: &[f64; 1]| [y[0] * y[0]], [1.0], (0.0, 5.0), 0.01);
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn dde_first_interval_is_exact() {
        // y' = −y(t−1), y = 1 on t ≤ 0: y = 1 − t on [0,1], 1 − t + (t−1)²/2 on [1,2]
        let p = integrate_dde(|_, _, d: &[f64; 1]| [-d[0]], [1.0], 1.0, (0.0, 2.0), 0.01).unwrap();
        assert_relative_eq!(p.sample(1.0)[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.last().1[0], -0.5, epsilon = 1e-10);
    }

    #[test]
    fn dde_matches_third_interval_polynomial() {
        // on [2,3]: 1 − t + (t−1)²/2 − (t−2)³/6
        let p = integrate_dde(|_, _, d: &[f64; 1]| [-d[0]], [1.0], 1.0, (0.0, 3.0), 0.01).unwrap();
        let t: f64 = 3.0;
        let exact = 1.0 - t + (t - 1.0).powi(2) / 2.0 - (t - 2.0).powi(3) / 6.0;
        assert_relative_eq!(p.last().1[0], exact, epsilon = 1e-9);
    }

    #[test]
    fn dde_converges_at_high_order() {
        let run = |dt: f64| {
            integrate_dde(
                |_, y: &[f64; 2], d: &[f64; 2]| [y[1] + 0.2 * (y[0] - d[0]), -y[0] - 0.05 * y[1]],
                [1.0, 0.0],
                std::f64::consts::PI,
                (0.0, 20.0 * std::f64::consts::PI),
                dt,
            )
            .unwrap()
            .last()
            .1[0]
        };
        let h = std::f64::consts::PI / 32.0;
        let (a, b, c) = (run(h), run(h / 2.0), run(h / 4.0));
        let order = ((a - b) / (b - c)).abs().log2();
        assert!(order > 3.5, "observed order {order}");
    }

    #[test]
    fn dde_rejects_misaligned_delay() {
        let r = integrate_dde(|_, _, d: &[f64; 1]| [-d[0]], [1.0], 1.0, (0.0, 2.0), 0.3);
        assert!(matches!(r, Err(Error::DelayAlignment { .. })));
    }

    #[test]
    fn window_amplitude() {
        let p = integrate_ode(
            |_, y: &[f64; 2]| [y[1], -y[0]],
            [2.0, 0.0],
            (0.0, 10.0),
            0.01,
        )
        .unwrap();
        assert_relative_eq!(amplitude_window_max(&p, 0, 1, 3.0), 2.0, epsilon = 1e-8);
    }
}
