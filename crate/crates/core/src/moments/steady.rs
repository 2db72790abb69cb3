use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::params::{MeasurementParams, OscillatorParams};

use super::{
    conditional_cov_rhs_with, integrate_ode, unconditional_cov_rhs_with, Cov, CovCoefficients,
};

fn residual(cv: Cov, co: &CovCoefficients) -> Vector3<f64> {
    let r = conditional_cov_rhs_with(cv, co);
    Vector3::new(r.vx, r.vp, r.c)
}

fn jacobian(cv: Cov, co: &CovCoefficients) -> Matrix3<f64> {
    let (w, kap, r) = (co.omega, co.drift_kappa, co.riccati);
    Matrix3::new(
        -kap - 2.0 * r * cv.vx,
        0.0,
        2.0 * w,
        0.0,
        -kap,
        -2.0 * w - 2.0 * r * cv.c,
        -w - r * cv.c,
        w,
        -kap - r * cv.vx,
    )
}

fn newton(mut cv: Cov, co: &CovCoefficients) -> Option<Cov> {
    let scale = 1.0 + co.thermal.abs() + co.decoherence.abs();
    for _ in 0..100 {
        let f = residual(cv, co);
        let norm = f.norm();
        if norm <= 1e-14 * scale {
            return Some(cv);
        }
        let dx = jacobian(cv, co).lu().solve(&(-f))?;
        let mut lambda = 1.0;
        loop {
            let trial = Cov::new(
                cv.vx + lambda * dx[0],
                cv.vp + lambda * dx[1],
                cv.c + lambda * dx[2],
            );
            if residual(trial, co).norm() < norm || lambda < 1e-6 {
                cv = trial;
                break;
            }
            lambda *= 0.5;
        }
    }
    let f = residual(cv, co).norm();
    (f <= 1e-10 * scale).then_some(cv)
}

fn relax(co: &CovCoefficients, start: Cov) -> Result<Cov> {
    let dt = (0.02 / co.omega.abs().max(1e-3)).min(0.02);
    let mut cv = start;
    let scale = 1.0 + co.thermal.abs() + co.decoherence.abs();
    for _ in 0..400 {
        let path = integrate_ode(
            |_, y: &[f64; 3]| conditional_cov_rhs_with(Cov::from(*y), co).into(),
            cv.into(),
            (0.0, 50.0),
            dt,
        )?;
        cv = Cov::from(path.last().1);
        if residual(cv, co).norm() <= 1e-9 * scale {
            break;
        }
    }
    Ok(cv)
}

/// Stationary solution of the conditional Riccati equation.
///
/// The physical root is selected by relaxing the flow from a broad initial
/// state before a damped Newton polish.
pub fn conditional_steady_state(o: &OscillatorParams, mm: &MeasurementParams) -> Result<Cov> {
    let co = CovCoefficients::new(o, mm);
    if co.riccati == 0.0 && co.drift_kappa <= 0.0 {
        return Err(Error::Analysis(
            "no stationary covariance without measurement at an unstable or undamped fixed point"
                .into(),
        ));
    }
    let v0 = (co.thermal + co.decoherence).max(1e-3) / o.kappa.abs().max(1e-3);
    let guess = relax(
        &co,
        Cov::new(v0.max(0.5 * o.hbar), v0.max(0.5 * o.hbar), 0.0),
    )?;
    let cv = newton(guess, &co).ok_or_else(|| {
        Error::Analysis("Newton iteration for the stationary covariance did not converge".into())
    })?;
    if !cv.is_positive_semidefinite(1e-12) {
        return Err(Error::Analysis(format!(
            "stationary covariance {cv:?} is not positive semidefinite"
        )));
    }
    Ok(cv)
}

/// Linear system `A v + b = 0` of the unconditional Scheme II covariances.
fn scheme2_system(
    o: &OscillatorParams,
    mm: &MeasurementParams,
    k: f64,
) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let fb = mm.feedback_diffusion(k, o.hbar)?;
    let co = CovCoefficients::new(o, mm);
    let b = unconditional_cov_rhs_with(Cov::default(), &co, k, fb);
    let col = |e: Cov| {
        let r = unconditional_cov_rhs_with(e, &co, k, fb);
        Vector3::new(r.vx - b.vx, r.vp - b.vp, r.c - b.c)
    };
    let a = Matrix3::from_columns(&[
        col(Cov::new(1.0, 0.0, 0.0)),
        col(Cov::new(0.0, 1.0, 0.0)),
        col(Cov::new(0.0, 0.0, 1.0)),
    ]);
    Ok((a, Vector3::new(b.vx, b.vp, b.c)))
}

/// Stationary unconditional covariances under Scheme II; errors when the
/// linear covariance flow is not contracting.
pub fn unconditional_steady_state_scheme2(
    o: &OscillatorParams,
    mm: &MeasurementParams,
    k: f64,
) -> Result<Cov> {
    let (a, b) = scheme2_system(o, mm, k)?;
    let growth = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if growth >= 0.0 {
        return Err(Error::Analysis(format!(
            "unconditional covariance flow is not contracting (largest growth rate {growth:.3e})"
        )));
    }
    let v = a
        .lu()
        .solve(&(-b))
        .ok_or_else(|| Error::Analysis("singular covariance system".into()))?;
    Ok(Cov::new(v[0], v[1], v[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{conditional_cov_rhs, unconditional_cov_rhs_scheme2};
    use crate::params::FixedPointKind;
    use approx::assert_relative_eq;

    #[test]
    fn free_steady_state_is_thermal() {
        let o = OscillatorParams::new(1.0, 0.1).with_beta(1.0);
        let cv = conditional_steady_state(&o, &MeasurementParams::none()).unwrap();
        let v = 0.5 * (1.0 + 2.0 * o.n_bose());
        assert_relative_eq!(cv.vx, v, epsilon = 1e-10);
        assert_relative_eq!(cv.vp, v, epsilon = 1e-10);
        assert!(cv.c.abs() < 1e-10);
    }

    #[test]
    fn measured_steady_state_is_a_root() {
        let o = OscillatorParams::new(1.0, 0.1);
        let mm = MeasurementParams::quantum(0.2, 1.0);
        let cv = conditional_steady_state(&o, &mm).unwrap();
        let r = conditional_cov_rhs(cv, &o, &mm);
        assert!(r.vx.abs() < 1e-12 && r.vp.abs() < 1e-12 && r.c.abs() < 1e-12);
        assert!(cv.determinant() >= 0.25 - 1e-12);
    }

    #[test]
    fn measurement_localizes_an_unstable_point() {
        let o = OscillatorParams::new(1.0, 0.1).with_fixed_point_kind(FixedPointKind::Unstable);
        let cv = conditional_steady_state(&o, &MeasurementParams::quantum(0.2, 1.0)).unwrap();
        assert!(cv.is_positive_semidefinite(0.0));
        assert!(conditional_steady_state(&o, &MeasurementParams::none()).is_err());
    }

    #[test]
    fn unconditional_steady_is_a_root() {
        let o = OscillatorParams::new(1.0, 0.25);
        let mm = MeasurementParams::quantum(0.2, 1.0);
        let cv = unconditional_steady_state_scheme2(&o, &mm, 0.125).unwrap();
        let r = unconditional_cov_rhs_scheme2(cv, &o, &mm, 0.125).unwrap();
        assert!(r.vx.abs() < 1e-12 && r.vp.abs() < 1e-12 && r.c.abs() < 1e-12);
    }

    #[test]
    fn unconditional_requires_contraction() {
        let o = OscillatorParams::new(1.0, 0.25);
        let mm = MeasurementParams::quantum(0.2, 1.0);
        assert!(matches!(
            unconditional_steady_state_scheme2(&o, &mm, 0.3),
            Err(Error::Analysis(_))
        ));
    }
}
