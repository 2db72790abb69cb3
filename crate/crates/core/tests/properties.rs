use std::f64::consts::PI;

use cv_feedback_lab::classical::{
    error_free_equivalence, OverdampedParams, QuadraticPotential, SamplingPlan, VarianceClosure,
};
use cv_feedback_lab::config::{ConfigMap, RunConfig};
use cv_feedback_lab::grid::{fpe_step, stable_dt, FieldKind, GridField, GridSpec};
use cv_feedback_lab::moments::{conditional_cov_rhs, conditional_steady_state};
use cv_feedback_lab::params::{FeedbackConfig, GaussianState, MeasurementParams, OscillatorParams};
use cv_feedback_lab::sde::{ensemble_stats, SdeSetup, Simulation};
use cv_feedback_lab::stability::{char_fn, rightmost_root, CharacteristicProblem};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn riccati_steady_state_is_physical(
        omega in 0.5f64..2.0,
        kappa in 0.01f64..1.0,
        gamma in 0.01f64..1.0,
        eta in 0.1f64..=1.0,
        beta in prop_oneof![Just(f64::INFINITY), 0.5f64..5.0],
    ) {
        let o = OscillatorParams::new(omega, kappa).with_beta(beta);
        let mm = MeasurementParams::quantum(gamma, eta);
        let cv = conditional_steady_state(&o, &mm).unwrap();
        let r = conditional_cov_rhs(cv, &o, &mm);
        prop_assert!(r.vx.abs().max(r.vp.abs()).max(r.c.abs()) < 1e-9);
        prop_assert!(cv.vx > 0.0 && cv.vp > 0.0);
        prop_assert!(cv.determinant() >= 0.25 * (1.0 - 1e-9));
    }

    #[test]
    fn free_grid_step_conserves_mass(
        x in -1.0f64..1.0,
        p in -1.0f64..1.0,
        kappa in 0.0f64..0.5,
        beta in 0.5f64..4.0,
    ) {
        let o = OscillatorParams::new(1.0, kappa);
        let co = cv_feedback_lab::classical::classical_free_coefficients(&o, beta).unwrap();
        let spec = GridSpec::symmetric(64, 7.0).unwrap();
        let g = GaussianState { mean_x: x, mean_p: p, v_x: 0.8, v_p: 0.8, c: 0.1 };
        let mut f = GridField::gaussian(spec, FieldKind::Probability, &g).unwrap();
        let dt = stable_dt(&spec, &co);
        for _ in 0..20 {
            f = fpe_step(&f, &co, dt).unwrap();
        }
        prop_assert!((f.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rightmost_root_is_a_root(k in 0.0f64..0.3, tau in 0.5f64..(2.0 * PI)) {
        let cp = CharacteristicProblem::new(&OscillatorParams::new(1.0, 0.1), k, tau).unwrap();
        let r = rightmost_root(&cp).unwrap();
        prop_assert!(char_fn(r, &cp).norm() < 1e-8);
        prop_assert!(char_fn(r.conj(), &cp).norm() < 1e-8);
    }

    #[test]
    fn numeric_keys_round_trip(v in -1e6f64..1e6) {
        let mut c = RunConfig::default();
        c.apply(&ConfigMap::parse(&format!("k = {v}\ny0 = {v:e}")).unwrap()).unwrap();
        prop_assert_eq!(c.k, v);
        prop_assert_eq!(c.y0, v);
    }
}

#[test]
fn ensemble_stats_ignore_record_order() {
    let setup = SdeSetup::new(
        OscillatorParams::new(1.0, 0.2),
        MeasurementParams::quantum(0.3, 1.0),
        FeedbackConfig::Scheme1 { k: 0.05, tau: 1.0 },
        GaussianState::coherent(1.0, 0.0, 1.0),
        2.0,
    )
    .with_record_stride(8);
    let sim = Simulation::new(setup).unwrap();
    let records = sim.run_ensemble(3, 12).unwrap();
    let mut shuffled = records.clone();
    shuffled.reverse();
    shuffled.swap(2, 7);
    assert_eq!(ensemble_stats(&records).unwrap(), ensemble_stats(&shuffled).unwrap());
}

#[test]
fn moment_consistent_closure_satisfies_total_variance() {
    let op = OverdampedParams {
        kappa: 1.0,
        temperature: 1.0,
        sigma: 1.0,
        gamma: 1.0,
        potential: QuadraticPotential::new(0.5, 0.0, 0.0),
    };
    let plan = SamplingPlan {
        n_traj: 200,
        ..SamplingPlan::default()
    };
    let r = error_free_equivalence(&op, &[1.0, 0.1], &plan, VarianceClosure::FpeConsistent).unwrap();
    for s in &r.per_sigma {
        assert!(s.total_z <= 3.0, "sigma {}: z = {}", s.sigma, s.total_z);
    }
    assert!((r.per_sigma[0].steady_vc - (3f64.sqrt() - 1.0)).abs() < 1e-12);
}
