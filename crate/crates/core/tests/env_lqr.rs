//! LQR synthesis, safe sets and the backup-controller check on both systems.

use nalgebra::{DMatrix, DVector};
use safempc::env::{sample_polytope, EnvConfig, EnvSpec};

fn systems() -> Vec<(&'static str, EnvSpec)> {
    vec![
        ("pendulum", EnvSpec::from_config(&EnvConfig::pendulum()).unwrap()),
        ("cart-pole", EnvSpec::from_config(&EnvConfig::cart_pole()).unwrap()),
    ]
}

/// `‖Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA − P‖_F`, recomputed from the
/// configured weights.
fn riccati_residual(spec: &EnvSpec, q_diag: &[f64], r: f64) -> f64 {
    let (a, b, p) = (&spec.true_a, &spec.true_b, &spec.lqr.cost);
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(q_diag));
    let s = DMatrix::from_element(1, 1, r) + b.transpose() * p * b;
    let sinv = s.try_inverse().unwrap();
    let rhs = q + a.transpose() * p * a - a.transpose() * p * b * sinv * b.transpose() * p * a;
    (rhs - p).norm()
}

#[test]
fn riccati_solution_and_gain_are_consistent() {
    for (name, spec) in systems() {
        let (q, r) = match name {
            "pendulum" => (&spec.config.pendulum.lqr_q, spec.config.pendulum.lqr_r),
            _ => (&spec.config.cart_pole.lqr_q, spec.config.cart_pole.lqr_r),
        };
        let res = riccati_residual(&spec, q, r);
        assert!(res <= 1e-10, "{name}: residual {res:e}");
        let (a, b, p) = (&spec.true_a, &spec.true_b, &spec.lqr.cost);
        let s = DMatrix::from_element(1, 1, r) + b.transpose() * p * b;
        let k = s.try_inverse().unwrap() * b.transpose() * p * a;
        assert!((&k - &spec.lqr.gain).amax() <= 1e-9 * k.amax(), "{name}: gain mismatch");
    }
}

#[test]
fn closed_loop_is_schur_stable() {
    for (name, spec) in systems() {
        let acl = &spec.true_a - &spec.true_b * &spec.lqr.gain;
        let radius = acl.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(radius < 1.0, "{name}: spectral radius {radius}");
    }
}

#[test]
fn safe_polytope_lies_in_the_invariant_level_set() {
    for (name, spec) in systems() {
        for x in sample_polytope(spec.constraints.safe(), 500, 3).unwrap() {
            assert!(spec.level(&x) <= spec.safe_set.level * (1.0 + 1e-9), "{name}: {x}");
            if let Some(state) = spec.constraints.state() {
                assert!(state.contains(&x, 1e-9), "{name}: {x}");
            }
        }
    }
}

#[test]
fn backup_controller_keeps_sampled_safe_states_safe() {
    for (name, spec) in systems() {
        let report = spec.check_assumption2(1000, 10.0, 7).unwrap();
        assert_eq!(report.steps, 200);
        assert!(report.passed(), "{name}: {report:?}");
    }
}

#[test]
fn reference_is_an_equilibrium_of_the_backup_controller() {
    for (name, spec) in systems() {
        let u = spec.safety.eval(&spec.reference);
        let next = spec.step(&spec.reference, &u).unwrap();
        assert!((next - &spec.reference).amax() < 1e-12, "{name}");
    }
}
