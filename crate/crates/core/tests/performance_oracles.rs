//! Expected saturating cost against Monte Carlo, and the discrete toy system
//! contrasting two-stage and coupled planning.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safempc::performance::{expected_saturating_cost, toy, GaussianBelief};

#[test]
fn expected_saturating_cost_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for _ in 0..20 {
        let p = rng.random_range(1..=4);
        let m = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let goal = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let s = common::random_spd(&mut rng, p, 0.3);
        let w = common::random_spd(&mut rng, p, 1.0);
        let closed = expected_saturating_cost(&GaussianBelief::new(m.clone(), s.clone()).unwrap(), &goal, &w).unwrap();
        let (mc, se) = common::saturating_monte_carlo(&m, &s, &goal, &w, 1_000_000, &mut rng);
        assert!((closed - mc).abs() <= 3.0 * se, "closed {closed} vs MC {mc} ± {se}");
    }
}

#[test]
fn point_belief_reduces_to_the_stage_cost() {
    let m = DVector::from_vec(vec![0.4, -0.2]);
    let w = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
    let goal = DVector::zeros(2);
    let got = expected_saturating_cost(&GaussianBelief::point(m), &goal, &w).unwrap();
    let want = 1.0 - (-0.5f64 * (2.0 * 0.16 + 0.5 * 0.04)).exp();
    assert!((got - want).abs() < 1e-15);
}

#[test]
fn two_stage_planning_is_stuck_at_the_origin() {
    for h in 1..=2 {
        let xs = toy::simulate(0, 20, |x| toy::two_stage_action(x, h, h, 0.95));
        assert!(xs.iter().all(|&x| x == 0), "{xs:?}");
    }
}

#[test]
fn coupled_planning_reaches_the_best_safe_state() {
    // Only −1 is cheaper than 1, and it lies outside the safe set.
    let best = (0..5).min_by(|a, b| toy::cost(*a).total_cmp(&toy::cost(*b))).unwrap();
    assert_eq!(best, 1);
    for h in 1..=2 {
        let xs = toy::simulate(0, 20, |x| toy::coupled_action(x, h, h, 0.95));
        assert!(xs.iter().all(|&x| x >= 0), "{xs:?}");
        assert_eq!(*xs.last().unwrap(), best, "{xs:?}");
    }
}
