//! Monte Carlo containment of trajectories with bounded model errors in the
//! propagated ellipsoids.

mod common;

use safempc::propagation::PropagationScheme;

#[test]
fn locally_constant_tube_contains_trajectories() {
    let r = common::containment_monte_carlo(PropagationScheme::LocallyConstant, 2000, 11);
    assert_eq!(r.violations, 0, "{r:?}");
}

#[test]
fn mean_linearized_tube_contains_trajectories() {
    let r = common::containment_monte_carlo(PropagationScheme::MeanLinearized, 2000, 12);
    assert_eq!(r.violations, 0, "{r:?}");
}
