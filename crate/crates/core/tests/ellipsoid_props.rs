//! Property suites for the ellipsoid calculus against independent oracles.

mod common;

use common::{dense_max_scaled_distance, golden_section_trace};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use safempc::ellipsoid::{rect_to_ellipsoid, Ellipsoid, HyperRectangle};

fn spd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |v| {
        let m = DMatrix::from_vec(n, n, v);
        &m * m.transpose() + DMatrix::identity(n, n) * 0.1
    })
}

fn vector(n: usize, r: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-r..r, n).prop_map(DVector::from_vec)
}

fn ellipsoid(n: usize) -> impl Strategy<Value = Ellipsoid> {
    (vector(n, 2.0), spd(n)).prop_map(|(c, q)| Ellipsoid::new(c, q).unwrap())
}

/// A point of `E` from a direction and a radius in `[0, 1]`.
fn point_in(e: &Ellipsoid, dir: &DVector<f64>, radius: f64) -> DVector<f64> {
    let norm = dir.norm();
    let u = if norm > 1e-9 { dir / norm } else { DVector::zeros(dir.len()) };
    e.center() + e.factor() * u * radius
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn affine_image_contains_mapped_points(
        (e, a, b, dirs, radii) in (1usize..=6).prop_flat_map(|n| (
            ellipsoid(n),
            spd(n),
            vector(n, 3.0),
            prop::collection::vec(vector(n, 1.0), 20),
            prop::collection::vec(0.0..=1.0f64, 20),
        ))
    ) {
        let img = e.affine_transform(&a, &b).unwrap();
        for (dir, r) in dirs.iter().zip(&radii) {
            let y = &a * point_in(&e, dir, *r) + &b;
            prop_assert!(img.quadratic_form(&y) <= 1.0 + 1e-9, "q = {}", img.quadratic_form(&y));
        }
        // The map is invertible, so boundary points stay on the boundary.
        if dirs[0].norm() > 1e-3 {
            let y = &a * point_in(&e, &dirs[0], 1.0) + &b;
            prop_assert!((img.quadratic_form(&y) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn minkowski_sum_contains_sums_and_uses_trace_optimal_parameter(
        (e1, e2, d1, d2, r1, r2) in (1usize..=6).prop_flat_map(|n| (
            ellipsoid(n), ellipsoid(n), vector(n, 1.0), vector(n, 1.0), 0.0..=1.0f64, 0.0..=1.0f64,
        ))
    ) {
        let sum = e1.minkowski_sum_outer(&e2, None).unwrap();
        let x = point_in(&e1, &d1, r1) + point_in(&e2, &d2, r2);
        prop_assert!(sum.quadratic_form(&x) <= 1.0 + 1e-9);
        let oracle = golden_section_trace(e1.shape().trace(), e2.shape().trace());
        let got = sum.shape().trace();
        prop_assert!((got - oracle).abs() <= 1e-6 * oracle, "trace {got} vs oracle {oracle}");
        // No other parameter gives a smaller trace.
        for c in [0.1, 0.5, 1.0, 2.0, 10.0] {
            let other = e1.minkowski_sum_outer(&e2, Some(c)).unwrap();
            prop_assert!(got <= other.shape().trace() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn generalized_eigenvalue_matches_dense_oracle(
        (q, s) in (1usize..=6, 1usize..=6).prop_flat_map(|(n, m)| (
            spd(n),
            prop::collection::vec(-2.0..2.0f64, m * n).prop_map(move |v| DMatrix::from_vec(m, n, v)),
        ))
    ) {
        let n = q.nrows();
        let e = Ellipsoid::new(DVector::zeros(n), q.clone()).unwrap();
        let (got, x) = e.max_scaled_distance_pair(&s, None).unwrap();
        let want = dense_max_scaled_distance(&q, &s);
        prop_assert!((got - want).abs() <= 1e-6 * want.max(1e-12), "{got} vs {want}");
        if want > 0.0 {
            // The maximizer lies on the boundary and attains the value.
            prop_assert!((e.quadratic_form(&x) - 1.0).abs() < 1e-8);
            prop_assert!(((&s * &x).norm() - got).abs() <= 1e-6 * got);
        }
    }

    #[test]
    fn rectangle_corners_lie_in_its_ellipsoid(
        (c, b) in (1usize..=6).prop_flat_map(|n| (
            vector(n, 5.0),
            prop::collection::vec(0.0..3.0f64, n).prop_map(DVector::from_vec),
        ))
    ) {
        let rect = HyperRectangle::new(c, b).unwrap();
        let e = rect_to_ellipsoid(&rect, 1e-9).unwrap();
        for corner in rect.corners() {
            prop_assert!(e.quadratic_form(&corner) <= 1.0 + 1e-9);
        }
    }
}

#[test]
fn close_top_eigenvalues_still_converge() {
    // Top eigenvalues 1 and 0.9999 in a rotated basis.
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.9999, 0.3]));
    let (cth, sth) = (0.6f64, 0.8f64);
    let r = DMatrix::from_row_slice(3, 3, &[cth, -sth, 0.0, sth, cth, 0.0, 0.0, 0.0, 1.0]);
    let q = &r * d * r.transpose();
    let e = Ellipsoid::new(DVector::zeros(3), q.clone()).unwrap();
    let s = DMatrix::identity(3, 3);
    let got = e.max_scaled_distance(&s, None).unwrap();
    assert!((got - 1.0).abs() < 1e-12, "{got}");
}
