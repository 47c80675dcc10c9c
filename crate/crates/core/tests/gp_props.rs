//! GP posterior, Jacobians and mutual information against independent
//! dense oracles.

mod common;

use common::{dense_posterior, OracleKernel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use safempc::gp::{mutual_information, Dataset, GpPosterior, KernelSpec};

const NOISE_STD: f64 = 0.1;

fn kernel(d: usize) -> impl Strategy<Value = OracleKernel> {
    (
        prop::collection::vec(0.3..3.0f64, d),
        0.1..2.0f64,
        prop::collection::vec(0.0..1.0f64, d),
    )
        .prop_map(|(lengthscales, signal_variance, linear_weights)| OracleKernel {
            lengthscales,
            signal_variance,
            linear_weights,
        })
}

fn point(d: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-2.0..2.0f64, d).prop_map(DVector::from_vec)
}

#[derive(Debug, Clone)]
struct Case {
    kernels: Vec<OracleKernel>,
    inputs: Vec<DVector<f64>>,
    targets: Vec<DVector<f64>>,
    query: DVector<f64>,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..=4, 1usize..=3, 0usize..=15).prop_flat_map(|(d, p, n)| {
        (
            prop::collection::vec(kernel(d), p),
            prop::collection::vec(point(d), n),
            prop::collection::vec(prop::collection::vec(-1.0..1.0f64, p).prop_map(DVector::from_vec), n),
            point(d),
        )
            .prop_map(|(kernels, inputs, targets, query)| Case {
                kernels,
                inputs,
                targets,
                query,
            })
    })
}

fn fit(c: &Case) -> GpPosterior {
    let d = c.query.len();
    let p = c.kernels.len();
    let mut data = Dataset::new(d, p, NOISE_STD).unwrap();
    for (z, y) in c.inputs.iter().zip(&c.targets) {
        data.push(z.clone(), y.clone()).unwrap();
    }
    let specs: Vec<KernelSpec> = c.kernels.iter().map(OracleKernel::spec).collect();
    GpPosterior::fit(&data, &specs, 2.0).unwrap()
}

fn dense_output(c: &Case, j: usize) -> (f64, f64) {
    let targets: Vec<f64> = c.targets.iter().map(|y| y[j]).collect();
    dense_posterior(&c.kernels[j], &c.inputs, &targets, NOISE_STD, &c.query)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn posterior_matches_dense_oracle(c in case()) {
        let gp = fit(&c);
        let (mean, var) = gp.predict_var(&c.query).unwrap();
        for j in 0..c.kernels.len() {
            let (m, v) = dense_output(&c, j);
            prop_assert!((mean[j] - m).abs() <= 1e-8 * (1.0 + m.abs()), "mean {} vs {}", mean[j], m);
            prop_assert!((var[j] - v.max(0.0)).abs() <= 1e-8 * (1.0 + v.abs()), "var {} vs {}", var[j], v);
        }
    }

    #[test]
    fn jacobians_match_central_differences(c in case()) {
        let gp = fit(&c);
        let jac = gp.predict_jacobians(&c.query).unwrap();
        let d = c.query.len();
        let h = 1e-6;
        let mut fd_mean = DMatrix::zeros(c.kernels.len(), d);
        let mut fd_std = DMatrix::zeros(c.kernels.len(), d);
        for i in 0..d {
            let mut zp = c.query.clone();
            let mut zm = c.query.clone();
            zp[i] += h;
            zm[i] -= h;
            let pp = gp.predict(&zp).unwrap();
            let pm = gp.predict(&zm).unwrap();
            fd_mean.set_column(i, &((pp.mean - pm.mean) / (2.0 * h)));
            fd_std.set_column(i, &((pp.std - pm.std) / (2.0 * h)));
        }
        let scale = fd_mean.amax().max(1e-3);
        prop_assert!((&jac.mean - &fd_mean).amax() <= 1e-4 * scale, "{} vs {}", jac.mean, fd_mean);
        for j in 0..c.kernels.len() {
            if jac.flat_std[j] {
                continue;
            }
            let row_fd = fd_std.row(j);
            let scale = row_fd.amax().max(1e-3);
            prop_assert!((jac.std.row(j) - row_fd).amax() <= 1e-4 * scale, "{} vs {}", jac.std.row(j), row_fd);
        }
    }

    #[test]
    fn mutual_information_is_monotone(
        (kernels, inputs) in (1usize..=4, 1usize..=3).prop_flat_map(|(d, p)| (
            prop::collection::vec(kernel(d), p),
            prop::collection::vec(point(d), 1..25),
        ))
    ) {
        let specs: Vec<KernelSpec> = kernels.iter().map(OracleKernel::spec).collect();
        let mut prev = 0.0;
        for k in 0..=inputs.len() {
            let mi = mutual_information(&specs, &inputs[..k], NOISE_STD).unwrap();
            prop_assert!(mi >= prev - 1e-10, "MI dropped from {prev} to {mi} at {k}");
            prev = mi;
        }
    }
}

#[test]
fn repeated_point_still_adds_information() {
    let k = OracleKernel {
        lengthscales: vec![1.0],
        signal_variance: 1.0,
        linear_weights: vec![0.0],
    };
    let z = DVector::from_vec(vec![0.3]);
    let one = mutual_information(&[k.spec()], std::slice::from_ref(&z), NOISE_STD).unwrap();
    let two = mutual_information(&[k.spec()], &[z.clone(), z], NOISE_STD).unwrap();
    // ½ log(1 + n σ²/λ²) for n copies of one point.
    assert!((one - 0.5 * (1.0f64 + 100.0).ln()).abs() < 1e-12);
    assert!((two - 0.5 * (1.0f64 + 200.0).ln()).abs() < 1e-12);
}
