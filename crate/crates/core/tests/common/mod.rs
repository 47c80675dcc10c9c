//! Independent oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use safempc::ellipsoid::Ellipsoid;
use safempc::env::{EnvConfig, EnvSpec};
use safempc::gp::{Dataset, GpPosterior, KernelSpec};
use safempc::propagation::{LipschitzConstants, PriorModel, PropagationScheme, Propagator, Reachability};

pub fn random_spd<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&m * m.transpose() + DMatrix::identity(n, n) * 0.1) * scale
}

/// `max ‖S x‖` over `E(0, Q)` as the square root of the largest eigenvalue
/// of `Q^{1/2} SᵀS Q^{1/2}` from a full symmetric eigendecomposition.
pub fn dense_max_scaled_distance(q: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    let eq = SymmetricEigen::new(q.clone());
    let root = &eq.eigenvectors * DMatrix::from_diagonal(&eq.eigenvalues.map(f64::sqrt)) * eq.eigenvectors.transpose();
    let m = &root * s.transpose() * s * &root;
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m).eigenvalues.max().max(0.0).sqrt()
}

/// Golden-section minimization of `c ↦ Tr((1 + 1/c) Q1 + (1 + c) Q2)` on a
/// log scale, given the two traces.
pub fn golden_section_trace(t1: f64, t2: f64) -> f64 {
    let f = |lc: f64| {
        let c = lc.exp();
        (1.0 + 1.0 / c) * t1 + (1.0 + c) * t2
    };
    let (mut a, mut b) = (-30.0f64, 30.0f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let x1 = b - g * (b - a);
        let x2 = a + g * (b - a);
        if f(x1) < f(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    f((a + b) / 2.0)
}

/// Sum of a linear and a Matérn-5/2 kernel, evaluated without the library.
#[derive(Debug, Clone)]
pub struct OracleKernel {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub linear_weights: Vec<f64>,
}

impl OracleKernel {
    pub fn random<R: Rng>(rng: &mut R, d: usize) -> Self {
        Self {
            lengthscales: (0..d).map(|_| rng.random_range(0.3..3.0)).collect(),
            signal_variance: rng.random_range(0.1..2.0),
            linear_weights: (0..d).map(|_| rng.random_range(0.0..1.0)).collect(),
        }
    }

    pub fn spec(&self) -> KernelSpec {
        KernelSpec::sum(self.lengthscales.clone(), self.signal_variance, self.linear_weights.clone())
    }

    pub fn eval(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let mut lin = 0.0;
        let mut r2 = 0.0;
        for i in 0..a.len() {
            lin += self.linear_weights[i] * a[i] * b[i];
            r2 += ((a[i] - b[i]) / self.lengthscales[i]).powi(2);
        }
        let s = (5.0 * r2).sqrt();
        lin + self.signal_variance * (1.0 + s + s * s / 3.0) * (-s).exp()
    }
}

/// Posterior mean and variance of one output through an explicit inverse of
/// the regularized Gram matrix.
pub fn dense_posterior(
    k: &OracleKernel,
    inputs: &[DVector<f64>],
    targets: &[f64],
    noise_std: f64,
    z: &DVector<f64>,
) -> (f64, f64) {
    let n = inputs.len();
    let prior = k.eval(z, z);
    if n == 0 {
        return (0.0, prior);
    }
    let gram = DMatrix::from_fn(n, n, |a, b| {
        k.eval(&inputs[a], &inputs[b]) + if a == b { noise_std * noise_std } else { 0.0 }
    });
    let inv = gram.try_inverse().expect("regularized Gram matrix is invertible");
    let ks = DVector::from_fn(n, |a, _| k.eval(z, &inputs[a]));
    let y = DVector::from_column_slice(targets);
    let mean = ks.dot(&(&inv * y));
    let var = prior - ks.dot(&(&inv * &ks));
    (mean, var)
}

/// Sample mean and standard error of `1 − exp(−½ (x−g)ᵀ W (x−g))` for
/// `x ∼ N(m, S)`.
pub fn saturating_monte_carlo<R: Rng>(
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    goal: &DVector<f64>,
    w: &DMatrix<f64>,
    samples: usize,
    rng: &mut R,
) -> (f64, f64) {
    let p = m.len();
    let l = s.clone().cholesky().expect("covariance is SPD").l();
    let mut xi = vec![0.0; p];
    let mut d = vec![0.0; p];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..p {
            let mut acc = m[i] - goal[i];
            for k in 0..=i {
                acc += l[(i, k)] * xi[k];
            }
            d[i] = acc;
        }
        let mut quad = 0.0;
        for i in 0..p {
            for k in 0..p {
                quad += d[i] * w[(i, k)] * d[k];
            }
        }
        let c = 1.0 - (-0.5 * quad).exp();
        sum += c;
        sum_sq += c * c;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy)]
pub struct Containment {
    pub trajectories: usize,
    /// Trajectories that left at least one propagated ellipsoid.
    pub violations: usize,
    /// Largest `(x − c)ᵀ Q⁻¹ (x − c)` over all checked states.
    pub worst: f64,
}

const CONTAINMENT_HORIZON: usize = 5;
const CONTAINMENT_BETA: f64 = 2.0;
/// Bound on each component of the frequencies of the synthetic errors.
const CONTAINMENT_OMEGA: f64 = 0.5;
/// Factor applied to the sampled Lipschitz and curvature bounds.
const CONTAINMENT_MARGIN: f64 = 1.25;

/// Simulates pendulum trajectories under a fixed T-step plan where the model
/// error is `μ(z) + β σ(z) ⊙ s(z)` with `s` an arbitrary smooth map into
/// `[−1, 1]ᵖ`, and checks every state against the propagated ellipsoid.
///
/// The remainder constants are sampled bounds for this error family over a
/// region that the test asserts covers every propagated ellipsoid.
pub fn containment_monte_carlo(scheme: PropagationScheme, trajectories: usize, seed: u64) -> Containment {
    let spec = EnvSpec::from_config(&EnvConfig::pendulum()).unwrap();
    let p = spec.state_dim();
    let q = spec.input_dim();
    let d = p + q;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xlo, xhi) = spec.exploration_box(1.0);
    let (ulo, uhi) = spec.dynamics.input_bounds();

    let mut data = Dataset::new(d, p, spec.config.obs_noise_std).unwrap();
    for _ in 0..30 {
        let x = DVector::from_fn(p, |i, _| rng.random_range(xlo[i]..xhi[i]));
        let u = DVector::from_fn(q, |i, _| rng.random_range(ulo[i]..uhi[i]));
        let y = spec.observe_error(&x, &u, &mut rng).unwrap();
        data.push(concat(&x, &u), y).unwrap();
    }
    let gp = GpPosterior::fit(&data, &spec.kernels, CONTAINMENT_BETA).unwrap();

    let r0 = Ellipsoid::new(&xhi * 0.1, DMatrix::from_diagonal(&(&xhi * 0.02).map(|v| v * v))).unwrap();
    let gains = vec![spec.safety.gain.clone(); CONTAINMENT_HORIZON];
    let offsets: Vec<DVector<f64>> = (0..CONTAINMENT_HORIZON)
        .map(|_| DVector::from_fn(q, |i, _| 0.1 * rng.random_range(ulo[i]..uhi[i])))
        .collect();

    // The constants are sampled over a box that grows until it covers every
    // propagated input ellipsoid and the plan inputs on it. Inputs are
    // applied unclipped.
    let mut lo = concat(&(&xlo * 0.5), &ulo);
    let mut hi = concat(&(&xhi * 0.5), &uhi);
    let mut tube = None;
    for _ in 0..8 {
        let lc = sampled_constants(&gp, &lo, &hi, &mut rng);
        let reach = Propagator::new(&spec.prior, &gp, &lc, scheme)
            .multi_step(&r0, &gains, &offsets)
            .unwrap();
        let (need_lo, need_hi) = tube_hull(&r0, &reach);
        if (0..d).all(|i| need_lo[i] >= lo[i] && need_hi[i] <= hi[i]) {
            tube = Some(reach);
            break;
        }
        let width = &hi - &lo;
        lo = lo.zip_zip_map(&need_lo, &width, |a, b, w| a.min(b - 0.1 * w));
        hi = hi.zip_zip_map(&need_hi, &width, |a, b, w| a.max(b + 0.1 * w));
    }
    let reach = tube.expect("propagated tube does not settle inside the sampled region");

    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for n in 0..trajectories {
        let (omega, phase) = if n % 5 == 0 {
            // Constant worst-case signs.
            let phase = (0..p).map(|_| if rng.random_bool(0.5) { PI / 2.0 } else { -PI / 2.0 }).collect();
            (vec![DVector::zeros(d); p], phase)
        } else {
            let omega = (0..p)
                .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-CONTAINMENT_OMEGA..CONTAINMENT_OMEGA)))
                .collect();
            let phase = (0..p).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            (omega, phase)
        };
        let phase: Vec<f64> = phase;
        let mut x = r0.sample_uniform(&mut rng);
        let mut bad = false;
        for t in 0..CONTAINMENT_HORIZON {
            let u = reach.laws[t].eval(&x);
            let z = concat(&x, &u);
            let pred = gp.predict(&z).unwrap();
            let s = DVector::from_fn(p, |j, _| (omega[j].dot(&z) + phase[j]).sin());
            x = spec.prior.eval(&x, &u) + pred.mean + (pred.std * CONTAINMENT_BETA).component_mul(&s);
            let qf = reach.ellipsoids[t].quadratic_form(&x);
            worst = worst.max(qf);
            bad |= qf > 1.0 + 1e-9;
        }
        violations += usize::from(bad);
    }
    Containment {
        trajectories,
        violations,
        worst,
    }
}

fn sampled_constants<R: Rng>(gp: &GpPosterior, lo: &DVector<f64>, hi: &DVector<f64>, rng: &mut R) -> LipschitzConstants {
    let d = lo.len();
    let p = gp.output_dim();
    let h = 1e-5;
    let mut lg: f64 = 0.0;
    let mut lsigma: f64 = 0.0;
    let mut lmu = vec![0.0f64; p];
    for _ in 0..4000 {
        let z = DVector::from_fn(d, |i, _| rng.random_range(lo[i]..hi[i]));
        let pred = gp.predict(&z).unwrap();
        let jac = gp.predict_jacobians(&z).unwrap();
        let mut hess = vec![DMatrix::zeros(d, d); p];
        for k in 0..d {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[k] += h;
            zm[k] -= h;
            let col = (gp.predict_jacobians(&zp).unwrap().mean - gp.predict_jacobians(&zm).unwrap().mean) / (2.0 * h);
            for (j, hj) in hess.iter_mut().enumerate() {
                hj.set_column(k, &col.row(j).transpose());
            }
        }
        for j in 0..p {
            let gm = jac.mean.row(j).norm();
            let gs = jac.std.row(j).norm();
            let omega = CONTAINMENT_OMEGA * (d as f64).sqrt();
            lg = lg.max(gm + CONTAINMENT_BETA * (gs + pred.std[j] * omega));
            lsigma = lsigma.max(gs);
            let hs = (&hess[j] + hess[j].transpose()) * 0.5;
            lmu[j] = lmu[j].max(hs.symmetric_eigenvalues().amax());
        }
    }
    LipschitzConstants {
        grad_h: vec![0.0; p],
        g: CONTAINMENT_MARGIN * lg,
        grad_mu: lmu.iter().map(|v| CONTAINMENT_MARGIN * v).collect(),
        sigma: CONTAINMENT_MARGIN * lsigma,
    }
}

/// Bounding box in `(x, u)` of the input ellipsoids `R₀..R_{T−1}` and the
/// plan inputs on them.
fn tube_hull(r0: &Ellipsoid, reach: &Reachability) -> (DVector<f64>, DVector<f64>) {
    let p = r0.dim();
    let q = reach.laws[0].offset.len();
    let mut lo = DVector::from_element(p + q, f64::INFINITY);
    let mut hi = DVector::from_element(p + q, f64::NEG_INFINITY);
    let inputs = std::iter::once(r0).chain(&reach.ellipsoids[..reach.ellipsoids.len() - 1]);
    for (e, law) in inputs.zip(&reach.laws) {
        for i in 0..p {
            let r = e.support_radius(&unit(p, i));
            lo[i] = lo[i].min(e.center()[i] - r);
            hi[i] = hi[i].max(e.center()[i] + r);
        }
        for i in 0..q {
            let r = e.support_radius(&law.gain.row(i).transpose());
            lo[p + i] = lo[p + i].min(law.offset[i] - r);
            hi[p + i] = hi[p + i].max(law.offset[i] + r);
        }
    }
    (lo, hi)
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}
