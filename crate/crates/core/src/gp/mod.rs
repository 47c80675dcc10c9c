//! Independent per-output Gaussian-process regression of the model error.

mod dataset;
mod kernel;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use dataset::Dataset;
pub use kernel::{KernelFamily, KernelSpec};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Standard deviations below this value have their gradient reported as 0.
pub const STD_GRADIENT_FLOOR: f64 = 1e-12;

/// Default cap on the number of training points.
pub const DEFAULT_BUDGET: usize = 150;

static VARIANCE_CLIPS: AtomicUsize = AtomicUsize::new(0);

/// Number of predictive variances that came out negative and were clipped to
/// zero since process start.
pub fn variance_clip_count() -> usize {
    VARIANCE_CLIPS.load(Ordering::Relaxed)
}

fn clip_variance(v: f64) -> f64 {
    if v < 0.0 {
        if v < -1e-12 {
            VARIANCE_CLIPS.fetch_add(1, Ordering::Relaxed);
            log::debug!("negative predictive variance {v:e} clipped to 0");
        }
        0.0
    } else {
        v
    }
}

/// `B + 4λ sqrt(γ + 1 + ln(1/δ))`.
pub fn beta_from_theory(b_g: f64, noise_std: f64, gamma: f64, delta: f64) -> f64 {
    b_g + 4.0 * noise_std * (gamma + 1.0 + (1.0 / delta).ln()).sqrt()
}

/// `½ Σⱼ log det(I + λ⁻² Kⱼ)` for the sample set `inputs`.
pub fn mutual_information(
    kernels: &[KernelSpec],
    inputs: &[DVector<f64>],
    noise_std: f64,
) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let n = inputs.len();
    let inv = 1.0 / (noise_std * noise_std);
    let mut total = 0.0;
    let mut cache: Vec<(&KernelSpec, f64)> = Vec::new();
    for k in kernels {
        if let Some((_, v)) = cache.iter().find(|(c, _)| *c == k) {
            total += v;
            continue;
        }
        let m = DMatrix::identity(n, n) + k.gram(inputs) * inv;
        let v = 0.5 * linalg::log_det_spd(&m)?;
        cache.push((k, v));
        total += v;
    }
    Ok(total)
}

#[derive(Debug, Clone)]
struct FactorGroup {
    kernel: KernelSpec,
    /// Lower Cholesky factor of `K + λ² I`.
    factor: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpJacobians {
    /// `∂μ/∂z`, p×d.
    pub mean: DMatrix<f64>,
    /// `∂σ/∂z`, p×d.
    pub std: DMatrix<f64>,
    /// Outputs whose standard deviation was below [`STD_GRADIENT_FLOOR`].
    pub flat_std: Vec<bool>,
}

/// Mean, variance and their input gradients at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FullPrediction {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub mean_jac: DMatrix<f64>,
    pub var_jac: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GpPosterior {
    input_dim: usize,
    output_dim: usize,
    noise_std: f64,
    beta: f64,
    kernels: Vec<KernelSpec>,
    inputs: Vec<DVector<f64>>,
    groups: Vec<FactorGroup>,
    output_group: Vec<usize>,
    alphas: Vec<DVector<f64>>,
}

impl GpPosterior {
    /// Fits one GP per output dimension. Outputs with identical kernels share
    /// a factorization. An empty dataset yields the prior.
    pub fn fit(data: &Dataset, kernels: &[KernelSpec], beta: f64) -> Result<Self> {
        check_dim(data.output_dim(), kernels.len(), "kernel count")?;
        for k in kernels {
            k.validate()?;
            check_dim(data.input_dim(), k.input_dim(), "kernel input dimension")?;
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidInput(format!("beta must be ≥ 0, got {beta}")));
        }
        let n = data.len();
        let noise_var = data.noise_std() * data.noise_std();
        let mut groups: Vec<FactorGroup> = Vec::new();
        let mut output_group = Vec::with_capacity(kernels.len());
        for k in kernels {
            if let Some(g) = groups.iter().position(|g| &g.kernel == k) {
                output_group.push(g);
                continue;
            }
            let mut gram = k.gram(data.inputs());
            for i in 0..n {
                gram[(i, i)] += noise_var;
            }
            let factor = if n == 0 {
                DMatrix::zeros(0, 0)
            } else {
                linalg::cholesky_with_jitter(&gram)?.0
            };
            groups.push(FactorGroup {
                kernel: k.clone(),
                factor,
            });
            output_group.push(groups.len() - 1);
        }
        let alphas = (0..kernels.len())
            .map(|j| {
                let mut a: Vec<f64> = data.target_column(j).iter().copied().collect();
                let l = &groups[output_group[j]].factor;
                linalg::forward_substitute(l, &mut a);
                linalg::backward_substitute_transpose(l, &mut a);
                DVector::from_vec(a)
            })
            .collect();
        Ok(Self {
            input_dim: data.input_dim(),
            output_dim: data.output_dim(),
            noise_std: data.noise_std(),
            beta,
            kernels: kernels.to_vec(),
            inputs: data.inputs().to_vec(),
            groups,
            output_group,
            alphas,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn kernels(&self) -> &[KernelSpec] {
        &self.kernels
    }

    pub fn num_data(&self) -> usize {
        self.inputs.len()
    }

    pub fn training_inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    /// Lower Cholesky factor used by output `j`.
    pub fn factor(&self, j: usize) -> &DMatrix<f64> {
        &self.groups[self.output_group[j]].factor
    }

    /// Radial terms of `z` against every training input for each group.
    /// Groups whose kernels share lengthscales share the terms.
    fn radial_terms(&self, z: &[f64]) -> Vec<std::rc::Rc<Vec<(f64, f64)>>> {
        let mut out: Vec<std::rc::Rc<Vec<(f64, f64)>>> = Vec::with_capacity(self.groups.len());
        for (gi, g) in self.groups.iter().enumerate() {
            let shared = (0..gi).find(|&h| self.groups[h].kernel.lengthscales == g.kernel.lengthscales);
            match shared {
                Some(h) => {
                    let terms = out[h].clone();
                    out.push(terms);
                }
                None => out.push(std::rc::Rc::new(
                    self.inputs.iter().map(|zi| g.kernel.radial(z, zi.as_slice())).collect(),
                )),
            }
        }
        out
    }

    fn cross_cov(&self, kernel: &KernelSpec, z: &[f64], radial: &[(f64, f64)]) -> Vec<f64> {
        self.inputs
            .iter()
            .zip(radial)
            .map(|(zi, r)| kernel.eval_radial(z, zi.as_slice(), *r))
            .collect()
    }

    fn check_input(&self, z: &DVector<f64>) -> Result<()> {
        check_dim(self.input_dim, z.len(), "GP query input")?;
        if !linalg::all_finite(z) {
            return Err(Error::InvalidInput("non-finite GP query".into()));
        }
        Ok(())
    }

    /// Posterior mean and variance.
    pub fn predict_var(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_input(z)?;
        let zs = z.as_slice();
        let mut mean = DVector::zeros(self.output_dim);
        let mut var = DVector::zeros(self.output_dim);
        let radial = self.radial_terms(zs);
        for (gi, g) in self.groups.iter().enumerate() {
            let kn = self.cross_cov(&g.kernel, zs, &radial[gi]);
            let mut v = kn.clone();
            linalg::forward_substitute(&g.factor, &mut v);
            let s2 = clip_variance(g.kernel.diag(zs) - v.iter().map(|x| x * x).sum::<f64>());
            for j in (0..self.output_dim).filter(|&j| self.output_group[j] == gi) {
                mean[j] = kn.iter().zip(self.alphas[j].iter()).map(|(a, b)| a * b).sum();
                var[j] = s2;
            }
        }
        Ok((mean, var))
    }

    pub fn predict(&self, z: &DVector<f64>) -> Result<Prediction> {
        let (mean, var) = self.predict_var(z)?;
        Ok(Prediction {
            mean,
            std: var.map(f64::sqrt),
        })
    }

    /// Mean, variance and input gradients of both.
    pub fn predict_full(&self, z: &DVector<f64>) -> Result<FullPrediction> {
        self.check_input(z)?;
        let zs = z.as_slice();
        let d = self.input_dim;
        let p = self.output_dim;
        let mut out = FullPrediction {
            mean: DVector::zeros(p),
            var: DVector::zeros(p),
            mean_jac: DMatrix::zeros(p, d),
            var_jac: DMatrix::zeros(p, d),
        };
        let radial = self.radial_terms(zs);
        for (gi, g) in self.groups.iter().enumerate() {
            let kn = self.cross_cov(&g.kernel, zs, &radial[gi]);
            let mut w = kn.clone();
            linalg::forward_substitute(&g.factor, &mut w);
            let s2 = clip_variance(g.kernel.diag(zs) - w.iter().map(|x| x * x).sum::<f64>());
            linalg::backward_substitute_transpose(&g.factor, &mut w);
            let outs: Vec<usize> = (0..p).filter(|&j| self.output_group[j] == gi).collect();
            let mut coeffs: Vec<&[f64]> = outs.iter().map(|&j| self.alphas[j].as_slice()).collect();
            coeffs.push(&w);
            let mut sums = g.kernel.grad_first_combinations(zs, &self.inputs, &radial[gi], &coeffs);
            let var_grad = g.kernel.diag_grad(zs) - sums.pop().expect("variance term") * 2.0;
            for (&j, mg) in outs.iter().zip(&sums) {
                out.mean[j] = kn.iter().zip(self.alphas[j].iter()).map(|(a, b)| a * b).sum();
                out.var[j] = s2;
                out.mean_jac.set_row(j, &mg.transpose());
                out.var_jac.set_row(j, &var_grad.transpose());
            }
        }
        Ok(out)
    }

    pub fn predict_jacobians(&self, z: &DVector<f64>) -> Result<GpJacobians> {
        let full = self.predict_full(z)?;
        let mut std = DMatrix::zeros(self.output_dim, self.input_dim);
        let mut flat_std = vec![false; self.output_dim];
        for (j, flat) in flat_std.iter_mut().enumerate() {
            let s = full.var[j].sqrt();
            if s < STD_GRADIENT_FLOOR {
                *flat = true;
            } else {
                std.set_row(j, &(full.var_jac.row(j) / (2.0 * s)));
            }
        }
        Ok(GpJacobians {
            mean: full.mean_jac,
            std,
            flat_std,
        })
    }

    /// `Σⱼ Σₐ Wⱼₐ ∂²μⱼ/∂z∂zₐ`, i.e. the gradient of `⟨W, ∂μ/∂z⟩` with respect
    /// to `z`.
    pub fn mean_jacobian_vjp(&self, z: &DVector<f64>, weights: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_input(z)?;
        check_dim(self.output_dim, weights.nrows(), "mean Jacobian cotangent rows")?;
        check_dim(self.input_dim, weights.ncols(), "mean Jacobian cotangent cols")?;
        let zs = z.as_slice();
        let d = self.input_dim;
        let mut out = DVector::zeros(d);
        let radial = self.radial_terms(zs);
        for (gi, g) in self.groups.iter().enumerate() {
            let outs: Vec<usize> = (0..self.output_dim)
                .filter(|&j| self.output_group[j] == gi)
                .collect();
            for (i, zi) in self.inputs.iter().enumerate() {
                let mut c = DVector::zeros(d);
                for &j in &outs {
                    c.axpy(self.alphas[j][i], &weights.row(j).transpose(), 1.0);
                }
                if c.iter().all(|&v| v == 0.0) {
                    continue;
                }
                out += g.kernel.hessian_first_apply(zs, zi.as_slice(), radial[gi][i], c.as_slice());
            }
        }
        Ok(out)
    }
}

/// Greedy maximum-variance ordering: repeatedly picks the candidate with the
/// largest summed predictive variance given the points picked so far. Ties go
/// to the lowest index. Returns indices in pick order.
pub fn max_variance_order(
    candidates: &Dataset,
    kernels: &[KernelSpec],
    budget: usize,
) -> Result<Vec<usize>> {
    if budget == 0 {
        return Err(Error::InvalidInput("budget must be ≥ 1".into()));
    }
    check_dim(candidates.output_dim(), kernels.len(), "kernel count")?;
    let n = candidates.len();
    let z = candidates.inputs();
    let noise_var = candidates.noise_std().powi(2);
    let mut distinct: Vec<(&KernelSpec, usize)> = Vec::new();
    for k in kernels {
        if let Some(e) = distinct.iter_mut().find(|(c, _)| *c == k) {
            e.1 += 1;
        } else {
            distinct.push((k, 1));
        }
    }
    // Pivoted incomplete Cholesky of K + λ²I, one per distinct kernel.
    let mut resid: Vec<Vec<f64>> = distinct
        .iter()
        .map(|(k, _)| z.iter().map(|zi| k.diag(zi.as_slice()) + noise_var).collect())
        .collect();
    let mut cols: Vec<Vec<Vec<f64>>> = vec![Vec::new(); distinct.len()];
    let mut picked = vec![false; n];
    let mut order = Vec::with_capacity(budget.min(n));
    while order.len() < budget.min(n) {
        let mut best = None;
        let mut best_score = f64::NEG_INFINITY;
        for i in (0..n).filter(|&i| !picked[i]) {
            let score: f64 = distinct
                .iter()
                .enumerate()
                .map(|(g, (_, mult))| *mult as f64 * (resid[g][i] - noise_var))
                .sum();
            if score > best_score {
                best_score = score;
                best = Some(i);
            }
        }
        let piv = best.expect("an unpicked candidate remains");
        picked[piv] = true;
        order.push(piv);
        for (g, (k, _)) in distinct.iter().enumerate() {
            let d = resid[g][piv].max(1e-300).sqrt();
            let col: Vec<f64> = (0..n)
                .map(|i| {
                    if picked[i] {
                        return 0.0;
                    }
                    let mut a = k.eval(z[i].as_slice(), z[piv].as_slice());
                    for c in &cols[g] {
                        a -= c[i] * c[piv];
                    }
                    a / d
                })
                .collect();
            for i in 0..n {
                resid[g][i] -= col[i] * col[i];
            }
            cols[g].push(col);
        }
    }
    Ok(order)
}

/// Subset of at most `budget` candidates chosen by [`max_variance_order`],
/// returned in original order.
pub fn max_variance_subselect(
    candidates: &Dataset,
    kernels: &[KernelSpec],
    budget: usize,
) -> Result<Dataset> {
    let mut idx = max_variance_order(candidates, kernels, budget)?;
    idx.sort_unstable();
    Ok(candidates.subset(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn unit_kernel() -> KernelSpec {
        KernelSpec::matern52(vec![1.0], 1.0)
    }

    #[test]
    fn scalar_closed_form() {
        let ds = Dataset::from_pairs(vec![dvector![0.0]], vec![dvector![2.0]], 1.0).unwrap();
        let gp = GpPosterior::fit(&ds, &[unit_kernel()], 2.0).unwrap();
        let (m, v) = gp.predict_var(&dvector![0.0]).unwrap();
        assert_relative_eq!(m[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(v[0], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn empty_dataset_is_prior() {
        let ds = Dataset::new(2, 1, 0.1).unwrap();
        let gp = GpPosterior::fit(&ds, &[KernelSpec::matern52(vec![1.0, 1.0], 3.0)], 2.0).unwrap();
        let p = gp.predict(&dvector![0.4, 0.2]).unwrap();
        assert_eq!(p.mean[0], 0.0);
        assert_relative_eq!(p.std[0], 3.0f64.sqrt());
    }

    #[test]
    fn beta_formula() {
        assert_eq!(beta_from_theory(0.0, 0.0, 5.0, 0.1), 0.0);
        let b = beta_from_theory(1.0, 0.1, 0.0, (-1.0f64).exp());
        assert_relative_eq!(b, 1.0 + 0.4 * 2.0f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn mutual_information_closed_forms() {
        assert_eq!(mutual_information(&[unit_kernel()], &[], 1.0).unwrap(), 0.0);
        let mi = mutual_information(&[unit_kernel()], &[dvector![0.3]], 1.0).unwrap();
        assert_relative_eq!(mi, 0.5 * 2.0f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn duplicate_point_adds_less_information() {
        let k = [unit_kernel()];
        let base = vec![dvector![0.0]];
        let dup = vec![dvector![0.0], dvector![0.0]];
        let far = vec![dvector![0.0], dvector![10.0]];
        let b = mutual_information(&k, &base, 0.5).unwrap();
        let d = mutual_information(&k, &dup, 0.5).unwrap();
        let f = mutual_information(&k, &far, 0.5).unwrap();
        assert!(d - b < f - b);
    }

    #[test]
    fn subselect_prefers_distant_point() {
        let ds = Dataset::from_pairs(
            vec![dvector![0.0], dvector![0.0], dvector![5.0]],
            vec![dvector![0.0], dvector![0.0], dvector![0.0]],
            0.01,
        )
        .unwrap();
        let order = max_variance_order(&ds, &[unit_kernel()], 2).unwrap();
        assert_eq!(order, vec![0, 2]);
    }

    #[test]
    fn subselect_keeps_everything_under_budget() {
        let ds = Dataset::from_pairs(
            vec![dvector![3.0], dvector![1.0], dvector![2.0]],
            vec![dvector![0.1], dvector![0.2], dvector![0.3]],
            0.01,
        )
        .unwrap();
        let sub = max_variance_subselect(&ds, &[unit_kernel()], 5).unwrap();
        assert_eq!(sub, ds);
    }

    #[test]
    fn flat_std_is_flagged() {
        let ds = Dataset::from_pairs(vec![dvector![0.0]], vec![dvector![1.0]], 1e-9).unwrap();
        let k = KernelSpec::matern52(vec![1.0], 1e-26);
        let gp = GpPosterior::fit(&ds, &[k], 2.0).unwrap();
        let j = gp.predict_jacobians(&dvector![0.0]).unwrap();
        assert!(j.flat_std[0]);
        assert_eq!(j.std[(0, 0)], 0.0);
    }

    #[test]
    fn mean_jacobian_vjp_matches_finite_differences() {
        let ds = Dataset::from_pairs(
            vec![dvector![0.1, 0.2], dvector![-0.5, 0.3], dvector![0.4, -0.6]],
            vec![dvector![1.0, 0.0], dvector![-0.5, 0.2], dvector![0.3, 0.7]],
            0.1,
        )
        .unwrap();
        let kernels = vec![
            KernelSpec::sum(vec![0.8, 0.5], 1.2, vec![0.3, 0.1]),
            KernelSpec::matern52(vec![0.6, 0.9], 0.7),
        ];
        let gp = GpPosterior::fit(&ds, &kernels, 2.0).unwrap();
        let w = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 0.5, 2.0]);
        let z = dvector![0.05, -0.1];
        let an = gp.mean_jacobian_vjp(&z, &w).unwrap();
        let h = 1e-6;
        for a in 0..2 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[a] += h;
            zm[a] -= h;
            let fp = gp.predict_full(&zp).unwrap().mean_jac.component_mul(&w).sum();
            let fm = gp.predict_full(&zm).unwrap().mean_jac.component_mul(&w).sum();
            assert_relative_eq!((fp - fm) / (2.0 * h), an[a], epsilon = 1e-6);
        }
    }
}
