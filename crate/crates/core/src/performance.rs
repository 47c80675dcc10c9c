//! Gaussian-belief performance trajectories, their expected costs, and the
//! reverse-mode gradient of a discounted belief rollout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gp::{FullPrediction, GpPosterior};
use crate::linalg;
use crate::propagation::PriorModel;

/// `X ∼ N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), cov.nrows(), "belief covariance rows")?;
        check_dim(mean.len(), cov.ncols(), "belief covariance cols")?;
        let eigs = linalg::symmetrize(&cov).symmetric_eigenvalues();
        if eigs.iter().any(|&v| v < -1e-10) {
            return Err(Error::InvalidInput("belief covariance is not PSD".into()));
        }
        Ok(Self {
            mean,
            cov: linalg::clip_psd(&cov).0,
        })
    }

    pub fn point(mean: DVector<f64>) -> Self {
        let p = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(p, p),
        }
    }
}

/// First-order moment matching through `x⁺ = h(x, u) + g(x, u)`:
/// `m' = h(m, u) + μ(m, u)`, `S' = J S Jᵀ + diag(σ²(m, u))` with `J` the state
/// Jacobian of `h + μ` at `(m, u)`.
pub fn moment_propagate(
    belief: &GaussianBelief,
    u: &DVector<f64>,
    gp: &GpPosterior,
    prior: &dyn PriorModel,
) -> Result<GaussianBelief> {
    let p = belief.mean.len();
    let z = linalg::concat(&belief.mean, u);
    let pred = gp.predict_full(&z)?;
    let (ah, _) = prior.jacobian(&belief.mean, u);
    let j = ah + pred.mean_jac.columns(0, p);
    let mean = prior.eval(&belief.mean, u) + &pred.mean;
    let cov = &j * &belief.cov * j.transpose() + DMatrix::from_diagonal(&pred.var);
    let (cov, _) = linalg::clip_psd(&cov);
    Ok(GaussianBelief { mean, cov })
}

/// `E[1 − exp(−½ (x−x_g)ᵀ W (x−x_g))]` for `x ∼ N(m, S)`.
pub fn expected_saturating_cost(belief: &GaussianBelief, goal: &DVector<f64>, w: &DMatrix<f64>) -> Result<f64> {
    Ok(saturating_cost_with_grad(&belief.mean, &belief.cov, goal, w)?.0)
}

/// Value and gradients `(E, ∂E/∂m, ∂E/∂S)` of the expected saturating cost.
///
/// With `Ŵ = W (I + S W)⁻¹` and `δ = m − x_g`, `E = 1 − q` where
/// `q = det(I + S W)^{−1/2} exp(−½ δᵀ Ŵ δ)`.
pub fn saturating_cost_with_grad(
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    goal: &DVector<f64>,
    w: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let p = m.len();
    check_dim(p, goal.len(), "goal")?;
    check_dim(p, w.nrows(), "cost weight")?;
    let a = DMatrix::identity(p, p) + s * w;
    let lu = a.clone().lu();
    let det = lu.determinant();
    if !(det > 1e-12) {
        return Err(Error::InvalidInput(format!(
            "I + S W is near-singular (determinant {det:e})"
        )));
    }
    let ainv = lu
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("I + S W is singular".into()))?;
    let what = linalg::symmetrize(&(w * ainv));
    let delta = m - goal;
    let wd = &what * &delta;
    let q = det.powf(-0.5) * (-0.5 * delta.dot(&wd)).exp();
    let dm = &wd * q;
    let ds = (&what - &wd * wd.transpose()) * (q / 2.0);
    Ok((1.0 - q, dm, ds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerformanceCost {
    /// Expected saturating cost towards `goal`.
    Saturating { goal: Vec<f64>, weight: Vec<Vec<f64>> },
    /// `−tr(S^{1/2}) + (m − p)ᵀ Q (m − p)` where `p` is the safety-trajectory
    /// center at the same time step, when one exists.
    ConfidenceMinusDeviation { deviation_weight: Vec<Vec<f64>> },
}

impl PerformanceCost {
    /// Whether the stage cost depends on the safety-trajectory centers.
    pub fn uses_anchors(&self) -> bool {
        matches!(self, Self::ConfidenceMinusDeviation { .. })
    }
}

/// Objective value with its cotangents for each belief mean and covariance.
pub type ObjectiveValue = (f64, Vec<DVector<f64>>, Vec<DMatrix<f64>>);

/// Discounted sum `Σ_{t<H} γᵗ c(X_{t+1})` over a belief rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceObjective {
    pub cost: PerformanceCost,
    pub discount: f64,
}

fn matrix_from_rows(rows: &[Vec<f64>], p: usize) -> Result<DMatrix<f64>> {
    check_dim(p, rows.len(), "weight matrix rows")?;
    for r in rows {
        check_dim(p, r.len(), "weight matrix cols")?;
    }
    Ok(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
}

impl PerformanceObjective {
    pub fn validate(&self, p: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidInput(format!(
                "discount must lie in [0, 1), got {}",
                self.discount
            )));
        }
        let w = match &self.cost {
            PerformanceCost::Saturating { goal, weight } => {
                check_dim(p, goal.len(), "goal")?;
                matrix_from_rows(weight, p)?
            }
            PerformanceCost::ConfidenceMinusDeviation { deviation_weight } => {
                matrix_from_rows(deviation_weight, p)?
            }
        };
        if w.symmetric_eigenvalues().iter().any(|&v| v < -1e-12) {
            return Err(Error::InvalidInput("cost weight must be PSD".into()));
        }
        Ok(())
    }

    /// Stage cost of the belief at step `t + 1` with its gradients.
    fn stage(
        &self,
        m: &DVector<f64>,
        s: &DMatrix<f64>,
        anchor: Option<&DVector<f64>>,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let p = m.len();
        match &self.cost {
            PerformanceCost::Saturating { goal, weight } => {
                let w = matrix_from_rows(weight, p)?;
                saturating_cost_with_grad(m, s, &DVector::from_column_slice(goal), &w)
            }
            PerformanceCost::ConfidenceMinusDeviation { deviation_weight } => {
                let (tr, dtr) = sqrt_trace_with_grad(s);
                let mut v = -tr;
                let ds = -dtr;
                let mut dm = DVector::zeros(p);
                if let Some(a) = anchor {
                    let qw = matrix_from_rows(deviation_weight, p)?;
                    let e = m - a;
                    let qe = &qw * &e;
                    v += e.dot(&qe);
                    dm += (&qw + qw.transpose()) * &e;
                }
                Ok((v, dm, ds))
            }
        }
    }

    /// Objective of a belief rollout, with the cotangents with respect to
    /// each belief `X_1..X_H`. `anchors[t]` is the safety center paired with
    /// `X_{t+1}`.
    pub fn evaluate(
        &self,
        rollout: &BeliefRollout,
        anchors: &[DVector<f64>],
    ) -> Result<ObjectiveValue> {
        let h = rollout.horizon();
        let mut total = 0.0;
        let mut mbar = Vec::with_capacity(h);
        let mut sbar = Vec::with_capacity(h);
        let mut weight = 1.0;
        for t in 0..h {
            let (v, dm, ds) = self.stage(&rollout.means[t + 1], &rollout.covs[t + 1], anchors.get(t))?;
            total += weight * v;
            mbar.push(dm * weight);
            sbar.push(ds * weight);
            weight *= self.discount;
        }
        Ok((total, mbar, sbar))
    }
}

/// `tr(S^{1/2})` and its gradient `½ S^{−1/2}` (eigenvalues floored).
fn sqrt_trace_with_grad(s: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let eig = linalg::symmetrize(s).symmetric_eigen();
    let floor = 1e-12;
    let tr = eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let d = eig.eigenvalues.map(|v| 0.5 / v.max(floor).sqrt());
    let g = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    (tr, g)
}

/// Forward pass of a belief rollout `X_0 → X_1 → … → X_H` with everything the
/// reverse pass needs.
#[derive(Debug, Clone)]
pub struct BeliefRollout {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub inputs: Vec<DVector<f64>>,
    preds: Vec<FullPrediction>,
    jacobians: Vec<DMatrix<f64>>,
}

impl BeliefRollout {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn beliefs(&self) -> Vec<GaussianBelief> {
        self.means
            .iter()
            .zip(&self.covs)
            .map(|(m, s)| GaussianBelief {
                mean: m.clone(),
                cov: s.clone(),
            })
            .collect()
    }
}

/// Rolls the moment-matched belief forward under open-loop `inputs`.
pub fn rollout_beliefs(
    prior: &dyn PriorModel,
    gp: &GpPosterior,
    start: &GaussianBelief,
    inputs: &[DVector<f64>],
) -> Result<BeliefRollout> {
    let p = start.mean.len();
    let mut means = vec![start.mean.clone()];
    let mut covs = vec![start.cov.clone()];
    let mut preds = Vec::with_capacity(inputs.len());
    let mut jacobians = Vec::with_capacity(inputs.len());
    for u in inputs {
        let m = means.last().unwrap();
        let s = covs.last().unwrap();
        let z = linalg::concat(m, u);
        let pred = gp.predict_full(&z)?;
        let (ah, _) = prior.jacobian(m, u);
        let j = ah + pred.mean_jac.columns(0, p);
        let mn = prior.eval(m, u) + &pred.mean;
        let sn = linalg::symmetrize(&(&j * s * j.transpose() + DMatrix::from_diagonal(&pred.var)));
        if !linalg::all_finite(&mn) || !linalg::all_finite_matrix(&sn) {
            return Err(Error::InvalidInput("belief rollout diverged".into()));
        }
        means.push(mn);
        covs.push(sn);
        preds.push(pred);
        jacobians.push(j);
    }
    Ok(BeliefRollout {
        means,
        covs,
        inputs: inputs.to_vec(),
        preds,
        jacobians,
    })
}

/// Reverse pass for a linear prior: given cotangents of `X_1..X_H`, returns
/// the cotangents of the start mean and of every input.
pub fn rollout_adjoint(
    rollout: &BeliefRollout,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    gp: &GpPosterior,
    mean_bars: &[DVector<f64>],
    cov_bars: &[DMatrix<f64>],
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    let h = rollout.horizon();
    check_dim(h, mean_bars.len(), "mean cotangents")?;
    check_dim(h, cov_bars.len(), "covariance cotangents")?;
    let p = a.nrows();
    let q = b.ncols();
    let mut mbar = mean_bars[h - 1].clone();
    let mut sbar = cov_bars[h - 1].clone();
    let mut ubars = vec![DVector::zeros(q); h];
    for t in (0..h).rev() {
        let j = &rollout.jacobians[t];
        let s = &rollout.covs[t];
        let pred = &rollout.preds[t];
        let z = linalg::concat(&rollout.means[t], &rollout.inputs[t]);

        let mut zbar: DVector<f64> = pred.mean_jac.transpose() * &mbar;
        let sbar_sym = linalg::symmetrize(&sbar);
        let jbar = &sbar_sym * j * s * 2.0;
        if jbar.iter().any(|&v| v != 0.0) {
            let mut wts = DMatrix::zeros(p, p + q);
            wts.columns_mut(0, p).copy_from(&jbar);
            zbar += gp.mean_jacobian_vjp(&z, &wts)?;
        }
        let var_bar = sbar_sym.diagonal();
        zbar += pred.var_jac.transpose() * var_bar;

        let mut m_prev = a.transpose() * &mbar + zbar.rows(0, p);
        ubars[t] = b.transpose() * &mbar + zbar.rows(p, q);
        let mut s_prev = j.transpose() * &sbar_sym * j;
        if t > 0 {
            m_prev += &mean_bars[t - 1];
            s_prev += &cov_bars[t - 1];
        }
        mbar = m_prev;
        sbar = s_prev;
    }
    Ok((mbar, ubars))
}

/// Chance-constraint residuals `hᵢ m + κ sqrt(hᵢ S hᵢᵀ) − bᵢ` for one belief,
/// with the cotangents of `Σᵢ max(0, rᵢ + margin)²`.
pub fn chance_residuals(
    belief_mean: &DVector<f64>,
    belief_cov: &DMatrix<f64>,
    normals: &DMatrix<f64>,
    offsets: &DVector<f64>,
    kappa: f64,
) -> DVector<f64> {
    DVector::from_fn(normals.nrows(), |i, _| {
        let hrow = normals.row(i).transpose();
        let spread = hrow.dot(&(belief_cov * &hrow)).max(0.0).sqrt();
        hrow.dot(belief_mean) + kappa * spread - offsets[i]
    })
}

/// Value and cotangents of `weight · Σᵢ max(0, rᵢ + margin)²` over the
/// chance residuals of one belief.
pub fn chance_penalty_with_grad(
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    normals: &DMatrix<f64>,
    offsets: &DVector<f64>,
    kappa: f64,
    margin: f64,
    weight: f64,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = m.len();
    let mut v = 0.0;
    let mut dm = DVector::zeros(p);
    let mut ds = DMatrix::zeros(p, p);
    for i in 0..normals.nrows() {
        let hrow = normals.row(i).transpose();
        let var = hrow.dot(&(s * &hrow)).max(0.0);
        let spread = var.sqrt();
        let r = hrow.dot(m) + kappa * spread - offsets[i] + margin;
        if r > 0.0 {
            v += weight * r * r;
            let c = 2.0 * weight * r;
            dm += &hrow * c;
            if spread > 1e-12 {
                ds += &hrow * hrow.transpose() * (c * kappa / (2.0 * spread));
            }
        }
    }
    (v, dm, ds)
}

/// The integer toy system `x⁺ = x + u`, `u ∈ {−1, 0, 1}`, with `X = X_safe = ℕ`
/// and cost `c(−1) = −2`, `c(1) = −1`, `c(x) = 0` otherwise.
pub mod toy {
    const ACTIONS: [i64; 3] = [-1, 0, 1];

    pub fn cost(x: i64) -> f64 {
        match x {
            -1 => -2.0,
            1 => -1.0,
            _ => 0.0,
        }
    }

    fn sequences(len: usize) -> Vec<Vec<i64>> {
        let mut out = vec![Vec::new()];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|s| {
                    ACTIONS.iter().map(move |&a| {
                        let mut n = s.clone();
                        n.push(a);
                        n
                    })
                })
                .collect();
        }
        out
    }

    fn perf_cost(x0: i64, inputs: &[i64], discount: f64) -> f64 {
        let mut x = x0;
        let mut w = 1.0;
        let mut c = 0.0;
        for &u in inputs {
            x += u;
            c += w * cost(x);
            w *= discount;
        }
        c
    }

    fn safe(x0: i64, inputs: &[i64]) -> bool {
        let mut x = x0;
        inputs.iter().all(|&u| {
            x += u;
            x >= 0
        })
    }

    /// Optimize the performance plan ignoring safety, then apply the safe
    /// first action closest to its first input.
    pub fn two_stage_action(x: i64, horizon_t: usize, horizon_h: usize, discount: f64) -> i64 {
        let best = sequences(horizon_h)
            .into_iter()
            .min_by(|a, b| perf_cost(x, a, discount).total_cmp(&perf_cost(x, b, discount)))
            .unwrap();
        let target = best[0];
        let mut candidates: Vec<i64> = sequences(horizon_t)
            .into_iter()
            .filter(|s| safe(x, s))
            .map(|s| s[0])
            .collect();
        candidates.sort_by_key(|&u| ((u - target).abs(), u));
        candidates[0]
    }

    /// Jointly choose a safe plan and a performance plan sharing the first
    /// input.
    pub fn coupled_action(x: i64, horizon_t: usize, horizon_h: usize, discount: f64) -> i64 {
        let safe_first: Vec<i64> = ACTIONS
            .iter()
            .copied()
            .filter(|&u| {
                sequences(horizon_t)
                    .iter()
                    .any(|s| s[0] == u && safe(x, s))
            })
            .collect();
        let mut best = (f64::INFINITY, 0);
        for u in safe_first {
            for s in sequences(horizon_h).into_iter().filter(|s| s[0] == u) {
                let c = perf_cost(x, &s, discount);
                if c < best.0 {
                    best = (c, u);
                }
            }
        }
        best.1
    }

    /// Closed-loop state sequence `x_0..x_steps`.
    pub fn simulate(
        x0: i64,
        steps: usize,
        policy: impl Fn(i64) -> i64,
    ) -> Vec<i64> {
        let mut xs = vec![x0];
        for _ in 0..steps {
            let x = *xs.last().unwrap();
            xs.push(x + policy(x));
        }
        xs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{Dataset, KernelSpec};
    use crate::propagation::LinearPrior;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn saturating_cost_deterministic_reduction() {
        let m = dvector![0.5, -0.3];
        let g = dvector![0.0, 0.0];
        let w = dmatrix![2.0, 0.3; 0.3, 1.0];
        let b = GaussianBelief::point(m.clone());
        let e = expected_saturating_cost(&b, &g, &w).unwrap();
        let d = &m - &g;
        assert_relative_eq!(e, 1.0 - (-0.5 * d.dot(&(&w * &d))).exp(), epsilon = 1e-15);
        let at_goal = GaussianBelief::point(g.clone());
        assert_relative_eq!(expected_saturating_cost(&at_goal, &g, &DMatrix::identity(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn saturating_cost_gradients_match_finite_differences() {
        let m = dvector![0.5, -0.3];
        let s = dmatrix![0.4, 0.1; 0.1, 0.2];
        let g = dvector![0.1, 0.2];
        let w = dmatrix![2.0, 0.3; 0.3, 1.0];
        let (_, dm, ds) = saturating_cost_with_grad(&m, &s, &g, &w).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut mp = m.clone();
            let mut mm = m.clone();
            mp[i] += h;
            mm[i] -= h;
            let fd = (saturating_cost_with_grad(&mp, &s, &g, &w).unwrap().0
                - saturating_cost_with_grad(&mm, &s, &g, &w).unwrap().0)
                / (2.0 * h);
            assert_relative_eq!(fd, dm[i], epsilon = 1e-8);
            for j in 0..2 {
                let mut sp = s.clone();
                let mut sm = s.clone();
                sp[(i, j)] += h;
                sm[(i, j)] -= h;
                let fd = (saturating_cost_with_grad(&m, &sp, &g, &w).unwrap().0
                    - saturating_cost_with_grad(&m, &sm, &g, &w).unwrap().0)
                    / (2.0 * h);
                assert_relative_eq!(fd, ds[(i, j)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn linear_gaussian_case_is_exact() {
        let prior = LinearPrior::new(dmatrix![1.0, 0.1; -0.2, 0.9], dmatrix![0.0; 0.1]).unwrap();
        let ds = Dataset::new(3, 2, 0.1).unwrap();
        let k = KernelSpec::linear(vec![0.0; 3]);
        let gp = GpPosterior::fit(&ds, &[k.clone(), k], 2.0).unwrap();
        let s = dmatrix![0.3, 0.05; 0.05, 0.2];
        let b = GaussianBelief::new(dvector![0.1, 0.2], s.clone()).unwrap();
        let out = moment_propagate(&b, &dvector![0.5], &gp, &prior).unwrap();
        assert_relative_eq!(out.cov, &prior.a * s * prior.a.transpose(), epsilon = 1e-14);
    }

    fn chain_setup() -> (LinearPrior, GpPosterior) {
        let prior = LinearPrior::new(dmatrix![1.0, 0.05; 0.3, 0.98], dmatrix![0.0; 0.2]).unwrap();
        let ds = Dataset::from_pairs(
            vec![dvector![0.1, 0.0, 0.2], dvector![-0.3, 0.2, -0.1], dvector![0.4, -0.5, 0.3]],
            vec![dvector![0.01, -0.05], dvector![0.02, 0.03], dvector![-0.01, 0.04]],
            0.05,
        )
        .unwrap();
        let k = KernelSpec::sum(vec![0.5, 0.7, 0.9], 0.2, vec![0.01, 0.02, 0.01]);
        let gp = GpPosterior::fit(&ds, &[k.clone(), k], 2.0).unwrap();
        (prior, gp)
    }

    #[test]
    fn rollout_adjoint_matches_finite_differences() {
        let (prior, gp) = chain_setup();
        let objectives = [
            PerformanceObjective {
                cost: PerformanceCost::Saturating {
                    goal: vec![0.5, 0.0],
                    weight: vec![vec![1.0, 0.0], vec![0.0, 0.2]],
                },
                discount: 0.9,
            },
            PerformanceObjective {
                cost: PerformanceCost::ConfidenceMinusDeviation {
                    deviation_weight: vec![vec![0.5, 0.0], vec![0.0, 0.1]],
                },
                discount: 0.95,
            },
        ];
        let anchors = vec![dvector![0.1, 0.1], dvector![0.0, 0.2]];
        let m0 = dvector![0.05, -0.1];
        let inputs = vec![dvector![0.3], dvector![-0.2], dvector![0.1], dvector![0.4]];
        for obj in &objectives {
            let value = |m0: &DVector<f64>, inputs: &[DVector<f64>]| {
                let r = rollout_beliefs(&prior, &gp, &GaussianBelief::point(m0.clone()), inputs).unwrap();
                obj.evaluate(&r, &anchors).unwrap().0
            };
            let r = rollout_beliefs(&prior, &gp, &GaussianBelief::point(m0.clone()), &inputs).unwrap();
            let (_, mb, sb) = obj.evaluate(&r, &anchors).unwrap();
            let (m0bar, ubars) = rollout_adjoint(&r, &prior.a, &prior.b, &gp, &mb, &sb).unwrap();
            let h = 1e-6;
            for t in 0..inputs.len() {
                let mut up = inputs.clone();
                let mut um = inputs.clone();
                up[t][0] += h;
                um[t][0] -= h;
                let fd = (value(&m0, &up) - value(&m0, &um)) / (2.0 * h);
                assert_relative_eq!(fd, ubars[t][0], epsilon = 1e-6, max_relative = 1e-5);
            }
            for i in 0..2 {
                let mut mp = m0.clone();
                let mut mm = m0.clone();
                mp[i] += h;
                mm[i] -= h;
                let fd = (value(&mp, &inputs) - value(&mm, &inputs)) / (2.0 * h);
                assert_relative_eq!(fd, m0bar[i], epsilon = 1e-6, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn zero_discount_keeps_first_stage() {
        let (prior, gp) = chain_setup();
        let obj = PerformanceObjective {
            cost: PerformanceCost::Saturating {
                goal: vec![0.5, 0.0],
                weight: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            },
            discount: 0.0,
        };
        let r = rollout_beliefs(&prior, &gp, &GaussianBelief::point(dvector![0.0, 0.0]), &[dvector![0.1], dvector![0.5]]).unwrap();
        let (v, _, _) = obj.evaluate(&r, &[]).unwrap();
        let b1 = &r.beliefs()[1];
        assert_eq!(v, expected_saturating_cost(b1, &dvector![0.5, 0.0], &DMatrix::identity(2, 2)).unwrap());
    }

    #[test]
    fn chance_penalty_gradient() {
        let normals = dmatrix![1.0, 0.0; 0.6, 0.8];
        let offsets = dvector![0.2, 0.1];
        let m = dvector![0.15, 0.05];
        let s = dmatrix![0.01, 0.002; 0.002, 0.02];
        let (_, dm, ds) = chance_penalty_with_grad(&m, &s, &normals, &offsets, 2.0, 0.01, 10.0);
        let h = 1e-7;
        for i in 0..2 {
            let mut mp = m.clone();
            let mut mm = m.clone();
            mp[i] += h;
            mm[i] -= h;
            let fd = (chance_penalty_with_grad(&mp, &s, &normals, &offsets, 2.0, 0.01, 10.0).0
                - chance_penalty_with_grad(&mm, &s, &normals, &offsets, 2.0, 0.01, 10.0).0)
                / (2.0 * h);
            assert_relative_eq!(fd, dm[i], epsilon = 1e-6);
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[(i, i)] += h;
            sm[(i, i)] -= h;
            let fd = (chance_penalty_with_grad(&m, &sp, &normals, &offsets, 2.0, 0.01, 10.0).0
                - chance_penalty_with_grad(&m, &sm, &normals, &offsets, 2.0, 0.01, 10.0).0)
                / (2.0 * h);
            assert_relative_eq!(fd, ds[(i, i)], epsilon = 1e-5);
        }
    }

    #[test]
    fn toy_two_stage_is_stuck_and_coupled_moves() {
        for h in 1..=2 {
            let stuck = toy::simulate(0, 10, |x| toy::two_stage_action(x, h, h, 0.95));
            assert!(stuck.iter().all(|&x| x == 0));
            let coupled = toy::simulate(0, 10, |x| toy::coupled_action(x, h, h, 0.95));
            assert_eq!(coupled[1], 1);
            assert!(coupled.iter().all(|&x| x >= 0));
        }
    }

    #[test]
    fn toy_long_unconstrained_performance_horizon_waits() {
        // Beyond two steps the free performance tail prefers to wait at 0 and
        // then step to −1, so the shared first input is 0.
        assert_eq!(toy::coupled_action(0, 3, 3, 0.95), 0);
    }
}
