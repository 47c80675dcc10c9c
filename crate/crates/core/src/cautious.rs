//! Chance-constrained performance-only MPC used as the cautious baseline. It
//! plans a single belief trajectory and approximately enforces the state and
//! input constraints through `h m + κ sqrt(h S hᵀ) ≤ b`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ellipsoid::Polytope;
use crate::error::{check_dim, Error, Result};
use crate::gp::GpPosterior;
use crate::mpc::SolverConfig;
use crate::optim::{bfgs_minimize, fd_gradient, BfgsOptions};
use crate::performance::{
    chance_penalty_with_grad, chance_residuals, rollout_adjoint, rollout_beliefs, GaussianBelief,
    PerformanceObjective,
};
use crate::propagation::PriorModel;

pub struct CautiousProblem<'a> {
    pub prior: &'a dyn PriorModel,
    pub gp: &'a GpPosterior,
    pub x0: DVector<f64>,
    pub horizon: usize,
    pub objective: PerformanceObjective,
    pub state: Option<&'a Polytope>,
    pub control: &'a Polytope,
    pub kappa: f64,
}

#[derive(Debug, Clone)]
pub struct CautiousPlan {
    pub inputs: Vec<DVector<f64>>,
    pub objective: f64,
    /// Largest chance or input residual.
    pub max_residual: f64,
    pub feasible: bool,
}

impl CautiousProblem<'_> {
    fn q(&self) -> usize {
        self.prior.input_dim()
    }

    fn split(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        let q = self.q();
        (0..self.horizon).map(|t| z.rows(t * q, q).into_owned()).collect()
    }

    /// Objective, residual maximum and, when requested, the merit gradient.
    fn evaluate(&self, z: &DVector<f64>, mu: f64, margin: f64, want_grad: bool) -> Result<(f64, f64, f64, Option<DVector<f64>>)> {
        let inputs = self.split(z);
        let rollout = rollout_beliefs(self.prior, self.gp, &GaussianBelief::point(self.x0.clone()), &inputs)?;
        let anchors: Vec<DVector<f64>> = Vec::new();
        let (obj, mut mbar, mut sbar) = self.objective.evaluate(&rollout, &anchors)?;
        let mut pen = 0.0;
        let mut max_res = f64::NEG_INFINITY;
        if let Some(x) = self.state {
            for t in 0..self.horizon {
                let (m, s) = (&rollout.means[t + 1], &rollout.covs[t + 1]);
                let r = chance_residuals(m, s, x.normals(), x.offsets(), self.kappa);
                max_res = max_res.max(r.max());
                let (v, dm, ds) = chance_penalty_with_grad(m, s, x.normals(), x.offsets(), self.kappa, margin, mu);
                pen += v;
                mbar[t] += dm;
                sbar[t] += ds;
            }
        }
        let q = self.q();
        let mut ugrad = DVector::zeros(z.len());
        for (t, u) in inputs.iter().enumerate() {
            let slack = self.control.slack(u);
            max_res = max_res.max(slack.max());
            for i in 0..slack.len() {
                let r = slack[i] + margin;
                if r > 0.0 {
                    pen += mu * r * r;
                    let g = self.control.normals().row(i).transpose() * (2.0 * mu * r);
                    let mut seg = ugrad.rows_mut(t * q, q);
                    seg += g;
                }
            }
        }
        let merit = obj + pen;
        let grad = if want_grad {
            match self.prior.as_linear() {
                Some((a, b)) => {
                    let (_, ubars) = rollout_adjoint(&rollout, a, b, self.gp, &mbar, &sbar)?;
                    for (t, ub) in ubars.iter().enumerate() {
                        let mut seg = ugrad.rows_mut(t * q, q);
                        seg += ub;
                    }
                    Some(ugrad)
                }
                None => None,
            }
        } else {
            None
        };
        Ok((merit, obj, max_res, grad))
    }

    fn merit_with_grad(&self, z: &DVector<f64>, mu: f64, cfg: &SolverConfig) -> (f64, DVector<f64>) {
        match self.evaluate(z, mu, cfg.margin, true) {
            Ok((v, _, _, Some(g))) => (v, g),
            Ok((v, _, _, None)) => {
                let g = fd_gradient(
                    |x| {
                        self.evaluate(x, mu, cfg.margin, false)
                            .map(|e| e.0)
                            .unwrap_or(f64::INFINITY)
                    },
                    z,
                    cfg.fd_step,
                );
                (v, g)
            }
            Err(_) => (f64::INFINITY, DVector::zeros(z.len())),
        }
    }

    fn optimize_from(&self, start: DVector<f64>, cfg: &SolverConfig) -> DVector<f64> {
        let opts = BfgsOptions {
            max_iters: cfg.max_iters,
            rel_tol: cfg.rel_tol,
            ..Default::default()
        };
        let mut z = start;
        let mut mu = cfg.penalty_initial;
        for _ in 0..cfg.penalty_stages.max(1) {
            let res = bfgs_minimize(|x| self.merit_with_grad(x, mu, cfg), z.clone(), &opts);
            if res.value.is_finite() {
                z = res.x;
            }
            let max_res = self
                .evaluate(&z, mu, cfg.margin, false)
                .map(|e| e.2)
                .unwrap_or(f64::INFINITY);
            if max_res <= 0.0 {
                break;
            }
            mu *= cfg.penalty_growth;
        }
        z
    }
}

/// Multi-start penalty solve from `warm` (if any), the zero input sequence and
/// `cfg.multistarts` random sequences. Returns the best feasible plan, or the
/// least-violating one.
pub fn solve_cautious(
    problem: &CautiousProblem,
    warm: Option<&[DVector<f64>]>,
    cfg: &SolverConfig,
    stream: u64,
) -> Result<CautiousPlan> {
    if problem.horizon == 0 {
        return Err(Error::InvalidInput("performance horizon must be ≥ 1".into()));
    }
    let q = problem.q();
    check_dim(q, problem.control.dim(), "control polytope")?;
    let n = problem.horizon * q;
    let mut starts = Vec::new();
    if let Some(w) = warm {
        let mut z = DVector::zeros(n);
        for (t, u) in w.iter().take(problem.horizon).enumerate() {
            z.rows_mut(t * q, q).copy_from(u);
        }
        starts.push(z);
    }
    starts.push(DVector::zeros(n));
    let (lo, hi) = crate::mpc::bounding_box(problem.control)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for _ in 0..cfg.multistarts {
        starts.push(DVector::from_fn(n, |i, _| {
            let j = i % q;
            rng.random_range(lo[j]..=hi[j])
        }));
    }
    let plans: Vec<Option<CautiousPlan>> = starts
        .into_par_iter()
        .map(|s| {
            let z = problem.optimize_from(s, cfg);
            let (_, obj, max_res, _) = problem.evaluate(&z, 0.0, cfg.margin, false).ok()?;
            obj.is_finite().then(|| CautiousPlan {
                inputs: problem.split(&z),
                objective: obj,
                max_residual: max_res,
                feasible: max_res <= cfg.tol_feas,
            })
        })
        .collect();
    let mut best: Option<CautiousPlan> = None;
    for p in plans.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some(b) => match (p.feasible, b.feasible) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => p.objective < b.objective,
                (false, false) => p.max_residual < b.max_residual,
            },
        };
        if better {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::NotConverged("no start produced a finite plan".into()))
}

/// Residuals of a plan, re-evaluated from scratch.
pub fn cautious_residuals(problem: &CautiousProblem, inputs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let rollout = rollout_beliefs(problem.prior, problem.gp, &GaussianBelief::point(problem.x0.clone()), inputs)?;
    let mut out = Vec::new();
    if let Some(x) = problem.state {
        for t in 0..inputs.len() {
            out.push(chance_residuals(
                &rollout.means[t + 1],
                &rollout.covs[t + 1],
                x.normals(),
                x.offsets(),
                problem.kappa,
            ));
        }
    }
    Ok(out)
}

/// Diagonal weight matrix as nested rows.
pub fn diag_rows(d: &[f64]) -> Vec<Vec<f64>> {
    let m = DMatrix::from_diagonal(&DVector::from_column_slice(d));
    (0..d.len()).map(|i| m.row(i).iter().copied().collect()).collect()
}
