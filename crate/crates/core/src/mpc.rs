//! Receding-horizon safe MPC: problem assembly, a multi-start penalty
//! solver, exact certification, and the plan-shifting controller state.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{control_residuals, state_residuals, terminal_residuals, ConstraintSet};
use crate::ellipsoid::{Ellipsoid, Polytope};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::optim::{bfgs_minimize, BfgsOptions};
use crate::performance::{rollout_adjoint, rollout_beliefs, BeliefRollout, GaussianBelief, PerformanceObjective};
use crate::propagation::{FeedbackLaw, Propagator, Reachability};


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Random restarts in addition to the warm start and the safety-controller
    /// start.
    pub multistarts: usize,
    /// BFGS iterations per penalty stage.
    pub max_iters: usize,
    /// Relative decrease below which a BFGS stage stops.
    pub rel_tol: f64,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub penalty_stages: usize,
    /// Largest normalized residual accepted by certification.
    pub tol_feas: f64,
    /// Residuals are pushed below `−margin` by the penalty so that certified
    /// plans keep a little slack.
    pub margin: f64,
    pub seed: u64,
    pub fd_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            multistarts: 25,
            max_iters: 60,
            rel_tol: 1e-9,
            penalty_initial: 10.0,
            penalty_growth: 10.0,
            penalty_stages: 5,
            tol_feas: 1e-6,
            margin: 1e-3,
            seed: 0,
            fd_step: 1e-6,
        }
    }
}

/// Backup controller `π_safe(x) = clamp(G x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyController {
    pub gain: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl SafetyController {
    /// Linear controller without bias.
    pub fn linear(gain: DMatrix<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        let bias = DVector::zeros(gain.nrows());
        Self {
            gain,
            bias,
            lower,
            upper,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        clamp(&(&self.gain * x + &self.bias), &self.lower, &self.upper)
    }
}

pub(crate) fn clamp(u: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(u.len(), |i, _| u[i].clamp(lo[i], hi[i]))
}

/// Axis-aligned bounding box of a bounded polytope.
pub fn bounding_box(p: &Polytope) -> Result<(DVector<f64>, DVector<f64>)> {
    let verts = p.vertices();
    if verts.is_empty() {
        return Err(Error::InvalidInput("polytope has no vertices".into()));
    }
    let n = p.dim();
    let mut lo = DVector::from_element(n, f64::INFINITY);
    let mut hi = DVector::from_element(n, f64::NEG_INFINITY);
    for v in &verts {
        for i in 0..n {
            lo[i] = lo[i].min(v[i]);
            hi[i] = hi[i].max(v[i]);
        }
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerformancePlan {
    pub horizon: usize,
    pub coupling: usize,
    pub objective: PerformanceObjective,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Zero,
    /// `Σ_t (p_t − x_g)ᵀ W (p_t − x_g)` over the safety centers `p_1..p_T`.
    CenterQuadratic {
        goal: DVector<f64>,
        weight: DMatrix<f64>,
    },
    /// `−Σⱼ σⱼ(x₀, u₀)`.
    InitialVarianceSum,
    /// `−Σ_t Σⱼ σⱼ(p_t, k_t)` along the safety trajectory.
    SafetyVarianceSum,
    /// Discounted belief-trajectory objective coupled to the first inputs.
    Performance(PerformancePlan),
}

pub struct MpcProblem<'a> {
    pub propagator: Propagator<'a>,
    pub constraints: &'a ConstraintSet,
    pub safety: &'a SafetyController,
    pub x0: DVector<f64>,
    /// Pre-specified feedback gains `K_0..K_{T−1}`.
    pub gains: Vec<DMatrix<f64>>,
    pub objective: Objective,
    /// Treat the initial state as a decision variable.
    pub optimize_x0: bool,
    /// Box from which random initial states are drawn when `optimize_x0`. An
    /// optimized initial state is also constrained to it.
    pub x0_sampling_box: Option<(DVector<f64>, DVector<f64>)>,
    /// `R₀ = E(x₀, ε I)`.
    pub point_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    State,
    Control,
    Terminal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// State residuals per ellipsoid; index 0 is `R₀` when the initial state
    /// is optimized, otherwise `R₁`.
    pub state: Vec<DVector<f64>>,
    pub control: Vec<DVector<f64>>,
    pub terminal: DVector<f64>,
    pub max: f64,
    /// `(kind, time index, row)` of the largest residual.
    pub worst: Option<(ConstraintKind, usize, usize)>,
}

impl ResidualReport {
    fn build(state: Vec<DVector<f64>>, control: Vec<DVector<f64>>, terminal: DVector<f64>) -> Self {
        let mut max = f64::NEG_INFINITY;
        let mut worst = None;
        let mut visit = |kind, t, v: &DVector<f64>| {
            for (i, &r) in v.iter().enumerate() {
                if r > max || r.is_nan() {
                    max = if r.is_nan() { f64::INFINITY } else { r };
                    worst = Some((kind, t, i));
                }
            }
        };
        for (t, v) in state.iter().enumerate() {
            visit(ConstraintKind::State, t, v);
        }
        for (t, v) in control.iter().enumerate() {
            visit(ConstraintKind::Control, t, v);
        }
        visit(ConstraintKind::Terminal, 0, &terminal);
        Self {
            state,
            control,
            terminal,
            max,
            worst,
        }
    }

    fn infinite() -> Self {
        Self {
            state: Vec::new(),
            control: Vec::new(),
            terminal: DVector::zeros(0),
            max: f64::INFINITY,
            worst: None,
        }
    }

    pub fn satisfied(&self, tol: f64) -> bool {
        self.max <= tol
    }

    fn all(&self) -> impl Iterator<Item = f64> + '_ {
        self.state
            .iter()
            .chain(&self.control)
            .flat_map(|v| v.iter().copied())
            .chain(self.terminal.iter().copied())
    }
}

#[derive(Debug, Clone)]
pub struct SafetyPlan {
    pub x0: DVector<f64>,
    pub laws: Vec<FeedbackLaw>,
    pub ellipsoids: Vec<Ellipsoid>,
    /// Performance-trajectory inputs `u^perf_0..u^perf_{H−1}` (empty without
    /// a performance trajectory).
    pub perf_inputs: Vec<DVector<f64>>,
    pub decision: DVector<f64>,
    pub objective: f64,
    pub report: ResidualReport,
    pub feasible: bool,
    pub certified: bool,
}

impl SafetyPlan {
    pub fn offsets(&self) -> Vec<DVector<f64>> {
        self.laws.iter().map(|l| l.offset.clone()).collect()
    }
}

struct Evaluation {
    reach: Reachability,
    report: ResidualReport,
    objective: f64,
    rollout: Option<BeliefRollout>,
    /// Cotangents of the start state and of every performance input.
    perf_cotangents: Option<(DVector<f64>, Vec<DVector<f64>>)>,
    perf_grad: Option<DVector<f64>>,
    perf_penalty: f64,
    perf_penalty_grad: DVector<f64>,
}

impl<'a> MpcProblem<'a> {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    fn p(&self) -> usize {
        self.propagator.state_dim()
    }

    fn q(&self) -> usize {
        self.propagator.input_dim()
    }

    fn n_x0(&self) -> usize {
        if self.optimize_x0 {
            self.p()
        } else {
            0
        }
    }

    /// Number of safety-block decision variables (initial state and
    /// feed-forward terms).
    pub fn safety_dim(&self) -> usize {
        self.n_x0() + self.horizon() * self.q()
    }

    fn perf(&self) -> Option<&PerformancePlan> {
        match &self.objective {
            Objective::Performance(p) => Some(p),
            _ => None,
        }
    }

    /// Total decision-vector length.
    pub fn decision_dim(&self) -> usize {
        self.safety_dim() + self.perf().map_or(0, |pp| (pp.horizon - pp.coupling) * self.q())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.horizon();
        if t == 0 {
            return Err(Error::InvalidInput("horizon must be ≥ 1".into()));
        }
        check_dim(self.p(), self.x0.len(), "initial state")?;
        if !linalg::all_finite(&self.x0) {
            return Err(Error::InvalidInput("non-finite initial state".into()));
        }
        for k in &self.gains {
            check_dim(self.q(), k.nrows(), "gain rows")?;
            check_dim(self.p(), k.ncols(), "gain cols")?;
        }
        if let Some(pp) = self.perf() {
            if pp.coupling < 1 || pp.coupling > t.min(pp.horizon) {
                return Err(Error::InvalidInput(format!(
                    "coupling length {} outside 1..=min(T={t}, H={})",
                    pp.coupling, pp.horizon
                )));
            }
            pp.objective.validate(self.p())?;
        }
        Ok(())
    }

    fn split(&self, z: &DVector<f64>) -> (DVector<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let p = self.p();
        let q = self.q();
        let x0 = if self.optimize_x0 {
            z.rows(0, p).into_owned()
        } else {
            self.x0.clone()
        };
        let base = self.n_x0();
        let offsets: Vec<DVector<f64>> = (0..self.horizon())
            .map(|t| z.rows(base + t * q, q).into_owned())
            .collect();
        let mut perf = Vec::new();
        if let Some(pp) = self.perf() {
            perf.extend(offsets.iter().take(pp.coupling).cloned());
            for t in pp.coupling..pp.horizon {
                perf.push(z.rows(self.safety_dim() + (t - pp.coupling) * q, q).into_owned());
            }
        }
        (x0, offsets, perf)
    }

    fn residuals(&self, x0: &DVector<f64>, reach: &Reachability) -> Result<ResidualReport> {
        let cs = self.constraints;
        let r0 = Ellipsoid::point(x0.clone(), self.point_eps)?;
        let mut state = Vec::new();
        if self.optimize_x0 {
            state.push(state_residuals(&r0, cs.state())?);
            if let Some((lo, hi)) = &self.x0_sampling_box {
                let p = x0.len();
                state.push(DVector::from_fn(2 * p, |i, _| {
                    if i < p {
                        lo[i] - x0[i]
                    } else {
                        x0[i - p] - hi[i - p]
                    }
                }));
            }
        }
        for e in &reach.ellipsoids {
            state.push(state_residuals(e, cs.state())?);
        }
        let mut control = Vec::with_capacity(self.horizon());
        for (t, law) in reach.laws.iter().enumerate() {
            let r = if t == 0 { &r0 } else { &reach.ellipsoids[t - 1] };
            control.push(control_residuals(r, &law.gain, &law.offset, cs.control())?);
        }
        let terminal = terminal_residuals(reach.ellipsoids.last().unwrap(), cs.safe())?;
        Ok(ResidualReport::build(state, control, terminal))
    }

    /// Evaluates the plan `z`. A `frozen` belief rollout is reused in place
    /// of rolling out the performance inputs again.
    fn evaluate(
        &self,
        z: &DVector<f64>,
        want_perf_grad: bool,
        cfg: &SolverConfig,
        frozen: Option<(&BeliefRollout, f64)>,
    ) -> Result<Evaluation> {
        let (x0, offsets, perf_inputs) = self.split(z);
        let r0 = Ellipsoid::point(x0.clone(), self.point_eps)?;
        let reach = self.propagator.multi_step(&r0, &self.gains, &offsets)?;
        let report = self.residuals(&x0, &reach)?;
        let gp = self.propagator.gp;
        let mut perf_grad = None;
        let mut perf_cotangents = None;
        let mut kept_rollout = None;
        let mut perf_penalty = 0.0;
        let mut perf_penalty_grad = DVector::zeros(self.decision_dim() - self.safety_dim());
        let objective = match &self.objective {
            Objective::Zero => 0.0,
            Objective::CenterQuadratic { goal, weight } => reach
                .ellipsoids
                .iter()
                .map(|e| {
                    let d = e.center() - goal;
                    d.dot(&(weight * &d))
                })
                .sum(),
            Objective::InitialVarianceSum => {
                let (_, var) = gp.predict_var(&linalg::concat(&x0, &offsets[0]))?;
                -var.iter().map(|v| v.sqrt()).sum::<f64>()
            }
            Objective::SafetyVarianceSum => {
                let mut c = 0.0;
                for law in &reach.laws {
                    let (_, var) = gp.predict_var(&linalg::concat(&law.anchor, &law.offset))?;
                    c -= var.iter().map(|v| v.sqrt()).sum::<f64>();
                }
                c
            }
            Objective::Performance(pp) => {
                let prior = self.propagator.prior;
                let fresh;
                let rollout = match frozen {
                    Some((r, _)) => r,
                    None => {
                        fresh = rollout_beliefs(prior, gp, &GaussianBelief::point(x0.clone()), &perf_inputs)?;
                        &fresh
                    }
                };
                let anchors: Vec<DVector<f64>> =
                    reach.ellipsoids.iter().map(|e| e.center().clone()).collect();
                let (v, mb, sb) = match frozen {
                    Some((_, v)) if !pp.objective.cost.uses_anchors() => (v, Vec::new(), Vec::new()),
                    _ => pp.objective.evaluate(rollout, &anchors)?,
                };
                let q = self.q();
                // Free performance inputs must stay in the input domain.
                let u = self.constraints.control();
                for (t, input) in perf_inputs.iter().enumerate().take(pp.horizon).skip(pp.coupling) {
                    let slack = u.slack(input);
                    for i in 0..slack.len() {
                        let r = slack[i] + cfg.margin;
                        if r > 0.0 {
                            perf_penalty += r * r;
                            let row = u.normals().row(i).transpose() * (2.0 * r);
                            let mut seg = perf_penalty_grad.rows_mut((t - pp.coupling) * q, q);
                            seg += row;
                        }
                    }
                }
                if want_perf_grad {
                    if let Some((a, b)) = prior.as_linear() {
                        let (xbar, ubars) = rollout_adjoint(rollout, a, b, gp, &mb, &sb)?;
                        let mut g = DVector::zeros(self.decision_dim() - self.safety_dim());
                        for (k, ubar) in ubars[pp.coupling..pp.horizon].iter().enumerate() {
                            g.rows_mut(k * q, q).copy_from(ubar);
                        }
                        perf_grad = Some(g);
                        perf_cotangents = Some((xbar, ubars));
                    }
                    kept_rollout = Some(rollout.clone());
                }
                v
            }
        };
        Ok(Evaluation {
            reach,
            report,
            objective,
            rollout: kept_rollout,
            perf_cotangents,
            perf_grad,
            perf_penalty,
            perf_penalty_grad,
        })
    }

    fn merit(
        &self,
        z: &DVector<f64>,
        mu: f64,
        multipliers: &[f64],
        cfg: &SolverConfig,
        frozen: Option<(&BeliefRollout, f64)>,
    ) -> f64 {
        match self.evaluate(z, false, cfg, frozen) {
            Ok(ev) => merit_value(&ev, mu, multipliers, cfg),
            Err(_) => f64::INFINITY,
        }
    }

    fn merit_with_grad(
        &self,
        z: &DVector<f64>,
        mu: f64,
        multipliers: &[f64],
        cfg: &SolverConfig,
    ) -> (f64, DVector<f64>) {
        let n = z.len();
        let ns = self.safety_dim();
        let ev = match self.evaluate(z, true, cfg, None) {
            Ok(ev) => ev,
            Err(_) => return (f64::INFINITY, DVector::zeros(n)),
        };
        let value = merit_value(&ev, mu, multipliers, cfg);
        let mut g = DVector::zeros(n);
        let fd_all = ev.perf_grad.is_none() && n > ns;
        let fd_dims = if fd_all { n } else { ns };
        // With an analytic performance gradient the rollout is held fixed
        // while differencing the safety block, and the rollout's dependence on
        // the shared inputs is added from the adjoint below.
        let frozen = if fd_all {
            None
        } else {
            ev.rollout.as_ref().map(|r| (r, ev.objective))
        };
        let mut zp = z.clone();
        for i in 0..fd_dims {
            let h = cfg.fd_step * (1.0 + z[i].abs());
            zp[i] = z[i] + h;
            let fp = self.merit(&zp, mu, multipliers, cfg, frozen);
            zp[i] = z[i] - h;
            let fm = self.merit(&zp, mu, multipliers, cfg, frozen);
            zp[i] = z[i];
            g[i] = if fp.is_finite() && fm.is_finite() {
                (fp - fm) / (2.0 * h)
            } else if fp.is_finite() {
                (fp - value) / h
            } else if fm.is_finite() {
                (value - fm) / h
            } else {
                0.0
            };
        }
        if let (Some((xbar, ubars)), Some(pp)) = (&ev.perf_cotangents, self.perf()) {
            if !fd_all {
                let q = self.q();
                if self.optimize_x0 {
                    let mut head = g.rows_mut(0, self.p());
                    head += xbar;
                }
                let base = self.n_x0();
                for (t, ub) in ubars.iter().enumerate().take(pp.coupling) {
                    let mut seg = g.rows_mut(base + t * q, q);
                    seg += ub;
                }
            }
        }
        if !fd_all && n > ns {
            let mut tail = g.rows_mut(ns, n - ns);
            if let Some(pg) = &ev.perf_grad {
                tail += pg;
            }
            tail += &ev.perf_penalty_grad * mu;
        }
        (value, g)
    }

    fn decision_from(&self, x0: &DVector<f64>, offsets: &[DVector<f64>], perf: &[DVector<f64>]) -> DVector<f64> {
        let mut z = DVector::zeros(self.decision_dim());
        let q = self.q();
        if self.optimize_x0 {
            z.rows_mut(0, self.p()).copy_from(x0);
        }
        let base = self.n_x0();
        for (t, k) in offsets.iter().enumerate() {
            z.rows_mut(base + t * q, q).copy_from(k);
        }
        if let Some(pp) = self.perf() {
            for t in pp.coupling..pp.horizon {
                if let Some(u) = perf.get(t) {
                    z.rows_mut(self.safety_dim() + (t - pp.coupling) * q, q).copy_from(u);
                }
            }
        }
        z
    }

    /// Start that follows the safety controller along the nominal
    /// (prior plus GP mean) trajectory.
    pub fn safety_controller_start(&self, x0: &DVector<f64>) -> DVector<f64> {
        let gp = self.propagator.gp;
        let prior = self.propagator.prior;
        let nominal = |x: &DVector<f64>, u: &DVector<f64>| -> DVector<f64> {
            let mean = gp
                .predict_var(&linalg::concat(x, u))
                .map(|(m, _)| m)
                .unwrap_or_else(|_| DVector::zeros(x.len()));
            prior.eval(x, u) + mean
        };
        let mut x = x0.clone();
        let mut offsets = Vec::with_capacity(self.horizon());
        for _ in 0..self.horizon() {
            let u = self.safety.eval(&x);
            x = nominal(&x, &u);
            offsets.push(u);
        }
        let mut perf = Vec::new();
        if let Some(pp) = self.perf() {
            let mut x = x0.clone();
            for _ in 0..pp.horizon {
                let u = self.safety.eval(&x);
                x = nominal(&x, &u);
                perf.push(u);
            }
        }
        self.decision_from(x0, &offsets, &perf)
    }

    fn random_start(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let (lo, hi) = (&self.safety.lower, &self.safety.upper);
        let q = self.q();
        let draw_u = |rng: &mut ChaCha8Rng| {
            DVector::from_fn(q, |i, _| {
                if lo[i].is_finite() && hi[i].is_finite() {
                    rng.random_range(lo[i]..=hi[i])
                } else {
                    rng.random_range(-1.0..=1.0)
                }
            })
        };
        let x0 = match (&self.x0_sampling_box, self.optimize_x0) {
            (Some((a, b)), true) => DVector::from_fn(self.p(), |i, _| rng.random_range(a[i]..=b[i])),
            _ => self.x0.clone(),
        };
        let offsets: Vec<DVector<f64>> = (0..self.horizon()).map(|_| draw_u(rng)).collect();
        let perf: Vec<DVector<f64>> = self
            .perf()
            .map(|pp| (0..pp.horizon).map(|_| draw_u(rng)).collect())
            .unwrap_or_default();
        self.decision_from(&x0, &offsets, &perf)
    }

    fn plan_from(&self, z: &DVector<f64>, cfg: &SolverConfig) -> Option<SafetyPlan> {
        let ev = self.evaluate(z, false, cfg, None).ok()?;
        let (x0, _, perf) = self.split(z);
        let certified = ev.report.satisfied(cfg.tol_feas) && ev.objective.is_finite();
        Some(SafetyPlan {
            x0,
            laws: ev.reach.laws,
            ellipsoids: ev.reach.ellipsoids,
            perf_inputs: perf,
            decision: z.clone(),
            objective: ev.objective,
            report: ev.report,
            feasible: certified,
            certified,
        })
    }

    fn optimize_from(&self, start: DVector<f64>, cfg: &SolverConfig) -> DVector<f64> {
        let opts = BfgsOptions {
            max_iters: cfg.max_iters,
            rel_tol: cfg.rel_tol,
            ..Default::default()
        };
        let mut z = start;
        let mut mu = cfg.penalty_initial;
        let mut multipliers: Vec<f64> = Vec::new();
        for _ in 0..cfg.penalty_stages.max(1) {
            let res = bfgs_minimize(|x| self.merit_with_grad(x, mu, &multipliers, cfg), z.clone(), &opts);
            if res.value.is_finite() {
                z = res.x;
            }
            let Ok(ev) = self.evaluate(&z, false, cfg, None) else {
                mu *= cfg.penalty_growth;
                continue;
            };
            if ev.report.max <= 0.0 {
                break;
            }
            multipliers = ev
                .report
                .all()
                .enumerate()
                .map(|(i, r)| (multipliers.get(i).copied().unwrap_or(0.0) + 2.0 * mu * (r + cfg.margin)).max(0.0))
                .collect();
            mu *= cfg.penalty_growth;
        }
        z
    }
}

/// Augmented Lagrangian of the safety residuals `rᵢ + margin ≤ 0` with
/// multipliers `λ` (zero when absent), plus a quadratic penalty on the free
/// performance inputs.
fn merit_value(ev: &Evaluation, mu: f64, multipliers: &[f64], cfg: &SolverConfig) -> f64 {
    let pen: f64 = ev
        .report
        .all()
        .enumerate()
        .map(|(i, r)| {
            let lam = multipliers.get(i).copied().unwrap_or(0.0);
            let v = (lam + 2.0 * mu * (r + cfg.margin)).max(0.0);
            (v * v - lam * lam) / (4.0 * mu)
        })
        .sum();
    ev.objective + pen + mu * ev.perf_penalty
}

/// Solves the MPC problem from the warm start, the safety-controller start and
/// `cfg.multistarts` random starts. The random starts are seeded from
/// `cfg.seed` and `stream`. The returned plan is certified, or marked
/// infeasible.
pub fn solve(
    problem: &MpcProblem,
    warm_start: Option<&DVector<f64>>,
    cfg: &SolverConfig,
    stream: u64,
) -> Result<SafetyPlan> {
    problem.validate()?;
    let n = problem.decision_dim();
    let mut starts = Vec::with_capacity(cfg.multistarts + 2);
    if let Some(w) = warm_start {
        check_dim(n, w.len(), "warm start")?;
        starts.push(w.clone());
    }
    starts.push(problem.safety_controller_start(&problem.x0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for _ in 0..cfg.multistarts {
        starts.push(problem.random_start(&mut rng));
    }
    let run = |s: DVector<f64>| {
        let start_plan = problem.plan_from(&s, cfg).filter(|p| p.certified);
        let z = problem.optimize_from(s, cfg);
        match (problem.plan_from(&z, cfg), start_plan) {
            (Some(p), Some(sp)) if !p.certified || sp.objective < p.objective => Some(sp),
            (p, sp) => p.or(sp),
        }
    };
    // A certified warm start makes the safety-controller start redundant.
    let mut plans: Vec<Option<SafetyPlan>> = Vec::with_capacity(starts.len());
    if warm_start.is_some() {
        let warm = run(starts.remove(0));
        if warm.as_ref().is_some_and(|p| p.certified) {
            starts.remove(0);
        }
        plans.push(warm);
    }
    plans.extend(starts.into_par_iter().map(run).collect::<Vec<_>>());
    let mut best: Option<SafetyPlan> = None;
    let mut fallback: Option<SafetyPlan> = None;
    for plan in plans.into_iter().flatten() {
        if plan.certified {
            if best.as_ref().is_none_or(|b| plan.objective < b.objective) {
                best = Some(plan);
            }
        } else if fallback.as_ref().is_none_or(|b| plan.report.max < b.report.max) {
            fallback = Some(plan);
        }
    }
    match best.or(fallback) {
        Some(p) => Ok(p),
        None => Err(Error::NotConverged("no start produced a finite plan".into())),
    }
}

/// Independent exact re-propagation of a plan and evaluation of all safety
/// residuals. Stale anchors make the report infinite.
pub fn certify(plan: &SafetyPlan, problem: &MpcProblem) -> ResidualReport {
    let run = || -> Result<ResidualReport> {
        let r0 = Ellipsoid::point(plan.x0.clone(), problem.point_eps)?;
        let reach = problem.propagator.multi_step(&r0, &problem.gains, &plan.offsets())?;
        for (a, b) in reach.laws.iter().zip(&plan.laws) {
            if a.anchor != b.anchor || a.gain != b.gain {
                return Ok(ResidualReport::infinite());
            }
        }
        problem.residuals(&plan.x0, &reach)
    };
    run().unwrap_or_else(|_| ResidualReport::infinite())
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanEntry {
    Law(FeedbackLaw),
    Safe,
}

/// Plan held by the controller between time steps.
#[derive(Debug, Clone)]
pub struct ControllerState {
    plan: Vec<PlanEntry>,
    age: usize,
    perf_inputs: Vec<DVector<f64>>,
    safety: SafetyController,
}

impl ControllerState {
    /// `Π₀ = (π_safe, …, π_safe)`.
    pub fn new(horizon: usize, safety: SafetyController) -> Self {
        Self {
            plan: vec![PlanEntry::Safe; horizon],
            age: 0,
            perf_inputs: Vec::new(),
            safety,
        }
    }

    pub fn plan(&self) -> &[PlanEntry] {
        &self.plan
    }

    /// Number of shifts since the last adopted plan.
    pub fn age(&self) -> usize {
        self.age
    }

    pub fn safety(&self) -> &SafetyController {
        &self.safety
    }

    /// Adopts a certified plan, or shifts the current plan and appends
    /// `π_safe`.
    pub fn advance(&mut self, solved: Option<&SafetyPlan>) {
        match solved {
            Some(p) if p.feasible && p.certified && p.laws.len() == self.plan.len() => {
                self.plan = p.laws.iter().cloned().map(PlanEntry::Law).collect();
                self.perf_inputs = p.perf_inputs.clone();
                self.age = 0;
            }
            _ => {
                self.plan.remove(0);
                self.plan.push(PlanEntry::Safe);
                if !self.perf_inputs.is_empty() {
                    self.perf_inputs.remove(0);
                }
                self.age += 1;
            }
        }
    }

    /// Input prescribed by the first plan entry at state `x`.
    pub fn action(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.plan[0] {
            PlanEntry::Law(l) => l.eval(x),
            PlanEntry::Safe => self.safety.eval(x),
        }
    }

    /// Updates the plan with the solver outcome for state `x` and returns
    /// the input to apply.
    pub fn step(&mut self, x: &DVector<f64>, solved: Option<&SafetyPlan>) -> DVector<f64> {
        self.advance(solved);
        self.action(x)
    }

    /// Initial guess for the next solve from state `x`: the held plan shifted
    /// by one step with `π_safe` appended, rolled along the nominal model.
    pub fn warm_start(&self, problem: &MpcProblem, x: &DVector<f64>) -> DVector<f64> {
        let gp = problem.propagator.gp;
        let prior = problem.propagator.prior;
        let nominal = |x: &DVector<f64>, u: &DVector<f64>| {
            let mean = gp
                .predict_var(&linalg::concat(x, u))
                .map(|(m, _)| m)
                .unwrap_or_else(|_| DVector::zeros(x.len()));
            prior.eval(x, u) + mean
        };
        let mut entries: Vec<&PlanEntry> = self.plan.iter().skip(1).collect();
        let safe = PlanEntry::Safe;
        while entries.len() < problem.horizon() {
            entries.push(&safe);
        }
        let mut p = x.clone();
        let mut offsets = Vec::with_capacity(problem.horizon());
        for e in entries.iter().take(problem.horizon()) {
            let u = match e {
                PlanEntry::Law(l) => clamp(&l.eval(&p), &self.safety.lower, &self.safety.upper),
                PlanEntry::Safe => self.safety.eval(&p),
            };
            p = nominal(&p, &u);
            offsets.push(u);
        }
        let mut perf: Vec<DVector<f64>> = self.perf_inputs.iter().skip(1).cloned().collect();
        if let Some(pp) = problem.perf() {
            let mut m = x.clone();
            for t in 0..pp.horizon {
                let u = if t < perf.len() {
                    perf[t].clone()
                } else {
                    self.safety.eval(&m)
                };
                m = nominal(&m, &u);
                if t >= perf.len() {
                    perf.push(u);
                }
            }
        }
        problem.decision_from(x, &offsets, &perf)
    }
}
