use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, ExperimentKind};
use super::record::{EpisodeRecord, MiRecord, RunRecord, StepRecord};
use crate::cautious::{solve_cautious, CautiousProblem};
use crate::env::{sample_polytope, EnvSpec};
use crate::error::{Error, Result};
use crate::gp::{max_variance_subselect, mutual_information, Dataset, GpPosterior};
use crate::linalg;
use crate::mpc::{solve, ControllerState, MpcProblem, Objective, PerformancePlan, SafetyPlan, SolverConfig};
use crate::performance::{PerformanceCost, PerformanceObjective};
use crate::propagation::Propagator;

/// Samples and rollout length of the safety-controller check run before
/// every experiment.
pub const ASSUMPTION_CHECK_SAMPLES: usize = 1000;
pub const ASSUMPTION_CHECK_SECONDS: f64 = 10.0;

#[derive(Debug, Default)]
struct RepOutput {
    steps: Vec<StepRecord>,
    episodes: Vec<EpisodeRecord>,
    mi: Vec<MiRecord>,
}

/// Builds the environment, checks the safety controller, and runs every
/// repetition of the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let spec = EnvSpec::from_config(&cfg.env)?;
    let check = spec.check_assumption2(ASSUMPTION_CHECK_SAMPLES, ASSUMPTION_CHECK_SECONDS, cfg.seed)?;
    if !check.passed() {
        return Err(Error::SafeSet(format!(
            "safety controller check failed: {} violations, {} not converging",
            check.violations, check.not_converging
        )));
    }
    run_with_env(cfg, &spec)
}

/// Runs the experiment on a prebuilt environment.
pub fn run_with_env(cfg: &ExperimentConfig, spec: &EnvSpec) -> Result<RunRecord> {
    cfg.validate()?;
    let outputs: Vec<RepOutput> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| match cfg.kind {
            ExperimentKind::StaticExploration => static_exploration(cfg, spec, rep),
            ExperimentKind::DynamicExploration => dynamic_exploration(cfg, spec, rep),
            ExperimentKind::EpisodicRl | ExperimentKind::CautiousBaseline => episodic(cfg, spec, rep),
        })
        .collect::<Result<_>>()?;
    let mut record = RunRecord {
        kind: cfg.kind,
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        config: cfg.to_toml()?,
        steps: Vec::new(),
        episodes: Vec::new(),
        mi_trace: Vec::new(),
    };
    for o in outputs {
        record.steps.extend(o.steps);
        record.episodes.extend(o.episodes);
        record.mi_trace.extend(o.mi);
    }
    Ok(record)
}

pub fn run_static_exploration(cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_kind(cfg, ExperimentKind::StaticExploration)
}

pub fn run_dynamic_exploration(cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_kind(cfg, ExperimentKind::DynamicExploration)
}

pub fn run_episodic_rl(cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_kind(cfg, ExperimentKind::EpisodicRl)
}

pub fn run_cautious_baseline(cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_kind(cfg, ExperimentKind::CautiousBaseline)
}

fn run_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<RunRecord> {
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "expected a {} configuration, got {}",
            kind.name(),
            cfg.kind.name()
        )));
    }
    run_experiment(cfg)
}

/// Observed transitions and the GP fitted to them.
struct Learner<'a> {
    spec: &'a EnvSpec,
    data: Dataset,
    budget: usize,
}

impl<'a> Learner<'a> {
    fn new(spec: &'a EnvSpec, budget: usize) -> Result<Self> {
        let n = spec.state_dim();
        let data = Dataset::new(n + spec.input_dim(), n, spec.config.obs_noise_std)?;
        Ok(Self { spec, data, budget })
    }

    fn observe(&mut self, x: &DVector<f64>, u: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
        let y = self.spec.observe_error(x, u, rng)?;
        self.data.push(linalg::concat(x, u), y)
    }

    fn fit(&self) -> Result<GpPosterior> {
        let kernels = &self.spec.kernels;
        let beta = self.spec.config.beta;
        if self.data.len() > self.budget {
            GpPosterior::fit(&max_variance_subselect(&self.data, kernels, self.budget)?, kernels, beta)
        } else {
            GpPosterior::fit(&self.data, kernels, beta)
        }
    }

    fn mutual_information(&self) -> Result<f64> {
        mutual_information(&self.spec.kernels, self.data.inputs(), self.data.noise_std())
    }

    /// `n` samples drawn uniformly from the safe set with the safety
    /// controller's inputs.
    fn seed_safe_samples(&mut self, n: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<()> {
        if n == 0 {
            return Ok(());
        }
        for x in sample_polytope(self.spec.constraints.safe(), n, seed)? {
            let u = self.spec.safety.eval(&x);
            self.observe(&x, &u, rng)?;
        }
        Ok(())
    }
}

fn rep_seed(cfg: &ExperimentConfig, rep: usize) -> u64 {
    cfg.seed.wrapping_add(rep as u64)
}

fn rep_solver(cfg: &ExperimentConfig, rep: usize) -> SolverConfig {
    SolverConfig {
        seed: cfg.solver.seed ^ rep_seed(cfg, rep).wrapping_mul(0xD1B5_4A32_D192_ED03),
        ..cfg.solver.clone()
    }
}

fn diag(d: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(d))
}

fn diag_rows(value: f64, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { value } else { 0.0 }).collect())
        .collect()
}

fn problem<'a>(
    cfg: &ExperimentConfig,
    spec: &'a EnvSpec,
    gp: &'a GpPosterior,
    x0: DVector<f64>,
    objective: Objective,
) -> MpcProblem<'a> {
    MpcProblem {
        propagator: Propagator::new(&spec.prior, gp, &spec.lipschitz, spec.config.scheme),
        constraints: &spec.constraints,
        safety: &spec.safety,
        x0,
        gains: vec![spec.safety.gain.clone(); cfg.horizon],
        objective,
        optimize_x0: false,
        x0_sampling_box: None,
        point_eps: cfg.point_eps,
    }
}

fn certified(plan: &SafetyPlan) -> Option<&SafetyPlan> {
    (plan.feasible && plan.certified).then_some(plan)
}

/// Runs the true system from the plan's initial state under its feedback
/// laws. The plan fails if an input or state leaves its polytope or the final
/// state is outside the safe set.
fn plan_violates(spec: &EnvSpec, plan: &SafetyPlan) -> Result<bool> {
    let c = &spec.constraints;
    let mut x = plan.x0.clone();
    for law in &plan.laws {
        let u = law.eval(&x);
        x = spec.step(&x, &u)?;
        let state_ok = c.state().is_none_or(|p| p.contains(&x, 1e-9));
        if !linalg::all_finite(&x) || !c.control().contains(&u, 1e-9) || !state_ok {
            return Ok(true);
        }
    }
    Ok(!c.safe().contains(&x, 1e-9))
}

fn static_exploration(cfg: &ExperimentConfig, spec: &EnvSpec, rep: usize) -> Result<RepOutput> {
    let seed = rep_seed(cfg, rep);
    let solver = rep_solver(cfg, rep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut learner = Learner::new(spec, cfg.gp_budget)?;
    learner.seed_safe_samples(cfg.n_initial, seed, &mut rng)?;
    let mut out = RepOutput::default();
    out.mi.push(MiRecord {
        repetition: rep,
        iteration: 0,
        mutual_information: learner.mutual_information()?,
    });
    let sampling_box = spec.exploration_box(cfg.x0_box_scale);
    for it in 1..=cfg.iterations {
        let gp = learner.fit()?;
        let mut prob = problem(cfg, spec, &gp, spec.reference.clone(), Objective::InitialVarianceSum);
        prob.optimize_x0 = true;
        prob.x0_sampling_box = Some(sampling_box.clone());
        let plan = solve(&prob, None, &solver, it as u64)?;
        let ok = certified(&plan).is_some();
        let u = plan.laws[0].eval(&plan.x0);
        let violation = ok && plan_violates(spec, &plan)?;
        if ok {
            learner.observe(&plan.x0, &u, &mut rng)?;
        }
        out.steps.push(StepRecord {
            repetition: rep,
            episode: 0,
            step: it,
            state: plan.x0.as_slice().to_vec(),
            input: u.as_slice().to_vec(),
            feasible: ok,
            plan_age: 0,
            violation,
        });
        out.mi.push(MiRecord {
            repetition: rep,
            iteration: it,
            mutual_information: learner.mutual_information()?,
        });
    }
    Ok(out)
}

fn dynamic_exploration(cfg: &ExperimentConfig, spec: &EnvSpec, rep: usize) -> Result<RepOutput> {
    let seed = rep_seed(cfg, rep);
    let solver = rep_solver(cfg, rep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut learner = Learner::new(spec, cfg.gp_budget)?;
    learner.seed_safe_samples(cfg.n_initial, seed, &mut rng)?;
    let mut out = RepOutput::default();
    out.mi.push(MiRecord {
        repetition: rep,
        iteration: 0,
        mutual_information: learner.mutual_information()?,
    });
    let objective = if cfg.perf_horizon == 0 {
        Objective::InitialVarianceSum
    } else {
        Objective::Performance(PerformancePlan {
            horizon: cfg.perf_horizon,
            coupling: cfg.coupling,
            objective: PerformanceObjective {
                cost: PerformanceCost::ConfidenceMinusDeviation {
                    deviation_weight: diag_rows(cfg.deviation_weight, spec.state_dim()),
                },
                discount: cfg.discount,
            },
        })
    };
    let mut controller = ControllerState::new(cfg.horizon, spec.safety.clone());
    let mut x = spec.start.clone();
    for it in 1..=cfg.iterations {
        let gp = learner.fit()?;
        let prob = problem(cfg, spec, &gp, x.clone(), objective.clone());
        let warm = controller.warm_start(&prob, &x);
        let plan = solve(&prob, Some(&warm), &solver, it as u64)?;
        let accepted = certified(&plan);
        let u = controller.step(&x, accepted);
        let next = spec.step(&x, &u)?;
        let violation = spec.violates(&u, &next);
        learner.observe(&x, &u, &mut rng)?;
        out.steps.push(StepRecord {
            repetition: rep,
            episode: 0,
            step: it,
            state: x.as_slice().to_vec(),
            input: u.as_slice().to_vec(),
            feasible: accepted.is_some(),
            plan_age: controller.age(),
            violation,
        });
        out.mi.push(MiRecord {
            repetition: rep,
            iteration: it,
            mutual_information: learner.mutual_information()?,
        });
        if violation {
            break;
        }
        x = next;
    }
    Ok(out)
}

/// Per-step input choice of an episodic controller.
enum Policy {
    Safe(ControllerState),
    Cautious(Vec<DVector<f64>>),
}

fn episodic(cfg: &ExperimentConfig, spec: &EnvSpec, rep: usize) -> Result<RepOutput> {
    let seed = rep_seed(cfg, rep);
    let solver = rep_solver(cfg, rep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut learner = Learner::new(spec, cfg.gp_budget)?;
    learner.seed_safe_samples(cfg.n_initial, seed, &mut rng)?;
    let n = spec.state_dim();
    let goal_x = spec
        .goal
        .ok_or_else(|| Error::Config("episodic experiments need a goal position".into()))?;
    let mut goal = DVector::zeros(n);
    goal[0] = goal_x;
    let saturating = PerformanceObjective {
        cost: PerformanceCost::Saturating {
            goal: goal.as_slice().to_vec(),
            weight: (0..n)
                .map(|i| (0..n).map(|j| if i == j { cfg.saturating_weight[i] } else { 0.0 }).collect())
                .collect(),
        },
        discount: cfg.discount,
    };
    let objective = if cfg.perf_horizon == 0 {
        let mut w = vec![0.0; n];
        w[0] = cfg.center_cost_weight;
        Objective::CenterQuadratic {
            goal: goal.clone(),
            weight: diag(&w),
        }
    } else {
        Objective::Performance(PerformancePlan {
            horizon: cfg.perf_horizon,
            coupling: cfg.coupling,
            objective: saturating.clone(),
        })
    };
    let mut out = RepOutput::default();
    for episode in 0..cfg.n_episodes {
        let gp = learner.fit()?;
        let mut policy = match cfg.kind {
            ExperimentKind::CautiousBaseline => Policy::Cautious(Vec::new()),
            _ => Policy::Safe(ControllerState::new(cfg.horizon, spec.safety.clone())),
        };
        let mut transitions = Vec::with_capacity(cfg.n_steps);
        let mut x = spec.start.clone();
        let mut cost = cfg.metric_weight * (x[0] - goal_x).powi(2);
        let mut failed = false;
        let mut steps = 0;
        for t in 0..cfg.n_steps {
            let stream = (episode * cfg.n_steps + t) as u64;
            let (u, feasible, age) = match &mut policy {
                Policy::Safe(controller) => {
                    let prob = problem(cfg, spec, &gp, x.clone(), objective.clone());
                    let warm = controller.warm_start(&prob, &x);
                    let plan = solve(&prob, Some(&warm), &solver, stream)?;
                    let accepted = certified(&plan);
                    let u = controller.step(&x, accepted);
                    (u, accepted.is_some(), controller.age())
                }
                Policy::Cautious(previous) => {
                    let prob = CautiousProblem {
                        prior: &spec.prior,
                        gp: &gp,
                        x0: x.clone(),
                        horizon: cfg.perf_horizon,
                        objective: saturating.clone(),
                        state: spec.constraints.state(),
                        control: spec.constraints.control(),
                        kappa: cfg.kappa,
                    };
                    let warm: Vec<DVector<f64>> = previous.iter().skip(1).cloned().collect();
                    let plan = solve_cautious(&prob, (!warm.is_empty()).then_some(&warm[..]), &solver, stream)?;
                    let u = plan.inputs[0].clone();
                    *previous = plan.inputs;
                    (u, plan.feasible, 0)
                }
            };
            let next = spec.step(&x, &u)?;
            let violation = spec.violates(&u, &next);
            out.steps.push(StepRecord {
                repetition: rep,
                episode,
                step: t,
                state: x.as_slice().to_vec(),
                input: u.as_slice().to_vec(),
                feasible,
                plan_age: age,
                violation,
            });
            transitions.push((x.clone(), u));
            steps += 1;
            if violation {
                failed = true;
                break;
            }
            x = next;
            cost += cfg.metric_weight * (x[0] - goal_x).powi(2);
        }
        out.episodes.push(EpisodeRecord {
            repetition: rep,
            episode,
            cost: (!failed).then_some(cost),
            failed,
            steps,
        });
        for (x, u) in &transitions {
            learner.observe(x, u, &mut rng)?;
        }
    }
    Ok(out)
}
