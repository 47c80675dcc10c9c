use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvConfig, SystemKind};
use crate::error::{Error, Result};
use crate::mpc::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    StaticExploration,
    DynamicExploration,
    EpisodicRl,
    CautiousBaseline,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::StaticExploration => "static_exploration",
            Self::DynamicExploration => "dynamic_exploration",
            Self::EpisodicRl => "episodic_rl",
            Self::CautiousBaseline => "cautious_baseline",
        }
    }

    /// Runs of this kind certify every applied input.
    pub fn is_safe_mpc(self) -> bool {
        !matches!(self, Self::CautiousBaseline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub env: EnvConfig,
    /// Safety horizon `T`.
    pub horizon: usize,
    /// Performance horizon `H`; 0 disables the performance trajectory.
    pub perf_horizon: usize,
    /// Number of inputs `r` shared by both trajectories.
    pub coupling: usize,
    /// Exploration iterations.
    pub iterations: usize,
    pub n_steps: usize,
    pub n_episodes: usize,
    pub repetitions: usize,
    /// Base seed; repetition `i` uses `seed + i`.
    pub seed: u64,
    pub solver: SolverConfig,
    /// Largest number of training points kept by the GP.
    pub gp_budget: usize,
    /// Initial samples collected in the safe set with the safety controller.
    pub n_initial: usize,
    pub discount: f64,
    /// Weight of the squared cart distance in the objective without a
    /// performance trajectory.
    pub center_cost_weight: f64,
    /// Weight of the squared cart distance in the episode cost.
    pub metric_weight: f64,
    /// Diagonal of the saturating-cost weight.
    pub saturating_weight: Vec<f64>,
    /// Scalar deviation weight between performance and safety trajectories
    /// in dynamic exploration.
    pub deviation_weight: f64,
    /// Chance-constraint scaling of the cautious baseline.
    pub kappa: f64,
    /// Random initial states of static exploration are drawn from the
    /// safe level-set box scaled by this factor.
    pub x0_box_scale: f64,
    /// Shape `ε I` of the point ellipsoid around the current state.
    pub point_eps: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::StaticExploration,
            env: EnvConfig::default(),
            horizon: 1,
            perf_horizon: 0,
            coupling: 1,
            iterations: 100,
            n_steps: 50,
            n_episodes: 8,
            repetitions: 1,
            seed: 0,
            solver: SolverConfig::default(),
            gp_budget: crate::gp::DEFAULT_BUDGET,
            n_initial: 25,
            discount: 0.95,
            center_cost_weight: 0.1,
            metric_weight: 0.1,
            saturating_weight: vec![0.1, 0.0, 0.0, 0.0],
            deviation_weight: 1.0,
            kappa: 2.0,
            x0_box_scale: 1.5,
            point_eps: 1e-10,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for each experiment kind.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = Self {
            kind,
            ..Self::default()
        };
        match kind {
            ExperimentKind::StaticExploration => Self {
                horizon: 4,
                solver: SolverConfig {
                    multistarts: 8,
                    max_iters: 40,
                    penalty_stages: 4,
                    ..SolverConfig::default()
                },
                ..base
            },
            ExperimentKind::DynamicExploration => Self {
                horizon: 4,
                perf_horizon: 5,
                solver: SolverConfig {
                    multistarts: 2,
                    max_iters: 40,
                    penalty_stages: 4,
                    ..SolverConfig::default()
                },
                ..base
            },
            ExperimentKind::EpisodicRl | ExperimentKind::CautiousBaseline => Self {
                env: EnvConfig::cart_pole(),
                horizon: 2,
                perf_horizon: 15,
                repetitions: 6,
                n_initial: 0,
                solver: SolverConfig {
                    multistarts: 0,
                    max_iters: 10,
                    penalty_stages: 3,
                    ..SolverConfig::default()
                },
                ..base
            },
        }
    }

    /// Long-run iteration counts and restarts.
    pub fn apply_full_scale(&mut self) {
        match self.kind {
            ExperimentKind::StaticExploration => {
                self.iterations = 300;
                self.solver.multistarts = 25;
                self.solver.max_iters = 60;
                self.solver.penalty_stages = 5;
            }
            ExperimentKind::DynamicExploration => {
                self.iterations = 200;
            }
            ExperimentKind::EpisodicRl | ExperimentKind::CautiousBaseline => {
                self.n_episodes = 8;
                self.n_steps = 50;
                self.repetitions = 6;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.horizon == 0 && self.kind != ExperimentKind::CautiousBaseline {
            return bad("horizon T must be ≥ 1");
        }
        if self.repetitions == 0 || self.gp_budget == 0 {
            return bad("repetitions and GP budget must be ≥ 1");
        }
        match self.kind {
            ExperimentKind::EpisodicRl | ExperimentKind::CautiousBaseline => {
                if self.n_steps == 0 || self.n_episodes == 0 {
                    return bad("n_steps and n_episodes must be ≥ 1");
                }
                if self.env.system != SystemKind::CartPole {
                    return bad("episodic experiments require the cart-pole");
                }
                if self.saturating_weight.len() != self.env.state_dim() {
                    return bad("saturating weight needs one entry per state");
                }
            }
            _ => {}
        }
        if self.kind == ExperimentKind::CautiousBaseline && self.perf_horizon == 0 {
            return bad("the cautious baseline needs H ≥ 1");
        }
        if self.perf_horizon > 0
            && self.kind != ExperimentKind::CautiousBaseline
            && (self.coupling == 0 || self.coupling > self.horizon.min(self.perf_horizon))
        {
            return bad("coupling r must lie in 1..=min(T, H)");
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1)");
        }
        if !(self.point_eps > 0.0) || !(self.kappa >= 0.0) || !(self.x0_box_scale > 0.0) {
            return bad("point_eps and x0_box_scale must be positive, kappa nonnegative");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the keys present in `text` on top of `self`; nested tables are
    /// merged key by key.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let cfg_err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let mut base = toml::Table::try_from(self).map_err(|e| cfg_err(&e))?;
        let user: toml::Table = toml::from_str(text).map_err(|e| cfg_err(&e))?;
        merge_tables(&mut base, user);
        base.try_into().map_err(|e| cfg_err(&e))
    }

    /// Hex SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
