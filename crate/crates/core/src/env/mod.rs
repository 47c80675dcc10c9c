//! Ground-truth systems, erroneous prior models, LQR safety controllers and
//! safe sets, bundled into an [`EnvSpec`] built from an [`EnvConfig`].

pub mod cartpole;
pub mod dynamics;
pub mod lqr;
pub mod pendulum;
pub mod safe_set;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use cartpole::{cartpole_step, CartPole, CartPoleParams};
pub use dynamics::{linearize_discretize, rk4_step, Dynamics, DEFAULT_SUBSTEPS};
pub use lqr::{closed_loop_radius, lqr_synthesize, Lqr};
pub use pendulum::{pendulum_step, Pendulum, PendulumParams};
pub use safe_set::{build_safe_set, sample_polytope, ClosedLoop, SafeSet, SafeSetOptions};

use crate::constraints::ConstraintSet;
use crate::ellipsoid::Polytope;
use crate::error::{Error, Result};
use crate::gp::KernelSpec;
use crate::linalg;
use crate::mpc::SafetyController;
use crate::propagation::{LinearPrior, LipschitzConstants, PriorModel, PropagationScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Pendulum,
    CartPole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumConfig {
    pub params: PendulumParams,
    /// Mass used by the prior model.
    pub prior_mass: f64,
    /// Friction used by the prior model.
    pub prior_eta: f64,
    pub lqr_q: Vec<f64>,
    pub lqr_r: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            params: PendulumParams::default(),
            prior_mass: 0.1,
            prior_eta: 0.0,
            lqr_q: vec![1.0, 2.0],
            lqr_r: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartPoleConfig {
    pub params: CartPoleParams,
    /// Pole mass used by the prior model.
    pub prior_pole_mass: f64,
    /// Rail friction used by the prior model.
    pub prior_eta: f64,
    pub lqr_q: Vec<f64>,
    pub lqr_r: f64,
    /// Cart position the safety controller regulates to and around which the
    /// safe set is built; the start position when absent.
    pub safe_center: Option<f64>,
}

impl Default for CartPoleConfig {
    fn default() -> Self {
        Self {
            params: CartPoleParams::default(),
            prior_pole_mass: 0.4,
            prior_eta: 0.0,
            safe_center: None,
            lqr_q: vec![4.0, 8.0, 12.0, 2.0],
            lqr_r: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub system: SystemKind,
    /// Control interval in seconds.
    pub dt: f64,
    /// RK4 substeps per control interval.
    pub substeps: usize,
    /// Standard deviation of the observation noise on each state.
    pub obs_noise_std: f64,
    /// Confidence scaling of the GP intervals.
    pub beta: f64,
    pub pendulum: PendulumConfig,
    pub cart_pole: CartPoleConfig,
    /// GP kernels per output; system defaults when absent.
    pub kernels: Option<Vec<KernelSpec>>,
    /// Lipschitz constant of the model error; estimated by sampling when
    /// absent.
    pub lipschitz_g: Option<f64>,
    pub lipschitz_grad_mu: f64,
    pub lipschitz_sigma: f64,
    /// Samples used to estimate the model-error Lipschitz constant.
    pub lipschitz_samples: usize,
    pub scheme: PropagationScheme,
    pub safe_set: SafeSetOptions,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            system: SystemKind::Pendulum,
            dt: 0.05,
            substeps: DEFAULT_SUBSTEPS,
            obs_noise_std: 1e-3,
            beta: 2.0,
            pendulum: PendulumConfig::default(),
            cart_pole: CartPoleConfig::default(),
            kernels: None,
            lipschitz_g: None,
            lipschitz_grad_mu: 0.01,
            lipschitz_sigma: 0.01,
            lipschitz_samples: 500,
            scheme: PropagationScheme::MeanLinearized,
            safe_set: SafeSetOptions::default(),
        }
    }
}

impl EnvConfig {
    pub fn pendulum() -> Self {
        Self::default()
    }

    pub fn cart_pole() -> Self {
        Self {
            system: SystemKind::CartPole,
            ..Self::default()
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.system {
            SystemKind::Pendulum => 2,
            SystemKind::CartPole => 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) || self.substeps == 0 {
            return Err(Error::Config("dt must be positive and substeps ≥ 1".into()));
        }
        if !(self.obs_noise_std.is_finite() && self.obs_noise_std > 0.0) {
            return Err(Error::Config("observation noise must be positive".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        let (q, r) = match self.system {
            SystemKind::Pendulum => {
                self.pendulum.params.validate()?;
                (&self.pendulum.lqr_q, self.pendulum.lqr_r)
            }
            SystemKind::CartPole => {
                self.cart_pole.params.validate()?;
                (&self.cart_pole.lqr_q, self.cart_pole.lqr_r)
            }
        };
        if q.len() != self.state_dim() || q.iter().any(|v| !(*v > 0.0)) || !(r > 0.0) {
            return Err(Error::Config("LQR weights must be positive with one entry per state".into()));
        }
        if let Some(ks) = &self.kernels {
            if ks.len() != self.state_dim() {
                return Err(Error::Config("one kernel per state is required".into()));
            }
            for k in ks {
                k.validate()?;
                if k.input_dim() != self.state_dim() + 1 {
                    return Err(Error::Config("kernel input dimension must be states + inputs".into()));
                }
            }
        }
        Ok(())
    }

    /// Kernels used when none are configured.
    pub fn default_kernels(&self) -> Vec<KernelSpec> {
        match self.system {
            SystemKind::Pendulum => vec![KernelSpec::sum(vec![1.0, 1.0, 1.0], 1e-4, vec![1.0, 1.0, 1.0]); 2],
            SystemKind::CartPole => {
                // Output amplitudes follow the size of the prior mismatch in
                // each state; input scales follow its sensitivity to each
                // regressor. The error does not depend on the cart position.
                let outputs: [f64; 4] = [0.0025, 0.1, 0.005, 0.2];
                let inputs: [f64; 5] = [0.0, 0.1, 1.0, 0.05, 0.005];
                outputs
                    .iter()
                    .map(|s| {
                        KernelSpec::sum(
                            vec![1.0; 5],
                            (0.02 * s).powi(2),
                            inputs.iter().map(|c| (s * c).powi(2)).collect(),
                        )
                    })
                    .collect()
            }
        }
    }
}

/// Fully assembled environment.
pub struct EnvSpec {
    pub config: EnvConfig,
    pub dynamics: Box<dyn Dynamics>,
    /// Erroneous prior model `h`.
    pub prior: LinearPrior,
    /// Linearization of the true system at the origin.
    pub true_a: DMatrix<f64>,
    pub true_b: DMatrix<f64>,
    pub lqr: Lqr,
    pub safe_set: SafeSet,
    pub constraints: ConstraintSet,
    pub safety: SafetyController,
    pub kernels: Vec<KernelSpec>,
    pub lipschitz: LipschitzConstants,
    /// Equilibrium regulated by the safety controller and center of the safe
    /// set.
    pub reference: DVector<f64>,
    /// Initial state of episodes and exploration runs.
    pub start: DVector<f64>,
    /// Goal cart position (cart-pole only).
    pub goal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumption2Report {
    pub samples: usize,
    pub steps: usize,
    /// Rollouts that left `X` or the invariant level set.
    pub violations: usize,
    /// Rollouts whose final level did not drop below half the initial one.
    pub not_converging: usize,
}

impl Assumption2Report {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.not_converging == 0
    }
}

/// True and prior dynamics, state polytope, LQR weights, start, goal and
/// reference for one system.
type SystemParts<'a> = (
    Box<dyn Dynamics>,
    Box<dyn Dynamics>,
    Option<Polytope>,
    &'a Vec<f64>,
    f64,
    DVector<f64>,
    Option<f64>,
    DVector<f64>,
);

impl EnvSpec {
    pub fn from_config(config: &EnvConfig) -> Result<Self> {
        config.validate()?;
        let dt = config.dt;
        let (dynamics, prior_dyn, state, q, r, start, goal, reference): SystemParts<'_> = match config.system {
            SystemKind::Pendulum => {
                let c = &config.pendulum;
                let prior = PendulumParams {
                    m: c.prior_mass,
                    eta: c.prior_eta,
                    ..c.params.clone()
                };
                (
                    Box::new(Pendulum::new(c.params.clone())?),
                    Box::new(Pendulum::new(prior)?),
                    None,
                    &c.lqr_q,
                    c.lqr_r,
                    DVector::zeros(2),
                    None,
                    DVector::zeros(2),
                )
            }
            SystemKind::CartPole => {
                let c = &config.cart_pole;
                let p = &c.params;
                let prior = CartPoleParams {
                    pole_mass: c.prior_pole_mass,
                    eta: c.prior_eta,
                    ..p.clone()
                };
                let inf = f64::INFINITY;
                let th = p.angle_limit_rad();
                let x = Polytope::from_bounds(&[p.rail_min, -inf, -th, -inf], &[p.rail_max, inf, th, inf])?;
                (
                    Box::new(CartPole::new(p.clone())?),
                    Box::new(CartPole::new(prior)?),
                    Some(x),
                    &c.lqr_q,
                    c.lqr_r,
                    DVector::from_vec(vec![p.start, 0.0, 0.0, 0.0]),
                    Some(p.goal),
                    DVector::from_vec(vec![c.safe_center.unwrap_or(p.start), 0.0, 0.0, 0.0]),
                )
            }
        };
        let n = dynamics.state_dim();
        let m = dynamics.input_dim();
        let origin = DVector::zeros(n);
        let u0 = DVector::zeros(m);
        let (pa, pb) = linearize_discretize(prior_dyn.as_ref(), &origin, &u0, dt)?;
        let prior = LinearPrior::new(pa, pb)?;
        let (true_a, true_b) = linearize_discretize(dynamics.as_ref(), &origin, &u0, dt)?;
        let lqr = lqr_synthesize(
            &true_a,
            &true_b,
            &DMatrix::from_diagonal(&DVector::from_vec(q.clone())),
            &DMatrix::from_element(1, 1, r),
        )?;
        if closed_loop_radius(&true_a, &true_b, &lqr.gain) >= 1.0 {
            return Err(Error::SafeSet("LQR does not stabilize the linearized system".into()));
        }
        // The safe set is built in coordinates centered at the reference,
        // which is an equilibrium because the systems are invariant to the
        // shift.
        let shift = |p: &Polytope, sign: f64| {
            Polytope::new(p.normals().clone(), p.offsets() + p.normals() * &reference * sign)
        };
        let centered_state = state.as_ref().map(|x| shift(x, -1.0)).transpose()?;
        let mut safe_set = {
            let closed = ClosedLoop {
                dynamics: dynamics.as_ref(),
                gain: &lqr.gain,
                dt,
                substeps: config.substeps,
            };
            build_safe_set(&closed, &lqr.cost, centered_state.as_ref(), &config.safe_set)?
        };
        safe_set.polytope = shift(&safe_set.polytope, 1.0)?;
        let (lo, hi) = dynamics.input_bounds();
        let control = Polytope::from_bounds(lo.as_slice(), hi.as_slice())?;
        let constraints = ConstraintSet::new(state, control, safe_set.polytope.clone())?;
        let safety = SafetyController {
            gain: -lqr.gain.clone(),
            bias: &lqr.gain * &reference,
            lower: lo,
            upper: hi,
        };
        let kernels = config.kernels.clone().unwrap_or_else(|| config.default_kernels());
        let mut spec = Self {
            config: config.clone(),
            dynamics,
            prior,
            true_a,
            true_b,
            lqr,
            safe_set,
            constraints,
            safety,
            kernels,
            reference,
            lipschitz: LipschitzConstants {
                grad_h: vec![0.0; n],
                g: 0.0,
                grad_mu: vec![config.lipschitz_grad_mu; n],
                sigma: config.lipschitz_sigma,
            },
            start,
            goal,
        };
        spec.lipschitz.g = match config.lipschitz_g {
            Some(v) => v,
            None => spec.estimate_error_lipschitz(config.lipschitz_samples, config.safe_set.seed)?,
        };
        spec.lipschitz.validate(n)?;
        Ok(spec)
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    /// True transition `f(x, u)` with the input clamped to its bounds.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        rk4_step(self.dynamics.as_ref(), x, u, self.config.dt, self.config.substeps)
    }

    /// `g(x, u) = f(x, u) − h(x, u)` for an input within bounds.
    pub fn model_error(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.step(x, u)? - self.prior.eval(x, u))
    }

    /// Noisy observation of the model error at `(x, u)`, the GP training
    /// target.
    pub fn observe_error<R: Rng + ?Sized>(&self, x: &DVector<f64>, u: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        let noise = Normal::new(0.0, self.config.obs_noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let g = self.model_error(x, u)?;
        Ok(g.map(|v| v + noise.sample(rng)))
    }

    /// A transition that applies `u` and lands in `next` breaks the
    /// constraints. The pendulum has no state polytope and counts as failed
    /// once it tips past horizontal.
    pub fn violates(&self, u: &DVector<f64>, next: &DVector<f64>) -> bool {
        if !linalg::all_finite(next) || !self.constraints.control().contains(u, 1e-9) {
            return true;
        }
        match self.config.system {
            SystemKind::Pendulum => next[0].abs() > std::f64::consts::FRAC_PI_2,
            SystemKind::CartPole => self.constraints.state().is_some_and(|x| !x.contains(next, 1e-9)),
        }
    }

    pub fn closed_loop(&self) -> ClosedLoop<'_> {
        ClosedLoop {
            dynamics: self.dynamics.as_ref(),
            gain: &self.lqr.gain,
            dt: self.config.dt,
            substeps: self.config.substeps,
        }
    }

    /// `(x − x_ref)ᵀ P (x − x_ref)`.
    pub fn level(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.reference;
        d.dot(&(&self.lqr.cost * &d))
    }

    /// Box around the invariant level set, scaled by `factor` and clipped to
    /// the state constraints.
    pub fn exploration_box(&self, factor: f64) -> (DVector<f64>, DVector<f64>) {
        let n = self.state_dim();
        let pinv = self.lqr.cost.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(n, n));
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..n {
            let r = factor * (self.safe_set.level * pinv[(i, i)]).sqrt();
            lo[i] = self.reference[i] - r;
            hi[i] = self.reference[i] + r;
        }
        if let Some(x) = self.constraints.state() {
            for i in 0..x.num_rows() {
                let h = x.normals().row(i);
                let nz: Vec<usize> = (0..n).filter(|&k| h[k] != 0.0).collect();
                if nz.len() == 1 {
                    let k = nz[0];
                    let bound = x.offsets()[i] / h[k];
                    if h[k] > 0.0 {
                        hi[k] = hi[k].min(bound);
                    } else {
                        lo[k] = lo[k].max(bound);
                    }
                }
            }
        }
        (lo, hi)
    }

    /// Largest spectral norm of `[∂g/∂x, ∂g/∂u]` over uniform samples from
    /// twice the safe level-set box and the input bounds.
    pub fn estimate_error_lipschitz(&self, samples: usize, seed: u64) -> Result<f64> {
        let (lo, hi) = self.exploration_box(2.0);
        let (ulo, uhi) = self.dynamics.input_bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let n = self.state_dim();
        let m = self.input_dim();
        let h = 1e-5;
        let mut best: f64 = 0.0;
        for _ in 0..samples {
            let x = DVector::from_fn(n, |i, _| rng.random_range(lo[i]..=hi[i]));
            // Keep central differences inside the input bounds.
            let u = DVector::from_fn(m, |i, _| rng.random_range((ulo[i] + h)..=(uhi[i] - h)));
            let mut jac = DMatrix::zeros(n, n + m);
            for k in 0..n + m {
                let (mut xp, mut xm, mut up, mut um) = (x.clone(), x.clone(), u.clone(), u.clone());
                if k < n {
                    xp[k] += h;
                    xm[k] -= h;
                } else {
                    up[k - n] += h;
                    um[k - n] -= h;
                }
                let col = (self.model_error(&xp, &up)? - self.model_error(&xm, &um)?) / (2.0 * h);
                jac.set_column(k, &col);
            }
            best = best.max(jac.singular_values().max());
        }
        Ok(best)
    }

    /// Largest sampled `‖g‖∞` over the same region as the Lipschitz estimate.
    pub fn model_error_sup(&self, samples: usize, seed: u64) -> Result<f64> {
        let (lo, hi) = self.exploration_box(2.0);
        let (ulo, uhi) = self.dynamics.input_bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sup: f64 = 0.0;
        for _ in 0..samples {
            let x = DVector::from_fn(self.state_dim(), |i, _| rng.random_range(lo[i]..=hi[i]));
            let u = DVector::from_fn(self.input_dim(), |i, _| rng.random_range(ulo[i]..=uhi[i]));
            sup = sup.max(self.model_error(&x, &u)?.amax());
        }
        Ok(sup)
    }

    /// Rolls out `π_safe` on the true system from uniform samples of the safe
    /// polytope and counts constraint or level-set violations.
    pub fn check_assumption2(&self, samples: usize, seconds: f64, seed: u64) -> Result<Assumption2Report> {
        let starts = sample_polytope(self.constraints.safe(), samples, seed)?;
        let steps = (seconds / self.config.dt).round() as usize;
        let level = self.safe_set.level;
        let mut violations = 0;
        let mut not_converging = 0;
        for x0 in starts {
            let v0 = self.level(&x0);
            let mut x = x0;
            let mut bad = false;
            for _ in 0..steps {
                let u = self.safety.eval(&x);
                x = self.step(&x, &u)?;
                if !linalg::all_finite(&x)
                    || !self.constraints.point_satisfied(&x, &u, 1e-9)
                    || self.level(&x) > level * (1.0 + 1e-9)
                {
                    bad = true;
                    break;
                }
            }
            if bad {
                violations += 1;
            } else if self.level(&x) > 0.5 * v0 + 1e-12 {
                not_converging += 1;
            }
        }
        Ok(Assumption2Report {
            samples,
            steps,
            violations,
            not_converging,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = EnvConfig::cart_pole();
        let text = toml::to_string(&cfg).unwrap();
        let back: EnvConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.cart_pole.params.goal, 2.6);
        assert_eq!(back.pendulum.params.m, 0.15);
    }

    #[test]
    fn pendulum_prior_uses_lower_mass_and_no_friction() {
        let cfg = EnvConfig::pendulum();
        assert!(cfg.pendulum.prior_mass < cfg.pendulum.params.m);
        assert_eq!(cfg.pendulum.prior_eta, 0.0);
    }
}
