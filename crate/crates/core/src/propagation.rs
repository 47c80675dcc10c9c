//! One-step and multi-step ellipsoidal over-approximation of the reachable
//! states of `x⁺ = h(x, u) + g(x, u)` under affine feedback laws.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ellipsoid::{self, Ellipsoid, DEFAULT_SHAPE_FLOOR};
use crate::error::{check_dim, Error, Result};
use crate::gp::GpPosterior;
use crate::linalg;

/// Known prior model `h(x, u)`.
pub trait PriorModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `(∂h/∂x, ∂h/∂u)`; central differences unless overridden.
    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        fd_jacobian(self, x, u, 1e-6)
    }

    /// `(A, B)` when `h(x, u) = A x + B u`.
    fn as_linear(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        None
    }
}

pub(crate) fn fd_jacobian<P: PriorModel + ?Sized>(
    prior: &P,
    x: &DVector<f64>,
    u: &DVector<f64>,
    step: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = x.len();
    let q = u.len();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DMatrix::zeros(p, q);
    for i in 0..p {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        let col = (prior.eval(&xp, u) - prior.eval(&xm, u)) / (2.0 * step);
        a.set_column(i, &col);
    }
    for i in 0..q {
        let mut up = u.clone();
        let mut um = u.clone();
        up[i] += step;
        um[i] -= step;
        let col = (prior.eval(x, &up) - prior.eval(x, &um)) / (2.0 * step);
        b.set_column(i, &col);
    }
    (a, b)
}

/// `h(x, u) = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPrior {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearPrior {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        check_dim(a.nrows(), a.ncols(), "prior A must be square")?;
        check_dim(a.nrows(), b.nrows(), "prior B rows")?;
        Ok(Self { a, b })
    }
}

impl PriorModel for LinearPrior {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }

    fn as_linear(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        Some((&self.a, &self.b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConstants {
    /// Per-output Lipschitz constants of `∇h`.
    pub grad_h: Vec<f64>,
    /// Lipschitz constant of the model error `g`.
    pub g: f64,
    /// Per-output Lipschitz constants of `∇μ`.
    pub grad_mu: Vec<f64>,
    /// Lipschitz constant of `σ`.
    pub sigma: f64,
}

impl LipschitzConstants {
    pub fn zero(p: usize) -> Self {
        Self {
            grad_h: vec![0.0; p],
            g: 0.0,
            grad_mu: vec![0.0; p],
            sigma: 0.0,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        check_dim(p, self.grad_h.len(), "Lipschitz constants of grad h")?;
        check_dim(p, self.grad_mu.len(), "Lipschitz constants of grad mu")?;
        let all = self
            .grad_h
            .iter()
            .chain(&self.grad_mu)
            .chain([&self.g, &self.sigma]);
        for &v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "Lipschitz constants must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `u(x) = K (x − anchor) + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub anchor: DVector<f64>,
}

impl FeedbackLaw {
    pub fn new(gain: DMatrix<f64>, offset: DVector<f64>, anchor: DVector<f64>) -> Result<Self> {
        check_dim(gain.nrows(), offset.len(), "feedback offset")?;
        check_dim(gain.ncols(), anchor.len(), "feedback anchor")?;
        Ok(Self {
            gain,
            offset,
            anchor,
        })
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gain * (x - &self.anchor) + &self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationScheme {
    #[default]
    LocallyConstant,
    MeanLinearized,
}

/// Reachable-set propagator bundling the prior, the GP and the remainder
/// constants.
#[derive(Clone)]
pub struct Propagator<'a> {
    pub prior: &'a dyn PriorModel,
    pub gp: &'a GpPosterior,
    pub lipschitz: &'a LipschitzConstants,
    pub scheme: PropagationScheme,
    pub shape_floor: f64,
    pub power_iterations: Option<usize>,
}

/// Ellipsoids `R₁..R_T` and the laws with their anchors set to `R₀..R_{T−1}`.
#[derive(Debug, Clone)]
pub struct Reachability {
    pub ellipsoids: Vec<Ellipsoid>,
    pub laws: Vec<FeedbackLaw>,
}

impl<'a> Propagator<'a> {
    pub fn new(
        prior: &'a dyn PriorModel,
        gp: &'a GpPosterior,
        lipschitz: &'a LipschitzConstants,
        scheme: PropagationScheme,
    ) -> Self {
        Self {
            prior,
            gp,
            lipschitz,
            scheme,
            shape_floor: DEFAULT_SHAPE_FLOOR,
            power_iterations: None,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.prior.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.prior.input_dim()
    }

    /// Over-approximation of `{h(x, u(x)) + g(x, u(x)) : x ∈ R}` for the law
    /// anchored at the center of `R`.
    pub fn one_step(&self, r: &Ellipsoid, gain: &DMatrix<f64>, offset: &DVector<f64>) -> Result<Ellipsoid> {
        let p = self.state_dim();
        let q = self.input_dim();
        check_dim(p, r.dim(), "ellipsoid dimension")?;
        check_dim(q, gain.nrows(), "gain rows")?;
        check_dim(p, gain.ncols(), "gain cols")?;
        check_dim(q, offset.len(), "feed-forward input")?;
        check_dim(p + q, self.gp.input_dim(), "GP input dimension")?;
        check_dim(p, self.gp.output_dim(), "GP output dimension")?;
        if !linalg::all_finite(offset) {
            return Err(Error::InvalidInput("non-finite feed-forward input".into()));
        }
        let center = r.center();
        let zbar = linalg::concat(center, offset);
        let h = self.prior.eval(center, offset);
        let (ah, bh) = self.prior.jacobian(center, offset);

        let (mu, sigma, hmat) = match self.scheme {
            PropagationScheme::LocallyConstant => {
                let (mu, var) = self.gp.predict_var(&zbar)?;
                (mu, var.map(f64::sqrt), &ah + &bh * gain)
            }
            PropagationScheme::MeanLinearized => {
                let full = self.gp.predict_full(&zbar)?;
                let amu = full.mean_jac.columns(0, p).into_owned();
                let bmu = full.mean_jac.columns(p, q).into_owned();
                (full.mean, full.var.map(f64::sqrt), (&ah + amu) + (&bh + bmu) * gain)
            }
        };
        if !linalg::all_finite(&mu) || !linalg::all_finite(&sigma) {
            return Err(Error::InvalidInput("non-finite GP prediction".into()));
        }

        let s = linalg::stack_identity_gain(gain);
        let l = r.max_scaled_distance(&s, self.power_iterations)?;
        let beta = self.gp.beta();
        let lc = self.lipschitz;
        let remainder = DVector::from_fn(p, |j, _| match self.scheme {
            PropagationScheme::LocallyConstant => {
                beta * sigma[j] + lc.grad_h[j] * l * l / 2.0 + lc.g * l
            }
            PropagationScheme::MeanLinearized => {
                beta * (sigma[j] + lc.sigma * l) + (lc.grad_h[j] + lc.grad_mu[j]) * l * l / 2.0
            }
        });

        let affine = linalg::symmetrize(&(&hmat * r.shape() * hmat.transpose()));
        let rect = ellipsoid::rect_shape(&remainder, self.shape_floor);
        let shape = ellipsoid::minkowski_shape(&affine, &rect);
        Ellipsoid::from_computed(h + mu, shape)
    }

    /// `R_{t+1} = one_step(R_t, u_t)` with each law anchored at the center of
    /// its input ellipsoid.
    pub fn multi_step(
        &self,
        r0: &Ellipsoid,
        gains: &[DMatrix<f64>],
        offsets: &[DVector<f64>],
    ) -> Result<Reachability> {
        check_dim(gains.len(), offsets.len(), "number of feed-forward inputs")?;
        if gains.is_empty() {
            return Err(Error::InvalidInput("horizon must be ≥ 1".into()));
        }
        let mut ellipsoids = Vec::with_capacity(gains.len());
        let mut laws = Vec::with_capacity(gains.len());
        let mut current = r0.clone();
        for (k, off) in gains.iter().zip(offsets) {
            let next = self.one_step(&current, k, off)?;
            laws.push(FeedbackLaw::new(k.clone(), off.clone(), current.center().clone())?);
            ellipsoids.push(next.clone());
            current = next;
        }
        Ok(Reachability { ellipsoids, laws })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{Dataset, KernelSpec};
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn empty_gp(p: usize, q: usize, beta: f64) -> GpPosterior {
        let ds = Dataset::new(p + q, p, 0.1).unwrap();
        let k = KernelSpec::linear(vec![0.0; p + q]);
        GpPosterior::fit(&ds, &vec![k; p], beta).unwrap()
    }

    #[test]
    fn pure_affine_case_is_exact() {
        let prior = LinearPrior::new(dmatrix![1.0, 0.1; 0.0, 0.9], dmatrix![0.0; 0.1]).unwrap();
        let gp = empty_gp(2, 1, 0.0);
        let lc = LipschitzConstants::zero(2);
        let prop = Propagator::new(&prior, &gp, &lc, PropagationScheme::LocallyConstant);
        let q = dmatrix![0.2, 0.05; 0.05, 0.1];
        let r = Ellipsoid::new(dvector![0.3, -0.2], q.clone()).unwrap();
        let out = prop.one_step(&r, &DMatrix::zeros(1, 2), &dvector![0.5]).unwrap();
        let expected_c = &prior.a * dvector![0.3, -0.2] + &prior.b * dvector![0.5];
        assert_relative_eq!(out.center(), &expected_c, epsilon = 1e-14);
        let expected_q = &prior.a * q * prior.a.transpose();
        // The floor contributes O(1e-9) through the Minkowski sum.
        assert_relative_eq!(out.shape(), &expected_q, epsilon = 1e-7);
    }

    #[test]
    fn anchored_law_returns_offset() {
        let law = FeedbackLaw::new(dmatrix![1.0, -2.0], dvector![0.7], dvector![0.3, 0.1]).unwrap();
        assert_eq!(law.eval(&dvector![0.3, 0.1]), dvector![0.7]);
    }

    #[test]
    fn single_step_sequence_matches_one_step() {
        let prior = LinearPrior::new(dmatrix![1.0, 0.1; 0.0, 1.0], dmatrix![0.0; 0.1]).unwrap();
        let ds = Dataset::from_pairs(
            vec![dvector![0.1, 0.0, 0.2]],
            vec![dvector![0.01, -0.02]],
            0.05,
        )
        .unwrap();
        let k = KernelSpec::sum(vec![1.0; 3], 0.1, vec![0.01; 3]);
        let gp = GpPosterior::fit(&ds, &[k.clone(), k], 2.0).unwrap();
        let lc = LipschitzConstants {
            grad_h: vec![0.1, 0.1],
            g: 0.2,
            grad_mu: vec![0.1, 0.1],
            sigma: 0.1,
        };
        for scheme in [PropagationScheme::LocallyConstant, PropagationScheme::MeanLinearized] {
            let prop = Propagator::new(&prior, &gp, &lc, scheme);
            let r = Ellipsoid::new(dvector![0.2, 0.1], DMatrix::identity(2, 2) * 0.01).unwrap();
            let gain = dmatrix![-1.0, -1.5];
            let one = prop.one_step(&r, &gain, &dvector![0.1]).unwrap();
            let multi = prop.multi_step(&r, std::slice::from_ref(&gain), &[dvector![0.1]]).unwrap();
            assert_eq!(multi.ellipsoids[0].center(), one.center());
            assert_eq!(multi.ellipsoids[0].shape(), one.shape());
            assert_eq!(multi.laws[0].anchor, dvector![0.2, 0.1]);
        }
    }

    #[test]
    fn fd_jacobian_of_linear_prior() {
        let prior = LinearPrior::new(dmatrix![1.0, 0.1; -0.3, 0.9], dmatrix![0.0; 0.1]).unwrap();
        let (a, b) = fd_jacobian(&prior, &dvector![0.4, 0.2], &dvector![0.1], 1e-6);
        assert_relative_eq!(a, prior.a, epsilon = 1e-8);
        assert_relative_eq!(b, prior.b, epsilon = 1e-8);
    }
}
