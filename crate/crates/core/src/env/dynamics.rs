//! Continuous-time dynamics, fixed-step RK4 integration and zero-order-hold
//! linearization.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Default number of RK4 substeps per control interval.
pub const DEFAULT_SUBSTEPS: usize = 10;

/// `ẋ = f_c(x, u)` with box-bounded inputs.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Time derivative of the state.
    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// `(lower, upper)` input bounds applied before integration.
    fn input_bounds(&self) -> (DVector<f64>, DVector<f64>);

    /// `(∂f_c/∂x, ∂f_c/∂u)`; central differences unless overridden.
    fn continuous_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        fd_continuous_jacobian(self, x, u, 1e-6)
    }

    fn clamp_input(&self, u: &DVector<f64>) -> DVector<f64> {
        let (lo, hi) = self.input_bounds();
        DVector::from_fn(u.len(), |i, _| u[i].clamp(lo[i], hi[i]))
    }
}

pub fn fd_continuous_jacobian<D: Dynamics + ?Sized>(
    dynamics: &D,
    x: &DVector<f64>,
    u: &DVector<f64>,
    step: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = x.len();
    let q = u.len();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DMatrix::zeros(p, q);
    for i in 0..p {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        let col = (dynamics.derivative(&xp, u)? - dynamics.derivative(&xm, u)?) / (2.0 * step);
        a.set_column(i, &col);
    }
    for i in 0..q {
        let mut up = u.clone();
        let mut um = u.clone();
        up[i] += step;
        um[i] -= step;
        let col = (dynamics.derivative(x, &up)? - dynamics.derivative(x, &um)?) / (2.0 * step);
        b.set_column(i, &col);
    }
    Ok((a, b))
}

/// Integrates over `dt` with `substeps` classical RK4 steps, holding the
/// clamped input constant.
pub fn rk4_step<D: Dynamics + ?Sized>(
    dynamics: &D,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    substeps: usize,
) -> Result<DVector<f64>> {
    check_dim(dynamics.state_dim(), x.len(), "state")?;
    check_dim(dynamics.input_dim(), u.len(), "input")?;
    if !x.iter().chain(u.iter()).all(|v| v.is_finite()) || !(dt > 0.0) {
        return Err(Error::InvalidInput("non-finite state, input or step".into()));
    }
    let u = dynamics.clamp_input(u);
    let n = substeps.max(1);
    let h = dt / n as f64;
    let mut x = x.clone();
    for _ in 0..n {
        let k1 = dynamics.derivative(&x, &u)?;
        let k2 = dynamics.derivative(&(&x + &k1 * (h / 2.0)), &u)?;
        let k3 = dynamics.derivative(&(&x + &k2 * (h / 2.0)), &u)?;
        let k4 = dynamics.derivative(&(&x + &k3 * h), &u)?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(x)
}

/// Zero-order-hold discretization `(A, B)` of the Jacobian linearization at
/// `(x*, u*)`, from the exponential of `[[A_c, B_c], [0, 0]] dt`.
pub fn linearize_discretize<D: Dynamics + ?Sized>(
    dynamics: &D,
    x_eq: &DVector<f64>,
    u_eq: &DVector<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (ac, bc) = dynamics.continuous_jacobian(x_eq, u_eq)?;
    Ok(discretize(&ac, &bc, dt))
}

/// Exact zero-order-hold discretization of `ẋ = A x + B u`.
pub fn discretize(ac: &DMatrix<f64>, bc: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = ac.nrows();
    let q = bc.ncols();
    let mut m = DMatrix::zeros(p + q, p + q);
    m.view_mut((0, 0), (p, p)).copy_from(&(ac * dt));
    m.view_mut((0, p), (p, q)).copy_from(&(bc * dt));
    let e = m.exp();
    (
        e.view((0, 0), (p, p)).into_owned(),
        e.view((0, p), (p, q)).into_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    struct DoubleIntegrator;

    impl Dynamics for DoubleIntegrator {
        fn state_dim(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(dvector![x[1], u[0]])
        }
        fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (dvector![f64::NEG_INFINITY], dvector![f64::INFINITY])
        }
    }

    #[test]
    fn double_integrator_closed_form() {
        let dt = 0.05;
        let (a, b) = linearize_discretize(&DoubleIntegrator, &dvector![0.0, 0.0], &dvector![0.0], dt).unwrap();
        let ea = dmatrix![1.0, dt; 0.0, 1.0];
        let eb = dmatrix![dt * dt / 2.0; dt];
        assert!((a - ea).amax() <= 1e-10);
        assert!((b - eb).amax() <= 1e-10);
    }

    #[test]
    fn rk4_is_exact_for_double_integrator() {
        let x = rk4_step(&DoubleIntegrator, &dvector![1.0, -0.5], &dvector![2.0], 0.3, 1).unwrap();
        assert_relative_eq!(x[0], 1.0 - 0.15 + 0.09, epsilon = 1e-14);
        assert_relative_eq!(x[1], -0.5 + 0.6, epsilon = 1e-14);
    }

    #[test]
    fn rejects_non_finite_state() {
        assert!(rk4_step(&DoubleIntegrator, &dvector![f64::NAN, 0.0], &dvector![0.0], 0.1, 1).is_err());
    }
}
