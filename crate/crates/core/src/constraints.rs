//! Containment of reachable ellipsoids in the state, input and terminal
//! polytopes, expressed as scalar residuals (≤ 0 means satisfied).

use nalgebra::{DMatrix, DVector};

use crate::ellipsoid::{ellipsoid_in_polytope_residuals, Ellipsoid, Polytope};
use crate::error::{check_dim, Error, Result};

/// State, input and terminal polytopes with unit-norm rows. A missing state
/// polytope means the state space is unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    state: Option<Polytope>,
    control: Polytope,
    safe: Polytope,
}

impl ConstraintSet {
    pub fn new(state: Option<Polytope>, control: Polytope, safe: Polytope) -> Result<Self> {
        if let Some(x) = &state {
            check_dim(x.dim(), safe.dim(), "safe set dimension")?;
        }
        let vertices = safe.vertices();
        if vertices.is_empty() {
            return Err(Error::SafeSet("safe set is empty or unbounded".into()));
        }
        if let Some(x) = &state {
            for v in &vertices {
                if !x.contains(v, 1e-9) {
                    return Err(Error::SafeSet(format!(
                        "safe set vertex {:?} lies outside the state constraints",
                        v.as_slice()
                    )));
                }
            }
        }
        Ok(Self {
            state: state.map(|p| p.normalized()),
            control: control.normalized(),
            safe: safe.normalized(),
        })
    }

    pub fn state(&self) -> Option<&Polytope> {
        self.state.as_ref()
    }

    pub fn control(&self) -> &Polytope {
        &self.control
    }

    pub fn safe(&self) -> &Polytope {
        &self.safe
    }

    /// Pointwise check of a visited state and applied input.
    pub fn point_satisfied(&self, x: &DVector<f64>, u: &DVector<f64>, tol: f64) -> bool {
        self.state.as_ref().is_none_or(|p| p.contains(x, tol)) && self.control.contains(u, tol)
    }
}

/// Residuals of `R ⊂ X`; empty when `X` is the whole space.
pub fn state_residuals(r: &Ellipsoid, x: Option<&Polytope>) -> Result<DVector<f64>> {
    match x {
        Some(p) => ellipsoid_in_polytope_residuals(r, p),
        None => Ok(DVector::zeros(0)),
    }
}

/// Residuals of `u(R) = E(k, K Q Kᵀ) ⊂ U` for the law `u(x) = K(x − p) + k`
/// anchored at the center `p` of `R`.
pub fn control_residuals(
    r: &Ellipsoid,
    gain: &DMatrix<f64>,
    offset: &DVector<f64>,
    u: &Polytope,
) -> Result<DVector<f64>> {
    check_dim(r.dim(), gain.ncols(), "gain cols")?;
    check_dim(u.dim(), gain.nrows(), "gain rows")?;
    check_dim(u.dim(), offset.len(), "feed-forward input")?;
    // ‖Lᵀ Kᵀ hᵢᵀ‖ = sqrt(hᵢ K Q Kᵀ hᵢᵀ)
    let spread = r.factor().transpose() * gain.transpose() * u.normals().transpose();
    let centers = u.slack(offset);
    Ok(DVector::from_fn(u.num_rows(), |i, _| {
        centers[i] + spread.column(i).norm()
    }))
}

/// Residuals of `R_T ⊂ X_safe`.
pub fn terminal_residuals(r: &Ellipsoid, safe: &Polytope) -> Result<DVector<f64>> {
    ellipsoid_in_polytope_residuals(r, safe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn unbounded_state_space_has_no_residuals() {
        let e = Ellipsoid::new(dvector![0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        assert_eq!(state_residuals(&e, None).unwrap().len(), 0);
    }

    #[test]
    fn unit_ball_in_box() {
        let e = Ellipsoid::new(dvector![0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        let x = Polytope::from_bounds(&[-2.0, -2.0], &[2.0, 2.0]).unwrap();
        let r = state_residuals(&e, Some(&x)).unwrap();
        for v in r.iter() {
            assert_relative_eq!(*v, -1.0);
        }
    }

    #[test]
    fn control_tangent_case() {
        let e = Ellipsoid::new(dvector![0.0], dmatrix![1.0]).unwrap();
        let u = Polytope::from_bounds(&[-1.0], &[1.0]).unwrap();
        let r = control_residuals(&e, &dmatrix![1.0], &dvector![0.0], &u).unwrap();
        for v in r.iter() {
            assert_relative_eq!(*v, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_gain_is_pointwise() {
        let e = Ellipsoid::new(dvector![0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        let u = Polytope::from_bounds(&[-1.0], &[1.0]).unwrap();
        let r = control_residuals(&e, &DMatrix::zeros(1, 2), &dvector![0.4], &u).unwrap();
        assert_relative_eq!(r[0], -0.6);
        assert_relative_eq!(r[1], -1.4);
    }

    #[test]
    fn safe_set_must_lie_in_state_set() {
        let x = Polytope::from_bounds(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let u = Polytope::from_bounds(&[-1.0], &[1.0]).unwrap();
        let bad = Polytope::from_bounds(&[-2.0, -0.5], &[0.5, 0.5]).unwrap();
        assert!(matches!(
            ConstraintSet::new(Some(x.clone()), u.clone(), bad),
            Err(Error::SafeSet(_))
        ));
        let good = Polytope::from_bounds(&[-0.5, -0.5], &[0.5, 0.5]).unwrap();
        assert!(ConstraintSet::new(Some(x), u, good).is_ok());
    }
}
