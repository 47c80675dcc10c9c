//! Discrete-time infinite-horizon LQR by Riccati iteration.

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::linalg;

pub const RICCATI_TOL: f64 = 1e-10;
pub const RICCATI_MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Lqr {
    /// Gain of `u = −K x`.
    pub gain: DMatrix<f64>,
    /// Stabilizing Riccati solution.
    pub cost: DMatrix<f64>,
    /// Frobenius norm of the Riccati residual at `cost`.
    pub residual: f64,
    pub iterations: usize,
}

fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let k = s
        .lu()
        .solve(&(&bt_p * a))
        .ok_or_else(|| Error::NotConverged("singular R + BᵀPB".into()))?;
    let next = q + a.transpose() * p * a - a.transpose() * p * b * &k;
    Ok((linalg::symmetrize(&next), k))
}

/// Solves `P = Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA` by fixed-point iteration
/// from `P = Q` and returns `K = (R + BᵀPB)⁻¹ BᵀPA`.
pub fn lqr_synthesize(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Lqr> {
    let n = a.nrows();
    check_dim(n, a.ncols(), "A must be square")?;
    check_dim(n, b.nrows(), "B rows")?;
    check_dim(n, q.nrows(), "Q rows")?;
    check_dim(n, q.ncols(), "Q cols")?;
    check_dim(b.ncols(), r.nrows(), "R rows")?;
    check_dim(b.ncols(), r.ncols(), "R cols")?;
    let mut p = q.clone();
    for it in 0..RICCATI_MAX_ITERS {
        let (next, _) = riccati_map(a, b, q, r, &p)?;
        if !linalg::all_finite_matrix(&next) {
            return Err(Error::NotConverged("Riccati iteration diverged".into()));
        }
        let change = (&next - &p).norm();
        p = next;
        if change <= RICCATI_TOL * 1e-2 * p.norm().max(1.0) {
            let (check, k) = riccati_map(a, b, q, r, &p)?;
            let residual = (&check - &p).norm();
            if residual <= RICCATI_TOL {
                return Ok(Lqr {
                    gain: k,
                    cost: p,
                    residual,
                    iterations: it + 1,
                });
            }
        }
    }
    Err(Error::NotConverged(format!(
        "Riccati iteration did not reach residual {RICCATI_TOL} in {RICCATI_MAX_ITERS} iterations"
    )))
}

/// Spectral radius of `A − B K`.
pub fn closed_loop_radius(a: &DMatrix<f64>, b: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
    linalg::spectral_radius(&(a - b * k))
}
