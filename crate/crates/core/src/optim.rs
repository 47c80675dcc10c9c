//! Unconstrained quasi-Newton minimization used by the quadratic-penalty
//! MPC solver.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Stops once an accepted step lowers the value by at most
    /// `rel_tol · (1 + |f|)`.
    pub rel_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            grad_tol: 1e-7,
            armijo: 1e-4,
            max_backtracks: 30,
            rel_tol: 1e-15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f`, which returns the value and gradient, by BFGS with an
/// Armijo backtracking line search. Non-finite trial values are treated as
/// failed steps.
pub fn bfgs_minimize<F>(mut f: F, x0: DVector<f64>, opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return BfgsResult {
            x,
            value: fx,
            iterations: 0,
            converged: false,
        };
    }
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    for it in 0..opts.max_iters {
        if g.amax() <= opts.grad_tol {
            return BfgsResult {
                x,
                value: fx,
                iterations: it,
                converged: true,
            };
        }
        let mut dir = -(&hinv * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        let mut step = if first {
            (1.0 / g.norm()).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let xt = &x + &dir * step;
            let (ft, gt) = f(&xt);
            if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= fx + opts.armijo * step * slope {
                accepted = Some((xt, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            return BfgsResult {
                x,
                value: fx,
                iterations: it,
                converged: false,
            };
        };
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                // Scale the initial inverse Hessian to the observed curvature.
                hinv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            first = false;
        }
        let decrease = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        if decrease.abs() <= opts.rel_tol * (1.0 + fx.abs()) {
            return BfgsResult {
                x,
                value: fx,
                iterations: it + 1,
                converged: true,
            };
        }
    }
    BfgsResult {
        x,
        value: fx,
        iterations: opts.max_iters,
        converged: false,
    }
}

/// Central-difference gradient.
pub fn fd_gradient<F>(mut f: F, x: &DVector<f64>, step: f64) -> DVector<f64>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = step * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = dvector![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a)
            ];
            (v, g)
        };
        let opts = BfgsOptions {
            max_iters: 500,
            ..Default::default()
        };
        let r = bfgs_minimize(f, dvector![-1.2, 1.0], &opts);
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(r.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn fd_gradient_of_quadratic() {
        let g = fd_gradient(|x| x[0] * x[0] + 3.0 * x[1], &dvector![2.0, 1.0], 1e-6);
        assert_relative_eq!(g[0], 4.0, epsilon = 1e-6);
        assert_relative_eq!(g[1], 3.0, epsilon = 1e-6);
    }
}
