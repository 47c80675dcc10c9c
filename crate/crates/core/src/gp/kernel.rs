use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Linear,
    Matern52,
    Sum,
}

/// Covariance function on `d`-dimensional inputs.
///
/// `Sum` is `Σₐ wₐ zₐ z'ₐ + σ² m₅/₂(r)` with `r² = Σₐ (zₐ − z'ₐ)²/ℓₐ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub linear_weights: Vec<f64>,
}

impl KernelSpec {
    pub fn matern52(lengthscales: Vec<f64>, signal_variance: f64) -> Self {
        let d = lengthscales.len();
        Self {
            family: KernelFamily::Matern52,
            lengthscales,
            signal_variance,
            linear_weights: vec![0.0; d],
        }
    }

    pub fn linear(linear_weights: Vec<f64>) -> Self {
        let d = linear_weights.len();
        Self {
            family: KernelFamily::Linear,
            lengthscales: vec![1.0; d],
            signal_variance: 1.0,
            linear_weights,
        }
    }

    pub fn sum(lengthscales: Vec<f64>, signal_variance: f64, linear_weights: Vec<f64>) -> Self {
        Self {
            family: KernelFamily::Sum,
            lengthscales,
            signal_variance,
            linear_weights,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.len() != self.linear_weights.len() {
            return Err(Error::InvalidInput(
                "kernel lengthscales and linear weights differ in length".into(),
            ));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidInput("kernel input dimension is 0".into()));
        }
        if self.has_matern() {
            if self.lengthscales.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                return Err(Error::InvalidInput("lengthscales must be positive".into()));
            }
            if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
                return Err(Error::InvalidInput("signal variance must be positive".into()));
            }
        }
        if self.linear_weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput("linear weights must be nonnegative".into()));
        }
        Ok(())
    }

    fn has_linear(&self) -> bool {
        matches!(self.family, KernelFamily::Linear | KernelFamily::Sum)
    }

    fn has_matern(&self) -> bool {
        matches!(self.family, KernelFamily::Matern52 | KernelFamily::Sum)
    }

    fn scaled_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `(√5 r, exp(−√5 r))` for the scaled distance `r`; `(0, 0)` without a
    /// Matérn part.
    pub fn radial(&self, a: &[f64], b: &[f64]) -> (f64, f64) {
        if !self.has_matern() {
            return (0.0, 0.0);
        }
        let s = SQRT5 * self.scaled_distance(a, b);
        (s, (-s).exp())
    }

    /// [`eval`](Self::eval) with the radial terms precomputed.
    pub fn eval_radial(&self, a: &[f64], b: &[f64], (s, e): (f64, f64)) -> f64 {
        let mut k = 0.0;
        if self.has_linear() {
            k += a
                .iter()
                .zip(b)
                .zip(&self.linear_weights)
                .map(|((x, y), w)| w * x * y)
                .sum::<f64>();
        }
        if self.has_matern() {
            k += self.signal_variance * (1.0 + s + s * s / 3.0) * e;
        }
        k
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut k = 0.0;
        if self.has_linear() {
            k += a
                .iter()
                .zip(b)
                .zip(&self.linear_weights)
                .map(|((x, y), w)| w * x * y)
                .sum::<f64>();
        }
        if self.has_matern() {
            let r = self.scaled_distance(a, b);
            let s = SQRT5 * r;
            k += self.signal_variance * (1.0 + s + s * s / 3.0) * (-s).exp();
        }
        k
    }

    /// Prior variance `k(z, z)`.
    pub fn diag(&self, z: &[f64]) -> f64 {
        self.eval(z, z)
    }

    /// `∂k(z, z')/∂z`.
    pub fn grad_first(&self, z: &[f64], zp: &[f64]) -> DVector<f64> {
        let d = z.len();
        let mut g = DVector::zeros(d);
        if self.has_linear() {
            for a in 0..d {
                g[a] += self.linear_weights[a] * zp[a];
            }
        }
        if self.has_matern() {
            let r = self.scaled_distance(z, zp);
            let s = SQRT5 * r;
            let coeff = -(5.0 / 3.0) * self.signal_variance * (1.0 + s) * (-s).exp();
            for a in 0..d {
                let l2 = self.lengthscales[a] * self.lengthscales[a];
                g[a] += coeff * (z[a] - zp[a]) / l2;
            }
        }
        g
    }

    /// `∂²k(z, z')/∂z∂zᵀ`.
    pub fn hessian_first(&self, z: &[f64], zp: &[f64]) -> DMatrix<f64> {
        let d = z.len();
        let mut h = DMatrix::zeros(d, d);
        if self.has_matern() {
            let r = self.scaled_distance(z, zp);
            let s = SQRT5 * r;
            let e = (-s).exp();
            let g = -(5.0 / 3.0) * self.signal_variance * (1.0 + s) * e;
            let c = (25.0 / 3.0) * self.signal_variance * e;
            for a in 0..d {
                let la = self.lengthscales[a] * self.lengthscales[a];
                let da = (z[a] - zp[a]) / la;
                h[(a, a)] += g / la;
                for b in 0..d {
                    let lb = self.lengthscales[b] * self.lengthscales[b];
                    h[(a, b)] += c * da * (z[b] - zp[b]) / lb;
                }
            }
        }
        h
    }

    /// `Σᵢ cᵢ ∂k(z, zᵢ)/∂z` for each coefficient vector `c` in `coeffs`.
    /// The radial terms of each point come from [`radial`](Self::radial).
    pub fn grad_first_combinations(
        &self,
        z: &[f64],
        points: &[DVector<f64>],
        radial: &[(f64, f64)],
        coeffs: &[&[f64]],
    ) -> Vec<DVector<f64>> {
        let d = z.len();
        let mut out = vec![DVector::zeros(d); coeffs.len()];
        let mut diff = vec![0.0; d];
        let inv_l2: Vec<f64> = self.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        for (i, zi) in points.iter().enumerate() {
            let zi = zi.as_slice();
            let radial = if self.has_matern() {
                for a in 0..d {
                    diff[a] = (z[a] - zi[a]) * inv_l2[a];
                }
                let (s, e) = radial[i];
                -(5.0 / 3.0) * self.signal_variance * (1.0 + s) * e
            } else {
                0.0
            };
            for (o, c) in out.iter_mut().zip(coeffs) {
                let ci = c[i];
                if ci == 0.0 {
                    continue;
                }
                for a in 0..d {
                    let mut g = radial * diff[a];
                    if self.has_linear() {
                        g += self.linear_weights[a] * zi[a];
                    }
                    o[a] += ci * g;
                }
            }
        }
        out
    }

    /// `(∂²k(z, z')/∂z∂zᵀ) c` without forming the Hessian.
    pub fn hessian_first_apply(&self, z: &[f64], zp: &[f64], (s, e): (f64, f64), c: &[f64]) -> DVector<f64> {
        let d = z.len();
        let mut out = DVector::zeros(d);
        if self.has_matern() {
            let g = -(5.0 / 3.0) * self.signal_variance * (1.0 + s) * e;
            let k2 = (25.0 / 3.0) * self.signal_variance * e;
            let mut dc = 0.0;
            for b in 0..d {
                dc += (z[b] - zp[b]) / (self.lengthscales[b] * self.lengthscales[b]) * c[b];
            }
            for a in 0..d {
                let la = self.lengthscales[a] * self.lengthscales[a];
                out[a] = g / la * c[a] + k2 * (z[a] - zp[a]) / la * dc;
            }
        }
        out
    }

    /// Total derivative of `z ↦ k(z, z)`.
    pub fn diag_grad(&self, z: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(z.len());
        if self.has_linear() {
            for a in 0..z.len() {
                g[a] = 2.0 * self.linear_weights[a] * z[a];
            }
        }
        g
    }

    pub fn gram(&self, rows: &[DVector<f64>]) -> DMatrix<f64> {
        let n = rows.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(rows[i].as_slice(), rows[j].as_slice());
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec() -> KernelSpec {
        KernelSpec::sum(vec![0.7, 1.3, 0.4], 1.5, vec![0.2, 0.0, 0.5])
    }

    #[test]
    fn matern_at_zero_distance_is_signal_variance() {
        let k = KernelSpec::matern52(vec![1.0, 2.0], 2.5);
        assert_relative_eq!(k.eval(&[0.3, 0.1], &[0.3, 0.1]), 2.5);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let k = spec();
        let z = [0.3, -0.2, 0.5];
        let zp = [-0.1, 0.4, 0.2];
        let g = k.grad_first(&z, &zp);
        let h = k.hessian_first(&z, &zp);
        let eps = 1e-6;
        for a in 0..3 {
            let mut zpl = z;
            let mut zmi = z;
            zpl[a] += eps;
            zmi[a] -= eps;
            let fd = (k.eval(&zpl, &zp) - k.eval(&zmi, &zp)) / (2.0 * eps);
            assert_relative_eq!(fd, g[a], epsilon = 1e-8);
            let fdg = (k.grad_first(&zpl, &zp) - k.grad_first(&zmi, &zp)) / (2.0 * eps);
            for b in 0..3 {
                assert_relative_eq!(fdg[b], h[(b, a)], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(KernelSpec::matern52(vec![0.0], 1.0).validate().is_err());
        assert!(KernelSpec::linear(vec![-1.0]).validate().is_err());
        assert!(spec().validate().is_ok());
    }
}
