//! Ellipsoids, hyper-rectangles and polytopes, and the set operations the
//! reachability analysis is built from.
//!
//! An ellipsoid `E(p, Q) = {x : (x-p)ᵀ Q⁻¹ (x-p) ≤ 1}` is stored with a cached
//! lower Cholesky factor `L` of `Q`; membership tests and support functions go
//! through the factor and never form `Q⁻¹`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Half-widths below this value are inflated so that shape matrices built
/// from rectangles stay positive definite.
pub const DEFAULT_SHAPE_FLOOR: f64 = 1e-9;

/// Power steps used by [`max_scaled_distance`] when no count is given.
pub const DEFAULT_POWER_ITERATIONS: usize = 1 << 40;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        let n = center.len();
        if n == 0 {
            return Err(Error::InvalidInput("ellipsoid of dimension 0".into()));
        }
        check_dim(n, shape.nrows(), "ellipsoid shape rows")?;
        check_dim(n, shape.ncols(), "ellipsoid shape cols")?;
        if !linalg::all_finite(&center) || !linalg::all_finite_matrix(&shape) {
            return Err(Error::InvalidInput("non-finite ellipsoid data".into()));
        }
        let asym = linalg::relative_asymmetry(&shape);
        if asym > SYMMETRY_TOL {
            return Err(Error::DegenerateShape(format!(
                "shape matrix not symmetric (relative asymmetry {asym:e})"
            )));
        }
        let shape = linalg::symmetrize(&shape);
        let factor = shape
            .clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateShape("shape matrix not positive definite".into()))?
            .l();
        if (0..n).any(|i| !(factor[(i, i)] > 0.0 && factor[(i, i)].is_finite())) {
            return Err(Error::DegenerateShape("shape matrix is singular".into()));
        }
        Ok(Self {
            center,
            shape,
            factor,
        })
    }

    /// Builds an ellipsoid from a shape that is symmetric up to rounding,
    /// symmetrizing it first.
    pub(crate) fn from_computed(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        Self::new(center, linalg::symmetrize(&shape))
    }

    /// A tiny ball `E(x, eps·I)` standing in for the singleton `{x}`.
    pub fn point(center: DVector<f64>, eps: f64) -> Result<Self> {
        let n = center.len();
        Self::new(center, DMatrix::identity(n, n) * eps)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    /// Lower Cholesky factor `L` with `Q = L Lᵀ`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// `(x-p)ᵀ Q⁻¹ (x-p)`.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        let mut y: Vec<f64> = (x - &self.center).iter().copied().collect();
        linalg::forward_substitute(&self.factor, &mut y);
        y.iter().map(|v| v * v).sum()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.quadratic_form(x) <= 1.0 + tol
    }

    /// `Q⁻¹ v` via the cached factor.
    pub fn solve_shape(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut y: Vec<f64> = v.iter().copied().collect();
        linalg::forward_substitute(&self.factor, &mut y);
        linalg::backward_substitute_transpose(&self.factor, &mut y);
        DVector::from_vec(y)
    }

    /// Support value `max_{x∈E} aᵀ(x-p) = sqrt(aᵀ Q a)`.
    pub fn support_radius(&self, a: &DVector<f64>) -> f64 {
        (self.factor.transpose() * a).norm()
    }

    /// Semi-axis lengths in ascending order.
    pub fn semi_axes(&self) -> DVector<f64> {
        let mut ev: Vec<f64> = self
            .shape
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        DVector::from_vec(ev)
    }

    /// Exact image `A·E + b = E(A p + b, A Q Aᵀ)`.
    pub fn affine_transform(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Ellipsoid> {
        check_dim(self.dim(), a.ncols(), "affine map columns")?;
        check_dim(a.nrows(), b.len(), "affine offset")?;
        if a.nrows() > a.ncols() {
            return Err(Error::DegenerateShape(
                "affine map has more rows than columns; the image is flat".into(),
            ));
        }
        let sv = a.clone().singular_values();
        let (smin, smax) = (sv.min(), sv.max());
        if !(smin > 1e-12 * smax) {
            return Err(Error::DegenerateShape("affine map is rank deficient".into()));
        }
        let shape = a * &self.shape * a.transpose();
        Ellipsoid::from_computed(a * &self.center + b, shape).map_err(|e| match e {
            Error::DegenerateShape(_) => {
                Error::DegenerateShape("affine map is rank deficient".into())
            }
            other => other,
        })
    }

    /// Outer ellipsoidal approximation of the Minkowski sum `self ⊕ other`.
    ///
    /// With `c = None` the trace-minimizing parameter `sqrt(Tr Q1 / Tr Q2)` is
    /// used.
    pub fn minkowski_sum_outer(&self, other: &Ellipsoid, c: Option<f64>) -> Result<Ellipsoid> {
        check_dim(self.dim(), other.dim(), "minkowski operand")?;
        let c = match c {
            Some(c) => {
                if !(c > 0.0 && c.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "minkowski parameter must be positive, got {c}"
                    )));
                }
                c
            }
            None => trace_optimal_parameter(&self.shape, &other.shape)?,
        };
        let shape = &self.shape * (1.0 + 1.0 / c) + &other.shape * (1.0 + c);
        Ellipsoid::from_computed(&self.center + &other.center, shape)
    }

    /// Same ellipsoid with every semi-axis scaled by `s`.
    pub fn scaled(&self, s: f64) -> Result<Ellipsoid> {
        Ellipsoid::new(self.center.clone(), &self.shape * (s * s))
    }

    /// `max_{x∈E(0,Q)} ‖S x‖₂` using the cached factor.
    pub fn max_scaled_distance(&self, s: &DMatrix<f64>, iters: Option<usize>) -> Result<f64> {
        Ok(self.max_scaled_distance_pair(s, iters)?.0)
    }

    /// Value and maximizer `x` (with `xᵀQ⁻¹x = 1`) of `max ‖S x‖₂` over
    /// `E(0, Q)`, i.e. the top eigenpair of the pencil `(Q⁻¹, SᵀS)`.
    ///
    /// Power iteration runs on the symmetric form `B = Lᵀ SᵀS L` with
    /// `Q = L Lᵀ`. The iterate `B^(2^k)` is formed by `k` normalized squarings,
    /// so `iters` power steps cost `⌈log₂ iters⌉` matrix products and close
    /// top eigenvalues do not slow convergence down.
    pub fn max_scaled_distance_pair(
        &self,
        s: &DMatrix<f64>,
        iters: Option<usize>,
    ) -> Result<(f64, DVector<f64>)> {
        let n = self.dim();
        check_dim(n, s.ncols(), "scaling matrix columns")?;
        if !linalg::all_finite_matrix(s) {
            return Err(Error::InvalidInput("NaN or infinite scaling matrix".into()));
        }
        let iters = iters.unwrap_or(DEFAULT_POWER_ITERATIONS);
        if iters == 0 {
            return Err(Error::InvalidInput("power iteration count must be ≥ 1".into()));
        }
        let sl = s * &self.factor;
        let b = linalg::symmetrize(&(sl.transpose() * &sl));
        let squarings = usize::BITS - (iters - 1).leading_zeros();
        let mut m = b.clone();
        for _ in 0..squarings {
            let scale = m.amax();
            if scale == 0.0 || !scale.is_finite() {
                break;
            }
            m /= scale;
            m = linalg::symmetrize(&(&m * &m));
        }
        // Every column of B^(2^k) is a power iterate; the largest one is the
        // best conditioned start.
        let (j, norm) = (0..n)
            .map(|j| (j, m.column(j).norm()))
            .fold((0, 0.0), |best, c| if c.1 > best.1 { c } else { best });
        if !(norm > 0.0 && norm.is_finite()) {
            return Ok((0.0, DVector::zeros(n)));
        }
        let mut y = m.column(j) / norm;
        let by = &b * &y;
        let byn = by.norm();
        if byn > 0.0 {
            y = by / byn;
        }
        let lambda = y.dot(&(&b * &y)).max(0.0);
        Ok((lambda.sqrt(), &self.factor * y))
    }

    /// Gradient of `r(Q, S)` with respect to the shape matrix `Q`, obtained by
    /// differentiating the converged eigenpair: `∂r/∂Q = (r/2) w wᵀ` with
    /// `w = Q⁻¹ x*` for the normalized maximizer `x*`.
    pub fn max_scaled_distance_shape_gradient(
        &self,
        s: &DMatrix<f64>,
        iters: Option<usize>,
    ) -> Result<(f64, DMatrix<f64>)> {
        let (r, x) = self.max_scaled_distance_pair(s, iters)?;
        let w = self.solve_shape(&x);
        Ok((r, &w * w.transpose() * (r / 2.0)))
    }

    /// Uniform sample from the solid ellipsoid.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let dir = unit_direction(rng, n);
        let radius: f64 = rng.random::<f64>().powf(1.0 / n as f64);
        &self.center + &self.factor * (dir * radius)
    }

    /// Uniformly distributed direction mapped onto the boundary.
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let dir = unit_direction(rng, self.dim());
        &self.center + &self.factor * dir
    }
}

pub(crate) fn unit_direction<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn trace_optimal_parameter(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> Result<f64> {
    let t1 = q1.trace();
    let t2 = q2.trace();
    if !(t2 > 0.0) {
        return Err(Error::DegenerateOperand(
            "second Minkowski operand has zero trace".into(),
        ));
    }
    if !(t1 > 0.0) {
        return Err(Error::DegenerateOperand(
            "first Minkowski operand has zero trace".into(),
        ));
    }
    Ok((t1 / t2).sqrt())
}

/// Trace-optimal outer Minkowski shape for positive semi-definite operands.
/// A zero-trace operand contributes nothing.
pub(crate) fn minkowski_shape(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> DMatrix<f64> {
    let t1 = q1.trace();
    let t2 = q2.trace();
    if !(t1 > 0.0) {
        return q2.clone();
    }
    if !(t2 > 0.0) {
        return q1.clone();
    }
    let c = (t1 / t2).sqrt();
    linalg::symmetrize(&(q1 * (1.0 + 1.0 / c) + q2 * (1.0 + c)))
}

/// `max_{x∈E(0,Q)} ‖S x‖₂` for a bare shape matrix.
pub fn max_scaled_distance(q: &DMatrix<f64>, s: &DMatrix<f64>, iters: Option<usize>) -> Result<f64> {
    if !linalg::all_finite_matrix(q) || !linalg::all_finite_matrix(s) {
        return Err(Error::InvalidInput("NaN or infinite input".into()));
    }
    let n = q.nrows();
    Ellipsoid::new(DVector::zeros(n), q.clone())?.max_scaled_distance(s, iters)
}

/// Axis-aligned box `a ± b`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperRectangle {
    center: DVector<f64>,
    half_widths: DVector<f64>,
}

impl HyperRectangle {
    pub fn new(center: DVector<f64>, half_widths: DVector<f64>) -> Result<Self> {
        check_dim(center.len(), half_widths.len(), "rectangle half-widths")?;
        if center.is_empty() {
            return Err(Error::InvalidInput("rectangle of dimension 0".into()));
        }
        if !linalg::all_finite(&center) || !linalg::all_finite(&half_widths) {
            return Err(Error::InvalidInput("non-finite rectangle".into()));
        }
        if half_widths.iter().any(|&b| b < 0.0) {
            return Err(Error::InvalidInput("negative half-width".into()));
        }
        Ok(Self {
            center,
            half_widths,
        })
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn half_widths(&self) -> &DVector<f64> {
        &self.half_widths
    }

    /// All `2^p` corners.
    pub fn corners(&self) -> Vec<DVector<f64>> {
        let p = self.center.len();
        (0..(1usize << p))
            .map(|mask| {
                DVector::from_iterator(
                    p,
                    (0..p).map(|j| {
                        let sign = if mask >> j & 1 == 1 { 1.0 } else { -1.0 };
                        self.center[j] + sign * self.half_widths[j]
                    }),
                )
            })
            .collect()
    }
}

/// `a ± b ⊂ E(a, p·diag(b)²)`, i.e. semi-axes `√p·bⱼ`. Half-widths below
/// `floor` are raised to `floor`.
pub fn rect_to_ellipsoid(rect: &HyperRectangle, floor: f64) -> Result<Ellipsoid> {
    Ellipsoid::new(rect.center.clone(), rect_shape(&rect.half_widths, floor))
}

pub(crate) fn rect_shape(half_widths: &DVector<f64>, floor: f64) -> DMatrix<f64> {
    let p = half_widths.len() as f64;
    DMatrix::from_diagonal(&half_widths.map(|b| p * b.max(floor).powi(2)))
}

/// Intersection of half-spaces `H x ≤ h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    h: DMatrix<f64>,
    b: DVector<f64>,
}

impl Polytope {
    pub fn new(h: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if h.nrows() == 0 {
            return Err(Error::InvalidInput("polytope needs at least one row".into()));
        }
        check_dim(h.nrows(), b.len(), "polytope offsets")?;
        if !linalg::all_finite_matrix(&h) || !linalg::all_finite(&b) {
            return Err(Error::InvalidInput("non-finite polytope".into()));
        }
        for i in 0..h.nrows() {
            if h.row(i).iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidInput(format!("polytope row {i} is zero")));
            }
        }
        Ok(Self { h, b })
    }

    /// Box `lower ≤ x ≤ upper`; infinite bounds produce no row.
    pub fn from_bounds(lower: &[f64], upper: &[f64]) -> Result<Self> {
        check_dim(lower.len(), upper.len(), "box bounds")?;
        let n = lower.len();
        let mut rows = Vec::new();
        let mut offsets = Vec::new();
        for i in 0..n {
            if upper[i].is_finite() {
                let mut r = vec![0.0; n];
                r[i] = 1.0;
                rows.push(r);
                offsets.push(upper[i]);
            }
            if lower[i].is_finite() {
                let mut r = vec![0.0; n];
                r[i] = -1.0;
                rows.push(r);
                offsets.push(-lower[i]);
            }
        }
        Self::from_rows(&rows, &offsets)
    }

    pub fn from_rows(rows: &[Vec<f64>], offsets: &[f64]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("polytope needs at least one row".into()));
        }
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidInput("ragged polytope rows".into()));
        }
        let h = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        Self::new(h, DVector::from_column_slice(offsets))
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.h.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.b
    }

    /// Each row scaled to unit Euclidean norm.
    pub fn normalized(&self) -> Polytope {
        let mut h = self.h.clone();
        let mut b = self.b.clone();
        for i in 0..h.nrows() {
            let n = h.row(i).norm();
            h.row_mut(i).unscale_mut(n);
            b[i] /= n;
        }
        Polytope { h, b }
    }

    /// `H x - h` per row.
    pub fn slack(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x - &self.b
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.slack(x).iter().all(|&v| v <= tol)
    }

    /// Vertices of a bounded polytope by enumerating `n`-subsets of rows.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let n = self.dim();
        let m = self.num_rows();
        let mut out: Vec<DVector<f64>> = Vec::new();
        let mut idx: Vec<usize> = (0..n).collect();
        if m < n {
            return out;
        }
        loop {
            let a = DMatrix::from_fn(n, n, |i, j| self.h[(idx[i], j)]);
            let rhs = DVector::from_iterator(n, idx.iter().map(|&i| self.b[i]));
            if let Some(lu) = a.clone().lu().try_inverse() {
                let v = lu * rhs;
                let scale = 1.0 + v.amax();
                if self.contains(&v, 1e-9 * scale)
                    && !out.iter().any(|w| (w - &v).amax() <= 1e-9 * scale)
                {
                    out.push(v);
                }
            }
            // next combination
            let mut k = n;
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                if idx[k] != k + m - n {
                    break;
                }
                if k == 0 && idx[0] == m - n {
                    return out;
                }
            }
            idx[k] += 1;
            for j in (k + 1)..n {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
}

/// Per-row residuals `Hᵢ p + sqrt(Hᵢ Q Hᵢᵀ) − hᵢ`; `E ⊂ P` iff all are ≤ 0.
pub fn ellipsoid_in_polytope_residuals(e: &Ellipsoid, p: &Polytope) -> Result<DVector<f64>> {
    check_dim(p.dim(), e.dim(), "polytope dimension")?;
    let lt = e.factor().transpose();
    let centers = p.slack(e.center());
    Ok(DVector::from_iterator(
        p.num_rows(),
        (0..p.num_rows()).map(|i| {
            let row = p.h.row(i).transpose();
            centers[i] + (&lt * row).norm()
        }),
    ))
}
