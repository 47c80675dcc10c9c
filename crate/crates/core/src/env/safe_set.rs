//! Polytopic inner approximation of an empirically invariant LQR level set.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dynamics::{rk4_step, Dynamics};
use crate::ellipsoid::{ellipsoid_in_polytope_residuals, Ellipsoid, Polytope};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafeSetOptions {
    /// Bisection iterations on the level `c`.
    pub budget: usize,
    /// Largest level considered.
    pub c_upper: f64,
    /// Sampled states on the level-set boundary per test.
    pub boundary_samples: usize,
    /// Sampled states inside the level set per test.
    pub interior_samples: usize,
    /// Polytope vertices are kept inside `{xᵀPx ≤ shrink · c}`.
    pub shrink: f64,
    pub seed: u64,
}

impl Default for SafeSetOptions {
    fn default() -> Self {
        Self {
            budget: 30,
            c_upper: 1e6,
            boundary_samples: 2000,
            interior_samples: 1000,
            shrink: 0.9,
            seed: 0,
        }
    }
}

/// Closed loop `x⁺ = f(x, clamp(−K x))` integrated over one interval.
pub struct ClosedLoop<'a> {
    pub dynamics: &'a dyn Dynamics,
    pub gain: &'a DMatrix<f64>,
    pub dt: f64,
    pub substeps: usize,
}

impl ClosedLoop<'_> {
    pub fn input(&self, x: &DVector<f64>) -> DVector<f64> {
        -(self.gain * x)
    }

    pub fn step(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        rk4_step(self.dynamics, x, &self.input(x), self.dt, self.substeps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafeSet {
    pub polytope: Polytope,
    /// Level `c` of the invariant set `{xᵀPx ≤ c}`.
    pub level: f64,
    pub cost: DMatrix<f64>,
}

fn quad(p: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(p * x))
}

/// Largest `c` for which the level set lies in `X` and the unclamped LQR
/// input stays within the input bounds.
fn analytic_level_bound(
    cost: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    bounds: &(DVector<f64>, DVector<f64>),
    state: Option<&Polytope>,
) -> Result<f64> {
    let pinv = cost
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SafeSet("singular Riccati solution".into()))?;
    let mut c = f64::INFINITY;
    for i in 0..gain.nrows() {
        let k = gain.row(i).transpose();
        let spread = quad(&pinv, &k);
        let lim = bounds.0[i].abs().min(bounds.1[i].abs());
        if spread > 0.0 && lim.is_finite() {
            c = c.min(lim * lim / spread);
        }
    }
    if let Some(x) = state {
        for i in 0..x.num_rows() {
            let h = x.normals().row(i).transpose();
            let b = x.offsets()[i];
            if b <= 0.0 {
                return Err(Error::SafeSet("origin is not inside the state constraints".into()));
            }
            c = c.min(b * b / quad(&pinv, &h));
        }
    }
    Ok(c)
}

/// Level-set invariance test on sampled boundary and interior states.
pub fn level_set_invariant(
    closed: &ClosedLoop,
    cost: &DMatrix<f64>,
    c: f64,
    boundary: usize,
    interior: usize,
    seed: u64,
) -> Result<bool> {
    let n = cost.nrows();
    let e = Ellipsoid::new(
        DVector::zeros(n),
        cost.clone()
            .try_inverse()
            .ok_or_else(|| Error::SafeSet("singular Riccati solution".into()))?
            * c,
    )?;
    let (lo, hi) = closed.dynamics.input_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..boundary + interior {
        let x = if i < boundary {
            e.sample_boundary(&mut rng)
        } else {
            e.sample_uniform(&mut rng)
        };
        let u = closed.input(&x);
        if (0..u.len()).any(|j| u[j] < lo[j] - 1e-12 || u[j] > hi[j] + 1e-12) {
            return Ok(false);
        }
        let next = match closed.step(&x) {
            Ok(v) => v,
            Err(_) => return Ok(false),
        };
        if !(quad(cost, &next) <= c) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Directions `±e_i` and `±(e_i + e_{i+1})`, `±(e_{n−1} − e_0)`, in the
/// coordinates where the level set is a ball.
pub fn safe_set_directions(n: usize) -> Vec<DVector<f64>> {
    let mut dirs = Vec::with_capacity(4 * n);
    for i in 0..n {
        let e = DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
        dirs.push(e.clone());
        dirs.push(-e);
    }
    if n >= 2 {
        for i in 0..n {
            let d = if i + 1 < n {
                DVector::from_fn(n, |k, _| if k == i || k == i + 1 { 1.0 } else { 0.0 })
            } else {
                DVector::from_fn(n, |k, _| match k {
                    0 => -1.0,
                    k if k == n - 1 => 1.0,
                    _ => 0.0,
                })
            };
            dirs.push(d.clone());
            dirs.push(-d);
        }
    }
    dirs
}

/// Maps [`safe_set_directions`] from whitened coordinates `y = Λ^{1/2} Vᵀ x`
/// of `P = V Λ Vᵀ` back to normals in the original coordinates.
pub fn principal_directions(cost: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let eig = cost.clone().symmetric_eigen();
    let map = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    safe_set_directions(cost.nrows()).iter().map(|d| &map * d).collect()
}

/// Polytope with the given normals whose vertices lie in
/// `{xᵀPx ≤ shrink · c}`. Offsets are the support values of the level set,
/// scaled down uniformly until every vertex is inside.
pub fn inscribe_polytope(cost: &DMatrix<f64>, c: f64, shrink: f64, dirs: &[DVector<f64>]) -> Result<Polytope> {
    let n = cost.nrows();
    let pinv = cost
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SafeSet("singular Riccati solution".into()))?;
    let mut h = DMatrix::zeros(dirs.len(), n);
    let mut b = DVector::zeros(dirs.len());
    for (i, d) in dirs.iter().enumerate() {
        h.set_row(i, &d.transpose());
        b[i] = (c * quad(&pinv, d)).sqrt();
    }
    let base = Polytope::new(h.clone(), b.clone())?;
    let verts = base.vertices();
    if verts.is_empty() {
        return Err(Error::SafeSet("direction set does not bound a polytope".into()));
    }
    let worst = verts.iter().map(|v| quad(cost, v)).fold(0.0, f64::max);
    let scale = if worst > 0.0 {
        (shrink * c / worst).sqrt().min(1.0)
    } else {
        1.0
    };
    Polytope::new(h, b * scale)
}

/// Bisection on the level of `{xᵀPx ≤ c}` for empirical invariance under the
/// clamped LQR closed loop, followed by polytope inscription.
pub fn build_safe_set(
    closed: &ClosedLoop,
    cost: &DMatrix<f64>,
    state: Option<&Polytope>,
    opts: &SafeSetOptions,
) -> Result<SafeSet> {
    let n = cost.nrows();
    let bounds = closed.dynamics.input_bounds();
    let c_hi = analytic_level_bound(cost, closed.gain, &bounds, state)?.min(opts.c_upper);
    if !(c_hi > 0.0) {
        return Err(Error::SafeSet("no positive level satisfies the constraints".into()));
    }
    let test = |c: f64, k: usize| {
        level_set_invariant(
            closed,
            cost,
            c,
            opts.boundary_samples,
            opts.interior_samples,
            opts.seed.wrapping_add(k as u64),
        )
    };
    let level = if test(c_hi, 0)? {
        c_hi
    } else {
        let (mut lo, mut hi) = (0.0, c_hi);
        for k in 0..opts.budget {
            let mid = 0.5 * (lo + hi);
            if test(mid, k + 1)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    if !(level > 0.0) {
        return Err(Error::SafeSet("no invariant level set found".into()));
    }
    let polytope = inscribe_polytope(cost, level, opts.shrink, &principal_directions(cost))?;
    if let Some(x) = state {
        let e = Ellipsoid::new(DVector::zeros(n), cost.clone().try_inverse().unwrap() * level)?;
        if ellipsoid_in_polytope_residuals(&e, x)?.max() > 1e-9 {
            return Err(Error::SafeSet("level set leaves the state constraints".into()));
        }
    }
    Ok(SafeSet {
        polytope,
        level,
        cost: cost.clone(),
    })
}

/// Uniform samples from a bounded polytope by rejection from its bounding box.
pub fn sample_polytope(p: &Polytope, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let (lo, hi) = crate::mpc::bounding_box(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0usize;
    while out.len() < count {
        tries += 1;
        if tries > count.max(1) * 100_000 {
            return Err(Error::SafeSet("rejection sampling failed".into()));
        }
        let x = DVector::from_fn(p.dim(), |i, _| {
            let u: f64 = rand::Rng::random(&mut rng);
            lo[i] + u * (hi[i] - lo[i])
        });
        if p.contains(&x, 0.0) {
            out.push(x);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::lqr::lqr_synthesize;
    use nalgebra::{dmatrix, dvector};

    struct Linear {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
    }

    impl Dynamics for Linear {
        fn state_dim(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(&self.a * x + &self.b * u)
        }
        fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (dvector![f64::NEG_INFINITY], dvector![f64::INFINITY])
        }
    }

    #[test]
    fn unbounded_linear_system_reaches_upper_level() {
        let sys = Linear {
            a: dmatrix![0.0, 1.0; 0.0, 0.0],
            b: dmatrix![0.0; 1.0],
        };
        let dt = 0.1;
        let (ad, bd) = crate::env::dynamics::discretize(&sys.a, &sys.b, dt);
        let lqr = lqr_synthesize(&ad, &bd, &DMatrix::identity(2, 2), &dmatrix![1.0]).unwrap();
        let closed = ClosedLoop {
            dynamics: &sys,
            gain: &lqr.gain,
            dt,
            substeps: 10,
        };
        let opts = SafeSetOptions {
            c_upper: 50.0,
            boundary_samples: 200,
            interior_samples: 100,
            ..Default::default()
        };
        let set = build_safe_set(&closed, &lqr.cost, None, &opts).unwrap();
        assert_eq!(set.level, 50.0);
        for v in set.polytope.vertices() {
            assert!(quad(&lqr.cost, &v) <= 0.9 * 50.0 + 1e-9);
        }
        assert_eq!(set.polytope.num_rows(), 8);
    }

    #[test]
    fn direction_set_for_two_states() {
        let d = safe_set_directions(2);
        assert_eq!(d.len(), 8);
        assert!(d.contains(&dvector![1.0, 1.0]));
        assert!(d.contains(&dvector![-1.0, 1.0]));
    }
}
