//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute asymmetry relative to the largest absolute entry.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

pub fn all_finite_matrix(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Lower Cholesky factor of `m`, escalating diagonal jitter from 1e-10 up to
/// 1e-6 (relative to the mean diagonal) on failure.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if let Some(c) = m.clone().cholesky() {
        return Ok((c.l(), 0.0));
    }
    let n = m.nrows();
    let scale = if n == 0 {
        1.0
    } else {
        (m.trace() / n as f64).abs().max(1e-300)
    };
    let mut jitter = 1e-10;
    while jitter <= 1e-6 * (1.0 + 1e-12) {
        let mut jm = m.clone();
        for i in 0..n {
            jm[(i, i)] += jitter * scale;
        }
        if let Some(c) = jm.cholesky() {
            return Ok((c.l(), jitter * scale));
        }
        jitter *= 10.0;
    }
    Err(Error::Fit(
        "matrix not positive definite after jitter escalation to 1e-6".into(),
    ))
}

/// Solves `L x = b` for lower-triangular `L` in place.
pub fn forward_substitute(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = b.len();
    for k in 0..n {
        let col = l.column(k);
        let col = col.as_slice();
        b[k] /= col[k];
        let bk = b[k];
        for i in (k + 1)..n {
            b[i] -= col[i] * bk;
        }
    }
}

/// Solves `Lᵀ x = b` for lower-triangular `L` in place.
pub fn backward_substitute_transpose(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = b.len();
    for i in (0..n).rev() {
        let col = l.column(i);
        let col = col.as_slice();
        let s: f64 = col[i + 1..n].iter().zip(&b[i + 1..n]).map(|(a, c)| a * c).sum();
        b[i] = (b[i] - s) / col[i];
    }
}

/// Log-determinant of a symmetric positive definite matrix.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let (l, _) = cholesky_with_jitter(m)?;
    Ok(2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// Spectral radius of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Symmetric matrix square root with eigenvalues clipped at zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Projects a symmetric matrix onto the PSD cone if any eigenvalue is below
/// `-tol`; tiny negative eigenvalues are zeroed. Returns whether clipping
/// happened.
pub fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let s = symmetrize(m);
    let eig = s.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return (s, false);
    }
    let d = eig.eigenvalues.map(|v| v.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    (symmetrize(&out), true)
}

/// Stacks `[I; K]` for a feedback gain `K` (q×p), giving a (p+q)×p matrix.
pub fn stack_identity_gain(gain: &DMatrix<f64>) -> DMatrix<f64> {
    let p = gain.ncols();
    let q = gain.nrows();
    let mut s = DMatrix::zeros(p + q, p);
    for i in 0..p {
        s[(i, i)] = 1.0;
    }
    s.view_mut((p, 0), (q, p)).copy_from(gain);
    s
}

pub fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}
