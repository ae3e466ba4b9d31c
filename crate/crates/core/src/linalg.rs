//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.is_square() && m.clone().cholesky().is_some()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if !all_finite(m) {
        return f64::NAN;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Positive semi-definite up to a tolerance scaled by the matrix magnitude.
pub fn is_positive_semidefinite(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && min_eigenvalue(m) >= -tol * (1.0 + m.amax())
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if !all_finite(m) {
        return f64::INFINITY;
    }
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let cutoff = tol * sv.max().max(1.0);
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Symmetric square root of a PSD matrix via eigendecomposition; negative
/// eigenvalues from round-off are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Inverse symmetric square root of an SPD matrix.
pub fn spd_inv_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(Error::Singular {
            what: what.to_string(),
            condition: condition_number(m),
        });
    }
    let vals = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    match m.clone().cholesky() {
        Some(ch) => Ok(symmetrize(&ch.inverse())),
        None => Err(Error::Singular {
            what: what.to_string(),
            condition: condition_number(m),
        }),
    }
}

/// Inverse of a sample covariance with escalating diagonal jitter.
///
/// Plain Cholesky is tried first; then `eps * I` is added starting at
/// `1e-8 * tr(S) / d` and multiplied by ten up to `1e-4 * tr(S) / d`.
pub fn regularized_inverse(s: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let d = s.nrows();
    if let Some(ch) = s.clone().cholesky() {
        return Ok(symmetrize(&ch.inverse()));
    }
    let scale = s.trace() / d as f64;
    if scale.is_finite() && scale > 0.0 {
        let mut eps = 1e-8 * scale;
        while eps <= 1e-4 * scale * (1.0 + 1e-12) {
            let jittered = s + DMatrix::identity(d, d) * eps;
            if let Some(ch) = jittered.cholesky() {
                log::debug!("{what}: inverted with jitter {eps:.3e}");
                return Ok(symmetrize(&ch.inverse()));
            }
            eps *= 10.0;
        }
    }
    Err(Error::Singular {
        what: what.to_string(),
        condition: condition_number(s),
    })
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn vec_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn check_square(m: &DMatrix<f64>, n: usize, name: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Shape(format!(
            "{name} is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, name: &str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::Shape(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}
