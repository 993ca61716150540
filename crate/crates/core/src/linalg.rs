//! Small dense helpers shared by the GP and moment-matching code.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Eigenvalues above this (negative) floor are clipped to zero; anything lower is an error.
pub const PSD_TOLERANCE: f64 = 1e-9;

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of `k`, retrying with escalating diagonal jitter.
///
/// Jitter is scaled by `trace(k)/n`, starting at 1e-8 and growing by 10x up to 1e-4.
/// Returns the factor together with the jitter that was applied (0 on the first try).
pub fn cholesky_jittered(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(chol) = Cholesky::new(k.clone()) {
        return Ok((chol, 0.0));
    }
    let n = k.nrows().max(1) as f64;
    let scale = (k.trace() / n).abs().max(f64::MIN_POSITIVE);
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-12) {
        let jitter = rel * scale;
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(kj) {
            return Ok((chol, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::CholeskyFailure {
        max_jitter: JITTER_MAX * scale,
    })
}

/// Log-determinant from a Cholesky factor.
pub fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes `m` and clips slightly negative eigenvalues to zero.
///
/// Fails with [`Error::NonPsd`] when an eigenvalue falls below `-PSD_TOLERANCE`.
pub fn repair_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance matrix".into()));
    }
    if sym.nrows() == 0 {
        return Ok(sym);
    }
    // Fast path: a Cholesky success means every eigenvalue is positive.
    if Cholesky::new(sym.clone()).is_some() {
        return Ok(sym);
    }
    let eig = sym.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE {
        return Err(Error::NonPsd { min_eigenvalue: min });
    }
    if min >= 0.0 {
        return Ok(sym);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    let rebuilt = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    Ok(symmetrize(&rebuilt))
}

/// Inverse and determinant of a small general square matrix via LU.
pub(crate) fn inverse_and_det(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let lu = m.clone().lu();
    let det = lu.determinant();
    if !det.is_finite() || det == 0.0 {
        return None;
    }
    let inv = lu.try_inverse()?;
    Some((inv, det))
}
