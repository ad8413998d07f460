//! Canonical correlation analysis via covariance whitening + SVD.

use super::svd::{svd, symmetric_eigen};
use super::{Matrix, Vector};
use crate::error::{Error, Result};

/// Projection matrices (d_i x r and d_j x r) and the canonical correlations,
/// sorted non-increasing.
#[derive(Debug, Clone)]
pub struct CcaResult {
    pub pi_i: Matrix,
    pub pi_j: Matrix,
    pub corrs: Vector,
}

/// Default ridge at 1e-6 of the average per-feature variance of both inputs.
/// Small feature batches give near-singular covariances; this keeps the
/// whitening stable without visibly biasing the correlations.
pub fn trace_scale_ridge(hi: &Matrix, hj: &Matrix) -> f64 {
    let scale = |h: &Matrix| {
        let c = h.center_columns();
        let m = (h.rows().max(2) - 1) as f64;
        let cov_trace = c.data().iter().map(|v| v * v).sum::<f64>() / m;
        cov_trace / h.cols() as f64
    };
    1e-6 * 0.5 * (scale(hi) + scale(hj))
}

/// Canonical correlation analysis on two feature matrices with matched rows.
///
/// Columns are centered internally; `ridge * I` is added to both covariance
/// matrices before whitening. Requires more samples than components (m > r).
pub fn cca(hi: &Matrix, hj: &Matrix, r: usize, ridge: f64) -> Result<CcaResult> {
    if hi.rows() != hj.rows() {
        return Err(Error::dims("cca rows", hi.rows(), hj.rows()));
    }
    let m = hi.rows();
    if m <= r {
        return Err(Error::CcaTooFewSamples { m, r });
    }
    if r == 0 || r > hi.cols().min(hj.cols()) {
        return Err(Error::invalid(
            "cca",
            format!("r={} out of range for dims {}x{}", r, hi.cols(), hj.cols()),
        ));
    }
    let x = hi.center_columns();
    let y = hj.center_columns();
    let denom = (m - 1) as f64;
    let mut sxx = x.matmul_tn(&x).scale(1.0 / denom);
    let mut syy = y.matmul_tn(&y).scale(1.0 / denom);
    let sxy = x.matmul_tn(&y).scale(1.0 / denom);
    for i in 0..sxx.rows() {
        let v = sxx.at(i, i) + ridge;
        sxx.set(i, i, v);
    }
    for i in 0..syy.rows() {
        let v = syy.at(i, i) + ridge;
        syy.set(i, i, v);
    }

    let isxx = inverse_sqrt(&sxx, ridge)?;
    let isyy = inverse_sqrt(&syy, ridge)?;

    let t = isxx.matmul(&sxy).matmul(&isyy);
    let d = svd(&t)?;

    let take_cols = |w: &Matrix, k: usize| {
        Matrix::from_fn(w.rows(), k, |i, j| w.at(i, j))
    };
    let pi_i = isxx.matmul(&take_cols(&d.u, r));
    let pi_j = isyy.matmul(&take_cols(&d.vt.transpose(), r));
    let corrs: Vec<f64> = d.s.data().iter().take(r).cloned().collect();
    Ok(CcaResult {
        pi_i,
        pi_j,
        corrs: Vector::from(corrs),
    })
}

/// Symmetric PSD inverse square root. Rejects a numerically singular input
/// when no ridge was supplied, with a hint to raise it.
fn inverse_sqrt(sym: &Matrix, ridge: f64) -> Result<Matrix> {
    let (vals, vecs) = symmetric_eigen(sym)?;
    let vmax = vals.iter().cloned().fold(0.0f64, f64::max);
    let floor = vmax * 1e-13;
    if vals.iter().any(|&v| v <= floor) && ridge <= 0.0 {
        return Err(Error::CcaSingularCovariance { ridge });
    }
    let n = sym.rows();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let inv = if vals[j] > floor {
            1.0 / vals[j].sqrt()
        } else {
            0.0
        };
        for i in 0..n {
            let v = scaled.at(i, j) * inv;
            scaled.set(i, j, v);
        }
    }
    Ok(scaled.matmul_nt(&vecs))
}
