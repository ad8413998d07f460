//! Singular value decomposition by one-sided Jacobi rotation, plus the
//! derived operations: Moore-Penrose pseudo-inverse, nearest-orthogonal
//! projection, numerical rank, and a symmetric eigensolver used by CCA.

use super::{Matrix, Vector};
use crate::error::{Error, Result};

/// Thin SVD: `m = u * diag(s) * vt` with `u` (m x k), `s` (k), `vt` (k x n),
/// k = min(m, n). Singular values are non-negative and non-increasing; `u`
/// has orthonormal columns and `vt` orthonormal rows.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vector,
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.dim();
        let mut scaled = self.u.clone();
        for i in 0..scaled.rows() {
            for j in 0..k {
                let v = scaled.at(i, j) * self.s.data()[j];
                scaled.set(i, j, v);
            }
        }
        scaled.matmul(&self.vt)
    }
}

const MAX_SWEEPS: usize = 60;
const JACOBI_TOL: f64 = 1e-14;

pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::NonFinite {
            context: "svd input".into(),
        });
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::invalid("svd", "empty matrix"));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        // Wide case: decompose the transpose and swap factors.
        let t = svd_tall(&m.transpose())?;
        Ok(Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        })
    }
}

/// One-sided Jacobi on a tall (or square) matrix: rotate column pairs until
/// all columns are mutually orthogonal, then read off norms as singular
/// values.
fn svd_tall(m: &Matrix) -> Result<Svd> {
    let rows = m.rows();
    let n = m.cols();
    let mut a = m.clone();
    let mut v = Matrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    let x = a.at(i, p);
                    let y = a.at(i, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let x = a.at(i, p);
                    let y = a.at(i, q);
                    a.set(i, p, c * x - s * y);
                    a.set(i, q, s * x + c * y);
                }
                for i in 0..n {
                    let x = v.at(i, p);
                    let y = v.at(i, q);
                    v.set(i, p, c * x - s * y);
                    v.set(i, q, s * x + c * y);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let mut norms = vec![0.0f64; n];
    for (j, nj) in norms.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..rows {
            acc += a.at(i, j) * a.at(i, j);
        }
        *nj = acc.sqrt();
    }
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = Matrix::zeros(rows, n);
    let mut s = vec![0.0f64; n];
    let mut vt = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = norms[src];
        if norms[src] > 0.0 {
            for i in 0..rows {
                u.set(i, dst, a.at(i, src) / norms[src]);
            }
        }
        for i in 0..n {
            vt.set(dst, i, v.at(i, src));
        }
    }

    // Zero singular values leave empty U columns; complete to an orthonormal
    // set so the factor contracts hold even for rank-deficient input.
    complete_orthonormal_columns(&mut u, &s);

    Ok(Svd {
        u,
        s: Vector::from(s),
        vt,
    })
}

fn complete_orthonormal_columns(u: &mut Matrix, s: &[f64]) {
    let rows = u.rows();
    let n = u.cols();
    for j in 0..n {
        if s[j] > 0.0 {
            continue;
        }
        // Find a basis vector with a large residual after projecting out the
        // existing columns, orthogonalize, normalize.
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = 0.0;
        for e in 0..rows {
            let mut cand = vec![0.0; rows];
            cand[e] = 1.0;
            for k in 0..n {
                if k == j || (s[k] == 0.0 && k > j) {
                    continue;
                }
                let mut proj = 0.0;
                for i in 0..rows {
                    proj += cand[i] * u.at(i, k);
                }
                for i in 0..rows {
                    cand[i] -= proj * u.at(i, k);
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > best_norm {
                best_norm = norm;
                best = Some(cand);
            }
            if best_norm > 0.9 {
                break;
            }
        }
        if let Some(cand) = best {
            if best_norm > 1e-12 {
                for i in 0..rows {
                    u.set(i, j, cand[i] / best_norm);
                }
            }
        }
    }
}

/// Moore-Penrose pseudo-inverse. Singular values below `tol * max(s)` are
/// treated as exactly zero; the zero matrix maps to the zero matrix.
pub fn pinv(m: &Matrix, tol: f64) -> Result<Matrix> {
    let d = svd(m)?;
    let smax = d.s.data().iter().cloned().fold(0.0f64, f64::max);
    let cutoff = tol * smax;
    let k = d.s.dim();
    // v * diag(1/s) * u^T
    let mut vs = d.vt.transpose();
    for j in 0..k {
        let sj = d.s.data()[j];
        let inv = if smax > 0.0 && sj > cutoff { 1.0 / sj } else { 0.0 };
        for i in 0..vs.rows() {
            let v = vs.at(i, j) * inv;
            vs.set(i, j, v);
        }
    }
    Ok(vs.matmul_nt(&d.u))
}

/// Which side of the matrix the orthonormality target applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Result satisfies R * R^T = I (rows orthonormal); needs rows <= cols.
    Rows,
    /// Result satisfies R^T * R = I (columns orthonormal); needs cols <= rows.
    Cols,
}

/// Closest orthogonal matrix in Frobenius distance, `u * vt` from the SVD.
/// The boolean is false when a zero singular value makes the minimizer
/// non-unique (the returned matrix is still a valid minimizer).
pub fn nearest_orthogonal(a: &Matrix, orientation: Orientation) -> Result<(Matrix, bool)> {
    match orientation {
        Orientation::Rows => {
            if a.rows() > a.cols() {
                return Err(Error::invalid(
                    "nearest_orthogonal",
                    "row orientation needs rows <= cols",
                ));
            }
        }
        Orientation::Cols => {
            if a.cols() > a.rows() {
                return Err(Error::invalid(
                    "nearest_orthogonal",
                    "column orientation needs cols <= rows",
                ));
            }
        }
    }
    let d = svd(a)?;
    let smax = d.s.data().iter().cloned().fold(0.0f64, f64::max);
    let unique = d
        .s
        .data()
        .iter()
        .all(|&x| x > 1e-12 * smax.max(1e-300) && smax > 0.0);
    Ok((d.u.matmul(&d.vt), unique))
}

/// Numerical rank: number of singular values above `tol * max(s)`.
pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize> {
    let d = svd(m)?;
    let smax = d.s.data().iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(d.s.data().iter().filter(|&&x| x > tol * smax).count())
}

/// Eigendecomposition of a symmetric matrix by cyclic two-sided Jacobi.
/// Returns (eigenvalues descending, eigenvectors as columns).
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if m.rows() != m.cols() {
        return Err(Error::invalid("symmetric_eigen", "matrix not square"));
    }
    let n = m.rows();
    let mut a = m.clone();
    let mut q = Matrix::identity(n);
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a.at(i, j) * a.at(i, j);
            }
        }
        if off.sqrt() <= JACOBI_TOL * a.frobenius_norm().max(1e-300) {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for qq in (p + 1)..n {
                let apq = a.at(p, qq);
                if apq == 0.0 {
                    continue;
                }
                let app = a.at(p, p);
                let aqq = a.at(qq, qq);
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, qq);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, qq, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(qq, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(qq, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let qkp = q.at(k, p);
                    let qkq = q.at(k, qq);
                    q.set(k, p, c * qkp - s * qkq);
                    q.set(k, qq, s * qkp + c * qkq);
                }
            }
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (a.at(i, i), i)).collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let evals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut evecs = Matrix::zeros(n, n);
    for (dst, &(_, src)) in pairs.iter().enumerate() {
        for i in 0..n {
            evecs.set(i, dst, q.at(i, src));
        }
    }
    Ok((evals, evecs))
}
