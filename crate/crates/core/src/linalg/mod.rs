//! Dense linear-algebra kernels: SVD, pseudo-inverse, nearest-orthogonal
//! projection, CCA, CKA, cosine similarity.
//!
//! Everything here is deterministic and pure; matrices are small (desk scale,
//! tens of rows/columns), so the implementations favor clarity and exact
//! reproducibility over blocked performance.

mod cca;
mod svd;

pub use cca::{cca, trace_scale_ridge, CcaResult};
pub use svd::{nearest_orthogonal, numerical_rank, pinv, svd, Orientation, Svd};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dims(
                "Matrix::new",
                format!("{}x{}={}", rows, cols, rows * cols),
                data.len(),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Matrix::new".into(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = values[i];
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// self * other
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// self^T * other
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn row mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let srow = &self.data[k * self.cols..(k + 1) * self.cols];
            let orow = &other.data[k * other.cols..(k + 1) * other.cols];
            for i in 0..self.cols {
                let a = srow[i];
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// self * other^T
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt col mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let srow = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let orow = &other.data[j * other.cols..(j + 1) * other.cols];
                let mut acc = 0.0;
                for (a, b) in srow.iter().zip(orow) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// self * v for a column vector v.
    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(self.cols, v.dim(), "matvec dim mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v.data()) {
                acc += a * b;
            }
            out[i] = acc;
        }
        Vector::from(out)
    }

    /// self^T * v.
    pub fn matvec_t(&self, v: &Vector) -> Vector {
        assert_eq!(self.rows, v.dim(), "matvec_t dim mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let a = v.data()[i];
            if a == 0.0 {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(row) {
                *o += a * b;
            }
        }
        Vector::from(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        out
    }

    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Subtract the column mean from every column.
    pub fn center_columns(&self) -> Matrix {
        let mut out = self.clone();
        for j in 0..self.cols {
            let mut mean = 0.0;
            for i in 0..self.rows {
                mean += self.at(i, j);
            }
            mean /= self.rows as f64;
            for i in 0..self.rows {
                let v = out.at(i, j) - mean;
                out.set(i, j, v);
            }
        }
        out
    }
}

/// Dense f64 vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Vector::new".into(),
            });
        }
        Ok(Vector { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Vector {
            data: vec![0.0; dim],
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dot dim mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim());
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim());
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }
}

/// Cosine similarity with an explicit degeneracy marker.
///
/// When either vector has zero norm there is no direction to compare; the
/// value is defined as 0 and `degenerate` is set so the consumer (the
/// aggregation server) can treat it as "no evidence of relatedness".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSimilarity {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine(u: &Vector, v: &Vector) -> Result<CosineSimilarity> {
    if u.dim() != v.dim() {
        return Err(Error::dims("cosine", u.dim(), v.dim()));
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Ok(CosineSimilarity {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = (u.dot(v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(CosineSimilarity {
        value,
        degenerate: false,
    })
}

/// Linear centered kernel alignment between two feature matrices with the
/// same number of rows (samples). Invariant to orthogonal transforms and
/// isotropic scaling of either input; always in [0, 1].
pub fn cka(hi: &Matrix, hj: &Matrix) -> Result<f64> {
    if hi.rows() != hj.rows() {
        return Err(Error::dims("cka rows", hi.rows(), hj.rows()));
    }
    if hi.rows() < 2 {
        return Err(Error::invalid("cka", "needs at least 2 rows"));
    }
    let x = hi.center_columns();
    let y = hj.center_columns();
    let xty = x.matmul_tn(&y);
    let xtx = x.matmul_tn(&x);
    let yty = y.matmul_tn(&y);
    let den = xtx.frobenius_norm() * yty.frobenius_norm();
    if den == 0.0 {
        return Err(Error::ZeroVariance {
            context: "cka".into(),
        });
    }
    let num = xty.frobenius_norm().powi(2);
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_agrees_with_transposed_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 6, 3);
        let c1 = a.matmul(&b);
        let c2 = a.transpose().matmul_tn(&b.transpose().transpose());
        // a^T has shape 6x4; (a^T)^T * b == a * b
        assert!((c1.sub(&c2)).max_abs() < 1e-14);
        let d1 = a.matmul_nt(&b.transpose());
        assert!((c1.sub(&d1)).max_abs() < 1e-14);
    }

    #[test]
    fn cosine_basic_cases() {
        let u = Vector::from(vec![1.0, 2.0, 0.0]);
        let c = cosine(&u, &u).unwrap();
        assert!((c.value - 1.0).abs() < 1e-15);
        assert!(!c.degenerate);

        let e1 = Vector::from(vec![1.0, 0.0]);
        let e2 = Vector::from(vec![0.0, 1.0]);
        assert_eq!(cosine(&e1, &e2).unwrap().value, 0.0);

        let scaled = cosine(&u, &u.scale(3.0)).unwrap();
        assert!((scaled.value - 1.0).abs() < 1e-15);

        let z = Vector::zeros(3);
        let d = cosine(&z, &z).unwrap();
        assert_eq!(d.value, 0.0);
        assert!(d.degenerate);
        // one-sided zero is also degenerate
        assert!(cosine(&u, &Vector::zeros(3)).unwrap().degenerate);
    }

    #[test]
    fn cosine_positive_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let u = Vector::from((0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let v = Vector::from((0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let a: f64 = rng.random_range(0.01..10.0);
            let b: f64 = rng.random_range(0.01..10.0);
            let c0 = cosine(&u, &v).unwrap().value;
            let c1 = cosine(&u.scale(a), &v.scale(b)).unwrap().value;
            assert!((c0 - c1).abs() < 1e-12);
        }
    }

    #[test]
    fn cka_self_is_one_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 40, 6);
        let y = random_matrix(&mut rng, 40, 9);
        assert!((cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let xy = cka(&x, &y).unwrap();
        let yx = cka(&y, &x).unwrap();
        assert!((xy - yx).abs() < 1e-12);
        assert!((0.0..=1.0 + 1e-9).contains(&xy));
    }

    #[test]
    fn cka_orthogonal_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(&mut rng, 60, 8);
        // Random orthogonal via nearest_orthogonal of a random square matrix.
        let g = random_matrix(&mut rng, 8, 8);
        let (r, _) = nearest_orthogonal(&g, Orientation::Rows).unwrap();
        let xr = x.matmul(&r);
        assert!((cka(&x, &xr).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cka_independent_features_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_matrix(&mut rng, 200, 8);
        let y = random_matrix(&mut rng, 200, 8);
        assert!(cka(&x, &y).unwrap() < 0.3);
    }

    #[test]
    fn cka_rejects_zero_variance() {
        let x = Matrix::zeros(10, 3);
        let y = Matrix::from_fn(10, 3, |i, j| (i + j) as f64);
        assert!(matches!(cka(&x, &y), Err(Error::ZeroVariance { .. })));
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
    }
}
