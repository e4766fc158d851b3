//! Dense row-major matrices and a cyclic Jacobi eigensolver for symmetric
//! matrices.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Dense row-major matrix. Rows of a data matrix are samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::domain(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LabError::domain("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `self · selfᵀ` scaled by `scale`, as a symmetric matrix.
    pub fn gram(&self, scale: f64) -> SymMatrix {
        let n = self.rows;
        let mut out = SymMatrix::zeros(n);
        for i in 0..n {
            let ri = self.row(i);
            for j in i..n {
                let v = dot(ri, self.row(j)) * scale;
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        out
    }
}

/// Symmetric dense matrix; construction symmetrizes, so `m[i][j] == m[j][i]`
/// holds bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diag(&vec![1.0; dim])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = d;
        }
        m
    }

    /// Builds from a full row-major array, averaging `(a_ij + a_ji)/2`.
    pub fn from_full(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(LabError::domain(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                data.len()
            )));
        }
        let mut m = Self { dim, data };
        m.symmetrize();
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(LabError::domain("symmetric matrix rows must be square"));
        }
        Self::from_full(dim, rows.concat())
    }

    /// Fills the matrix from the upper triangle `f(i, j)` with `i <= j`.
    pub fn from_upper_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m.data[i * dim + j] = v;
                m.data[j * dim + i] = v;
            }
        }
        m
    }

    fn symmetrize(&mut self) {
        let n = self.dim;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| dot(self.row(i), v)).collect()
    }

    /// `self · other`, returned as a plain row-major array (not symmetric in
    /// general).
    pub fn matmul(&self, other: &SymMatrix) -> Vec<f64> {
        let n = self.dim;
        assert_eq!(n, other.dim, "dimension mismatch in matmul");
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let out_row = &mut out[i * n..(i + 1) * n];
            for k in 0..n {
                let aik = self.data[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                axpy(aik, other.row(k), out_row);
            }
        }
        out
    }

    /// `tr(self · other)` for symmetric arguments.
    pub fn trace_product(&self, other: &SymMatrix) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler vectorize; the summation order is
    // fixed so results are reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Eigen-decomposition of a symmetric matrix. `vectors` holds eigenvectors
/// as rows, in the same order as `values` (descending).
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Option<Matrix>,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// All eigenvalues, sorted descending.
pub fn sym_eigenvalues(m: &SymMatrix) -> Result<Vec<f64>> {
    Ok(sym_eigen(m, false)?.values)
}

/// Cyclic Jacobi rotations. Converges quadratically once the off-diagonal
/// mass is small; each sweep costs O(n³).
pub fn sym_eigen(m: &SymMatrix, want_vectors: bool) -> Result<SymEigen> {
    if !m.is_finite() {
        return Err(LabError::domain("matrix has non-finite entries"));
    }
    let n = m.dim;
    let mut a = m.data.clone();
    let mut v = if want_vectors {
        Some(SymMatrix::identity(n).data)
    } else {
        None
    };

    let total: f64 = a.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Ok(finish(vec![0.0; n], v, n));
    }
    let tiny = f64::EPSILON * f64::EPSILON * total;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off <= tiny {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() * apq.abs() <= tiny / ((n * n) as f64) {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // A <- Jᵀ A J, columns then rows.
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;

                if let Some(v) = v.as_mut() {
                    // Rows of v accumulate eigenvector components.
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let values = (0..n).map(|i| a[i * n + i]).collect();
    Ok(finish(values, v, n))
}

fn finish(values: Vec<f64>, v: Option<Vec<f64>>, n: usize) -> SymEigen {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let sorted = order.iter().map(|&i| values[i]).collect();
    let vectors = v.map(|v| {
        // Column i of v is the eigenvector for values[i].
        let mut out = Matrix::zeros(n, n);
        for (r, &i) in order.iter().enumerate() {
            for k in 0..n {
                out.data[r * n + k] = v[k * n + i];
            }
        }
        out
    });
    SymEigen {
        values: sorted,
        vectors,
    }
}

/// Largest eigenvalue of a PSD matrix by power iteration, stopping when
/// successive Rayleigh quotients differ by at most `tol` relative.
pub fn power_iteration_top(m: &SymMatrix, tol: f64, max_iter: usize) -> Result<f64> {
    if !m.is_finite() {
        return Err(LabError::domain("matrix has non-finite entries"));
    }
    let n = m.dim;
    if n == 0 {
        return Ok(0.0);
    }
    // Deterministic start with no special alignment.
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * ((i as f64 * 0.618_033_988_749_895).fract()))
        .collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut lambda = 0.0;
    for it in 0..max_iter {
        let w = m.matvec(&v);
        let next = dot(&v, &w);
        let nw = norm2(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        if it > 0 && (next - lambda).abs() <= tol * next.abs() {
            return Ok(next);
        }
        lambda = next;
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Err(LabError::Convergence {
        iterations: max_iter,
        last_estimate: lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_eigenvalues() {
        let vals = sym_eigenvalues(&SymMatrix::identity(4)).unwrap();
        assert_eq!(vals, vec![1.0; 4]);
    }

    #[test]
    fn diagonal_sorted_descending() {
        let vals = sym_eigenvalues(&SymMatrix::from_diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn rejects_non_finite() {
        let m = SymMatrix::from_diag(&[1.0, f64::NAN]);
        assert!(matches!(sym_eigenvalues(&m), Err(LabError::Domain(_))));
        assert!(power_iteration_top(&m, 1e-10, 10).is_err());
    }

    #[test]
    fn construction_symmetrizes() {
        let m = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![4.0, 1.0]]).unwrap();
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 0), 3.0);
    }

    #[test]
    fn reconstruction_from_eigenvectors() {
        let m = SymMatrix::from_rows(&[
            vec![4.0, 1.0, -2.0],
            vec![1.0, 3.0, 0.5],
            vec![-2.0, 0.5, 1.0],
        ])
        .unwrap();
        let eig = sym_eigen(&m, true).unwrap();
        let v = eig.vectors.unwrap();
        let mut err = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| eig.values[k] * v.get(k, i) * v.get(k, j)).sum();
                err += (r - m.get(i, j)).powi(2);
            }
        }
        assert!(err.sqrt() <= 1e-10 * m.frobenius());
    }

    #[test]
    fn power_iteration_simple_cases() {
        assert_eq!(power_iteration_top(&SymMatrix::zeros(3), 1e-10, 100).unwrap(), 0.0);
        let top = power_iteration_top(&SymMatrix::from_diag(&[5.0, 1.0]), 1e-12, 1000).unwrap();
        assert!((top - 5.0).abs() < 1e-10);
    }

    #[test]
    fn power_iteration_reports_non_convergence() {
        // Nearly degenerate top pair: three iterations cannot reach 1e-16.
        let r = power_iteration_top(
            &SymMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.999_999]]).unwrap(),
            1e-16,
            3,
        );
        assert!(matches!(r, Err(LabError::Convergence { iterations: 3, .. })));
    }
}
