//! Small dense linear algebra on row-major `f64` matrices.
//!
//! GEMM is delegated to `matrixmultiply`; the factorizations (Cholesky for
//! the ridge solve, Householder QR for orthogonal initialization) are local.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(dim_err!("{}x{} matrix needs {} values, got {}", rows, cols, rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(dim_err!("ragged rows: expected {} columns, got {}", c, row.len()));
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(dim_err!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(
            self.rows, self.cols, other.cols,
            1.0, &self.data, Layout::Normal, &other.data, Layout::Normal,
            0.0, &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(dim_err!("t_matmul {}x{} by {}x{}", self.rows, self.cols, other.rows, other.cols));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        gemm(
            self.cols, self.rows, other.cols,
            1.0, &self.data, Layout::Transposed, &other.data, Layout::Normal,
            0.0, &mut out.data,
        );
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(dim_err!("matmul_t {}x{} by {}x{}", self.rows, self.cols, other.rows, other.cols));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        gemm(
            self.rows, self.cols, other.rows,
            1.0, &self.data, Layout::Normal, &other.data, Layout::Transposed,
            0.0, &mut out.data,
        );
        Ok(out)
    }

    pub fn add_diagonal(&mut self, v: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += v;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        math::sqrt(self.data.iter().map(|x| x * x).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Storage order of a GEMM operand, relative to its logical shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Normal,
    Transposed,
}

/// `c ← alpha · op(a) · op(b) + beta · c` where `op(a)` is `m×k`, `op(b)` is
/// `k×n`, and `c` is a packed row-major `m×n` buffer. A `Transposed` operand is
/// stored as the row-major transpose of its logical shape.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: strides describe packed m×k, k×n and m×n buffers whose lengths
    // are asserted above.
    #[allow(unsafe_code)]
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(dim_err!("cholesky of non-square {}x{}", a.rows, a.cols));
        }
        let n = a.rows;
        let mut l = a.data.clone();
        for j in 0..n {
            let mut d = l[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numerical(alloc::format!(
                    "matrix is not positive definite (pivot {} = {:e})",
                    j, d
                )));
            }
            let d = math::sqrt(d);
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = l[i * n + j];
                let (ri, rj) = (i * n, j * n);
                for k in 0..j {
                    s -= l[ri + k] * l[rj + k];
                }
                l[i * n + j] = s / d;
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                l[i * n + j] = 0.0;
            }
        }
        Ok(Self { n, lower: l })
    }

    /// Solve `A X = B` for all columns of `B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.n;
        if b.rows != n {
            return Err(dim_err!("cholesky solve: {} rows vs factor of order {}", b.rows, n));
        }
        let m = b.cols;
        let mut x = b.data.clone();
        let l = &self.lower;
        // forward: L y = b
        for i in 0..n {
            for k in 0..i {
                let lik = l[i * n + k];
                if lik != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= lik * x[k * m + c];
                    }
                }
            }
            let d = l[i * n + i];
            for c in 0..m {
                x[i * m + c] /= d;
            }
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = l[k * n + i];
                if lki != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= lki * x[k * m + c];
                    }
                }
            }
            let d = l[i * n + i];
            for c in 0..m {
                x[i * m + c] /= d;
            }
        }
        Matrix::new(n, m, x)
    }
}

/// Thin Householder QR of a tall matrix (`rows >= cols`): returns the
/// `rows×cols` factor `Q` with orthonormal columns, sign-normalized so that
/// `R` has a non-negative diagonal.
pub fn thin_q(a: &Matrix) -> Result<Matrix> {
    let (m, n) = (a.rows, a.cols);
    if m < n {
        return Err(dim_err!("thin QR needs rows >= cols, got {}x{}", m, n));
    }
    let mut r = a.data.clone();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut diag_sign = vec![1.0; n];
    for j in 0..n {
        let mut norm = 0.0;
        for i in j..m {
            norm += r[i * n + j] * r[i * n + j];
        }
        let norm = math::sqrt(norm);
        let x0 = r[j * n + j];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..m).map(|i| r[i * n + j]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for col in j..n {
                let mut dot = 0.0;
                for (t, i) in (j..m).enumerate() {
                    dot += v[t] * r[i * n + col];
                }
                let f = 2.0 * dot / vnorm2;
                for (t, i) in (j..m).enumerate() {
                    r[i * n + col] -= f * v[t];
                }
            }
        }
        diag_sign[j] = if r[j * n + j] < 0.0 { -1.0 } else { 1.0 };
        vs.push(v);
    }
    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = vec![0.0; m * n];
    for j in 0..n {
        q[j * n + j] = 1.0;
    }
    for j in (0..n).rev() {
        let v = &vs[j];
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for col in 0..n {
            let mut dot = 0.0;
            for (t, i) in (j..m).enumerate() {
                dot += v[t] * q[i * n + col];
            }
            let f = 2.0 * dot / vnorm2;
            for (t, i) in (j..m).enumerate() {
                q[i * n + col] -= f * v[t];
            }
        }
    }
    for i in 0..m {
        for j in 0..n {
            q[i * n + j] *= diag_sign[j];
        }
    }
    Matrix::new(m, n, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_layouts_agree() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let b = Matrix::from_fn(4, 2, |i, j| (i as f64) * 0.5 - j as f64);
        let ab = a.matmul(&b).unwrap();
        let direct = Matrix::from_fn(3, 2, |i, j| (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum());
        assert!(ab.max_abs_diff(&direct) < 1e-12);
        assert!(a.transpose().t_matmul(&b).unwrap().max_abs_diff(&direct) < 1e-12);
        assert!(a.matmul_t(&b.transpose()).unwrap().max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Matrix::from_rows(&[&[4.0, 2.0, 0.4], &[2.0, 5.0, 1.0], &[0.4, 1.0, 3.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0, 0.0], &[2.0, 1.0], &[3.0, -1.0]]).unwrap();
        let x = Cholesky::factor(&a).unwrap().solve(&b).unwrap();
        assert!(a.matmul(&x).unwrap().max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).unwrap();
        assert!(matches!(Cholesky::factor(&a), Err(Error::Numerical(_))));
    }

    #[test]
    fn thin_q_has_orthonormal_columns_and_spans_input() {
        let a = Matrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 + 0.1 * j as f64);
        let q = thin_q(&a).unwrap();
        let qtq = q.t_matmul(&q).unwrap();
        assert!(qtq.max_abs_diff(&Matrix::identity(3)) < 1e-12);
        // projection of A onto span(Q) reproduces A
        let proj = q.matmul(&q.t_matmul(&a).unwrap()).unwrap();
        assert!(proj.max_abs_diff(&a) < 1e-10);
    }
}
