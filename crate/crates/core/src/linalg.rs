//! Small dense row-major matrices and the handful of BLAS-like kernels the
//! model needs. Everything here is deliberately naive: the shapes involved are
//! tiny (N ≤ 128, d ≤ a few hundred) and the loop orders below vectorize well.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v * s).collect() }
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &Self, s: T) -> Self {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + s * b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_acc(&self.data, &other.data, &mut out.data, self.rows, self.cols, other.cols);
        out
    }

    /// `out = self · x`.
    #[inline]
    pub fn matvec_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }

    /// `out = selfᵀ · x`.
    #[inline]
    pub fn matvec_t_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (&xi, row) in x.iter().zip(self.data.chunks_exact(self.cols)) {
            axpy(xi, row, out);
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Solves `self · X = rhs` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, rhs: &Self) -> Result<Self> {
        if !self.is_square() || rhs.rows != self.rows {
            return Err(Error::shape(
                "Mat::solve",
                format!("{}x{} system with {}x{} right-hand side", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let n = self.rows;
        let m = rhs.cols;
        let mut a = self.clone();
        let mut b = rhs.clone();
        let scale = self.data.iter().fold(T::zero(), |s, v| s.max(v.abs()));
        let tiny = scale * T::epsilon() * T::of_usize(n.max(1));
        for k in 0..n {
            let (piv, pmax) = (k..n)
                .map(|i| (i, a[(i, k)].abs()))
                .fold((k, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pmax > tiny) {
                return Err(Error::numeric("Mat::solve", format!("singular pivot at column {k}")));
            }
            if piv != k {
                for j in 0..n {
                    a.data.swap(k * n + j, piv * n + j);
                }
                for j in 0..m {
                    b.data.swap(k * m + j, piv * m + j);
                }
            }
            let pivot = a[(k, k)];
            for i in k + 1..n {
                let f = a[(i, k)] / pivot;
                if f == T::zero() {
                    continue;
                }
                for j in k..n {
                    let v = a[(k, j)];
                    a[(i, j)] -= f * v;
                }
                for j in 0..m {
                    let v = b[(k, j)];
                    b[(i, j)] -= f * v;
                }
            }
        }
        for k in (0..n).rev() {
            let pivot = a[(k, k)];
            for j in 0..m {
                let mut acc = b[(k, j)];
                for i in k + 1..n {
                    acc -= a[(k, i)] * b[(i, j)];
                }
                b[(k, j)] = acc / pivot;
            }
        }
        Ok(b)
    }

    pub fn to_f64(&self) -> Mat<f64> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v.f64()).collect() }
    }

    pub(crate) fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().map(|v| v.f64()))
    }
}

impl<T> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // four lanes so the reduction vectorizes; fixed order keeps it deterministic
    let mut acc = [T::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a · x`
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `out(m×n) += a(m×k) · b(k×n)`, all row-major.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n, "gemm_acc: shape mismatch");
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: lengths checked above; `out` is a distinct &mut borrow.
    unsafe { T::gemm(m, k, n, T::one(), a.as_ptr(), k_, 1, b.as_ptr(), n_, 1, T::one(), out.as_mut_ptr(), n_, 1) }
}

/// `out(k×n) += aᵀ · g` with `a` m×k and `g` m×n (weight-gradient shape).
pub fn gemm_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && g.len() == m * n && out.len() == k * n, "gemm_tn_acc: shape mismatch");
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: as in `gemm_acc`; `aᵀ` is read through swapped strides.
    unsafe { T::gemm(k, m, n, T::one(), a.as_ptr(), 1, k_, g.as_ptr(), n_, 1, T::one(), out.as_mut_ptr(), n_, 1) }
}

/// `out(m×k) += g · bᵀ` with `g` m×n and `b` k×n (input-gradient shape).
pub fn gemm_nt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(g.len() == m * n && b.len() == k * n && out.len() == m * k, "gemm_nt_acc: shape mismatch");
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: as in `gemm_acc`; `bᵀ` is read through swapped strides.
    unsafe { T::gemm(m, n, k, T::one(), g.as_ptr(), n_, 1, b.as_ptr(), 1, n_, T::one(), out.as_mut_ptr(), k_, 1) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_recovers_known_solution() {
        let a = Mat::from_vec(3, 3, vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 4.0]).unwrap();
        let x = Mat::from_vec(3, 2, vec![1.0, -1.0, 2.0, 0.5, -3.0, 4.0]).unwrap();
        let b = a.matmul(&x);
        let sol = a.solve(&b).unwrap();
        assert!(sol.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn solve_reports_singular_system() {
        let a = Mat::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(a.solve(&Mat::identity(2)), Err(Error::Numeric { .. })));
    }

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        Mat::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
    }

    #[test]
    fn gemm_variants_agree_with_loops() {
        for (m, k, n) in [(3, 4, 2), (1, 1, 1), (17, 9, 33), (32, 32, 32)] {
            let a = Mat::from_fn(m, k, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.7);
            let b = Mat::from_fn(k, n, |i, j| ((i * j) % 7) as f64 - 1.5);
            let ab = naive(&a, &b);
            assert!(a.matmul(&b).max_abs_diff(&ab) < 1e-12);
            let mut acc = vec![1.0; m * n];
            gemm_acc(a.as_slice(), b.as_slice(), &mut acc, m, k, n);
            assert!(acc.iter().zip(ab.as_slice()).all(|(x, y)| (x - 1.0 - y).abs() < 1e-12));
            let mut tn = vec![0.0; k * n];
            gemm_tn_acc(a.as_slice(), ab.as_slice(), &mut tn, m, k, n);
            assert!(Mat::from_vec(k, n, tn).unwrap().max_abs_diff(&naive(&a.transpose(), &ab)) < 1e-9);
            let mut nt = vec![0.0; m * k];
            gemm_nt_acc(ab.as_slice(), b.as_slice(), &mut nt, m, k, n);
            assert!(Mat::from_vec(m, k, nt).unwrap().max_abs_diff(&naive(&ab, &b.transpose())) < 1e-9);
        }
    }
}
