//! Small dense linear algebra: row-major matrices, LU, symmetric eigen/SVD and a
//! general (nonsymmetric) eigen-solver.

mod eig;
mod lyap;
mod lu;
mod sym;

use std::ops::{Index, IndexMut};

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use eig::{eig, eigvals, spectral_radius, EigenDecomposition};
pub use lu::{c_inverse, Lu};
pub use lyap::{dlyap_residual, solve_discrete_lyapunov};
pub use sym::{cholesky, polar, svd, sym_eig, Svd, SymEig};

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type CMat<S> = Mat<Complex<S>>;

impl<T: std::fmt::Debug> std::fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[r * self.cols..(r + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

impl<T: Copy> Mat<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: {rows}x{cols} needs {} entries", rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_col(&mut self, c: usize, values: &[T]) {
        assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self[(r, c)] = *v;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Copies the `rows x cols` block whose top-left corner is `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of range");
        Self::from_fn(rows, cols, |r, c| self[(r0 + r, c0 + c)])
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, S::zero())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { S::one() } else { S::zero() })
    }

    pub fn from_diag(d: &[S]) -> Self {
        let n = d.len();
        Self::from_fn(n, n, |r, c| if r == c { d[r] } else { S::zero() })
    }

    /// Column vector from a slice.
    pub fn col_vec(v: &[S]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    /// Builds from nested `f64` rows; intended for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&x| S::lit(x)));
        }
        Self::from_vec(r, c, data)
    }

    pub fn diag(&self) -> Vec<S> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(self.mul_nn(other))
    }

    /// `self * other` without a shape check (panics on mismatch in debug builds).
    pub fn mul_nn(&self, b: &Self) -> Self {
        debug_assert_eq!(self.cols, b.rows);
        let (m, p, n) = (self.rows, self.cols, b.cols);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            let a_row = &self.data[i * p..(i + 1) * p];
            // four rows of `b` per pass over the output row
            let mut k = 0;
            while k + 4 <= p {
                let (a0, a1, a2, a3) = (a_row[k], a_row[k + 1], a_row[k + 2], a_row[k + 3]);
                let b0 = &b.data[k * n..(k + 1) * n];
                let b1 = &b.data[(k + 1) * n..(k + 2) * n];
                let b2 = &b.data[(k + 2) * n..(k + 3) * n];
                let b3 = &b.data[(k + 3) * n..(k + 4) * n];
                for j in 0..n {
                    out_row[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
                }
                k += 4;
            }
            for (kk, &a) in a_row.iter().enumerate().skip(k) {
                if a == S::zero() {
                    continue;
                }
                let b_row = &b.data[kk * n..(kk + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Self::from_vec(m, n, out)
    }

    /// `self * other^T`.
    pub fn mul_nt(&self, b: &Self) -> Self {
        debug_assert_eq!(self.cols, b.cols);
        let (m, p, n) = (self.rows, self.cols, b.rows);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * p..(i + 1) * p];
            for j in 0..n {
                out[i * n + j] = dot(a_row, &b.data[j * p..(j + 1) * p]);
            }
        }
        Self::from_vec(m, n, out)
    }

    /// `self^T * other`.
    pub fn mul_tn(&self, b: &Self) -> Self {
        debug_assert_eq!(self.rows, b.rows);
        let (p, m, n) = (self.rows, self.cols, b.cols);
        let mut out = vec![S::zero(); m * n];
        for k in 0..p {
            let a_row = &self.data[k * m..(k + 1) * m];
            let b_row = &b.data[k * n..(k + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Self::from_vec(m, n, out)
    }

    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Self::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|x| x * s)
    }

    /// In-place `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: S, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_sq(&self) -> S {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn frobenius(&self) -> S {
        self.frobenius_sq().sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm_1(&self) -> S {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self[(r, c)].abs()).sum::<S>())
            .fold(S::zero(), S::max)
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `(self + self^T) / 2`.
    pub fn symmetrize(&self) -> Self {
        assert!(self.is_square());
        let half = S::lit(0.5);
        Self::from_fn(self.rows, self.cols, |r, c| (self[(r, c)] + self[(c, r)]) * half)
    }

    /// Integer power by repeated multiplication.
    pub fn powi(&self, t: usize) -> Self {
        assert!(self.is_square());
        let mut out = Self::identity(self.rows);
        for _ in 0..t {
            out = self.mul_nn(&out);
        }
        out
    }

    pub fn to_complex(&self) -> CMat<S> {
        self.map(|x| Complex::new(x, S::zero()))
    }

    /// Converts element type, e.g. `f64 -> f32`.
    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        self.map(|x| U::lit(x.as_f64()))
    }
}

impl<S: Scalar> CMat<S> {
    pub fn c_zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, Complex::new(S::zero(), S::zero()))
    }

    pub fn c_identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| {
            if r == c {
                Complex::new(S::one(), S::zero())
            } else {
                Complex::new(S::zero(), S::zero())
            }
        })
    }

    pub fn c_mul(&self, b: &Self) -> Self {
        assert_eq!(self.cols, b.rows, "c_mul shape");
        let (m, p, n) = (self.rows, self.cols, b.cols);
        let mut out = Self::c_zeros(m, n);
        for i in 0..m {
            for k in 0..p {
                let a = self[(i, k)];
                for j in 0..n {
                    out.data[i * n + j] = out.data[i * n + j] + a * b.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn c_frobenius(&self) -> S {
        self.data.iter().map(|z| z.norm_sqr()).sum::<S>().sqrt()
    }

    pub fn re(&self) -> Mat<S> {
        self.map(|z| z.re)
    }

    pub fn max_abs_im(&self) -> S {
        self.data.iter().fold(S::zero(), |m, z| m.max(z.im.abs()))
    }
}

/// Dot product with eight independent partial sums (fixed order, vectorizable).
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_values() {
        let a = Mat::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Mat::from_rows(&[&[0.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[2.0, 4.0]);
        let i2 = Mat::<f64>::identity(2);
        let v = Mat::from_rows(&[&[1.0], &[2.0]]);
        assert_eq!(i2.matmul(&v).unwrap(), v);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Mat::<f64>::zeros(2, 3);
        let b = Mat::<f64>::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn transposed_kernels_agree() {
        let a = Mat::<f64>::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 5.0);
        let b = Mat::<f64>::from_fn(5, 4, |r, c| (r as f64 + 1.0) * (c as f64 - 1.5));
        assert_eq!(a.mul_nt(&b), a.mul_nn(&b.transpose()));
        let c = Mat::<f64>::from_fn(3, 2, |r, c| (r + c) as f64);
        assert_eq!(a.mul_tn(&c), a.transpose().mul_nn(&c));
    }

    #[test]
    fn norms() {
        let a = Mat::<f64>::from_rows(&[&[3.0, -1.0], &[-4.0, 2.0]]);
        assert_eq!(a.norm_1(), 7.0);
        assert_eq!(a.frobenius_sq(), 30.0);
        assert_eq!(a.max_abs(), 4.0);
    }
}
