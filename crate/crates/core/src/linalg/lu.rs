use num_complex::Complex;

use super::{CMat, Mat};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative pivot threshold below which a matrix is treated as singular.
fn pivot_tol<S: Scalar>() -> S {
    S::lit(1e-12).max(S::epsilon() * S::lit(16.0))
}

/// LU factorization with partial pivoting, `P A = L U` packed in one matrix.
#[derive(Clone, Debug)]
pub struct Lu<S> {
    lu: Mat<S>,
    perm: Vec<usize>,
    swaps: usize,
}

impl<S: Scalar> Lu<S> {
    pub fn factor(a: &Mat<S>) -> Result<Self> {
        Self::factor_named(a, "lu")
    }

    pub(crate) fn factor_named(a: &Mat<S>, op: &'static str) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension {
                op,
                lhs: a.shape(),
                rhs: a.shape(),
            });
        }
        let n = a.rows();
        let scale = a.max_abs();
        let tol = pivot_tol::<S>() * scale;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|r| (r, lu[(r, k)].abs()))
                .fold((k, S::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pmax > tol) || scale == S::zero() {
                return Err(Error::Singular {
                    op,
                    pivot: pmax.as_f64(),
                    scale: scale.as_f64(),
                });
            }
            if p != k {
                for c in 0..n {
                    let tmp = lu[(k, c)];
                    lu[(k, c)] = lu[(p, c)];
                    lu[(p, c)] = tmp;
                }
                perm.swap(k, p);
                swaps += 1;
            }
            let pivot = lu[(k, k)];
            for r in k + 1..n {
                let f = lu[(r, k)] / pivot;
                lu[(r, k)] = f;
                if f != S::zero() {
                    for c in k + 1..n {
                        let v = lu[(k, c)];
                        lu[(r, c)] -= f * v;
                    }
                }
            }
        }
        Ok(Self { lu, perm, swaps })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows()
    }

    /// Solves `A X = B` for every column of `B`.
    pub fn solve(&self, b: &Mat<S>) -> Mat<S> {
        let n = self.dim();
        assert_eq!(b.rows(), n, "lu solve rhs rows");
        let m = b.cols();
        let mut x = Mat::from_fn(n, m, |r, c| b[(self.perm[r], c)]);
        for c in 0..m {
            for r in 0..n {
                let mut acc = x[(r, c)];
                for k in 0..r {
                    acc -= self.lu[(r, k)] * x[(k, c)];
                }
                x[(r, c)] = acc;
            }
            for r in (0..n).rev() {
                let mut acc = x[(r, c)];
                for k in r + 1..n {
                    acc -= self.lu[(r, k)] * x[(k, c)];
                }
                x[(r, c)] = acc / self.lu[(r, r)];
            }
        }
        x
    }

    pub fn solve_vec(&self, b: &[S]) -> Vec<S> {
        self.solve(&Mat::col_vec(b)).into_vec()
    }

    pub fn inverse(&self) -> Mat<S> {
        self.solve(&Mat::identity(self.dim()))
    }

    pub fn det(&self) -> S {
        let d = self.lu.diag().into_iter().fold(S::one(), |acc, x| acc * x);
        if self.swaps % 2 == 1 {
            -d
        } else {
            d
        }
    }
}

/// Inverse of a complex square matrix via partially pivoted Gauss-Jordan.
pub fn c_inverse<S: Scalar>(a: &CMat<S>) -> Result<CMat<S>> {
    assert!(a.is_square());
    let n = a.rows();
    let scale = a.as_slice().iter().fold(S::zero(), |m, z| m.max(z.norm()));
    let tol = pivot_tol::<S>() * scale;
    let mut m = a.clone();
    let mut inv = CMat::c_identity(n);
    for k in 0..n {
        let (p, pmax) = (k..n)
            .map(|r| (r, m[(r, k)].norm()))
            .fold((k, S::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pmax > tol) {
            return Err(Error::Singular {
                op: "complex inverse",
                pivot: pmax.as_f64(),
                scale: scale.as_f64(),
            });
        }
        if p != k {
            for c in 0..n {
                let t = m[(k, c)];
                m[(k, c)] = m[(p, c)];
                m[(p, c)] = t;
                let t = inv[(k, c)];
                inv[(k, c)] = inv[(p, c)];
                inv[(p, c)] = t;
            }
        }
        let piv_inv = Complex::new(S::one(), S::zero()) / m[(k, k)];
        for c in 0..n {
            m[(k, c)] = m[(k, c)] * piv_inv;
            inv[(k, c)] = inv[(k, c)] * piv_inv;
        }
        for r in 0..n {
            if r == k {
                continue;
            }
            let f = m[(r, k)];
            if f.norm_sqr() == S::zero() {
                continue;
            }
            for c in 0..n {
                let mk = m[(k, c)];
                let ik = inv[(k, c)];
                m[(r, c)] = m[(r, c)] - f * mk;
                inv[(r, c)] = inv[(r, c)] - f * ik;
            }
        }
    }
    Ok(inv)
}
