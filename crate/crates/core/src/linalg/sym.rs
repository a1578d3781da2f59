//! Symmetric eigenproblems, Cholesky and SVD, all Jacobi-rotation based.

use super::Mat;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix; `values` ascending, `vectors` column-wise.
#[derive(Clone, Debug)]
pub struct SymEig<S> {
    pub values: Vec<S>,
    pub vectors: Mat<S>,
}

impl<S: Scalar> SymEig<S> {
    pub fn min(&self) -> S {
        self.values[0]
    }

    pub fn max(&self) -> S {
        *self.values.last().expect("nonempty spectrum")
    }

    /// Rebuilds `V diag(f(lambda)) V^T`.
    pub fn reconstruct_with(&self, f: impl Fn(S) -> S) -> Mat<S> {
        let n = self.values.len();
        let d: Vec<S> = self.values.iter().map(|&l| f(l)).collect();
        Mat::from_fn(n, n, |r, c| {
            (0..n).map(|k| self.vectors[(r, k)] * d[k] * self.vectors[(c, k)]).sum()
        })
    }
}

/// Cyclic Jacobi eigen-solver. The input is symmetrized first.
pub fn sym_eig<S: Scalar>(a: &Mat<S>) -> Result<SymEig<S>> {
    if !a.is_square() {
        return Err(Error::Dimension {
            op: "sym_eig",
            lhs: a.shape(),
            rhs: a.shape(),
        });
    }
    let n = a.rows();
    let mut m = a.symmetrize();
    let mut v = Mat::identity(n);
    let total = m.frobenius_sq();
    let eps = S::epsilon();
    let mut converged = n <= 1;
    for _ in 0..MAX_SWEEPS {
        let off: S = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| m[(r, c)] * m[(r, c)])
            .sum();
        if off <= eps * eps * total || off == S::zero() {
            converged = true;
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == S::zero() {
                    continue;
                }
                // negligible against both diagonal entries: drop it
                let floor = eps * (m[(p, p)].abs() * m[(q, q)].abs()).sqrt();
                if apq.abs() <= floor {
                    m[(p, q)] = S::zero();
                    m[(q, p)] = S::zero();
                    continue;
                }
                rotated = true;
                let theta = (m[(q, q)] - m[(p, p)]) / (S::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (kp, kq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * kp - s * kq;
                    m[(k, q)] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * pk - s * qk;
                    m[(q, k)] = s * pk + c * qk;
                }
                for k in 0..n {
                    let (kp, kq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * kp - s * kq;
                    v[(k, q)] = s * kp + c * kq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        // rounding keeps each off-diagonal entry near eps * ||M||
        let off: S = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| m[(r, c)] * m[(r, c)])
            .sum();
        let nf = S::from_usize_lossy(n);
        converged = off <= nf * nf * eps * eps * total;
    }
    if !converged {
        return Err(Error::Convergence {
            op: "jacobi eigen",
            iterations: MAX_SWEEPS,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

/// Lower-triangular `L` with `a = L L^T`.
pub fn cholesky<S: Scalar>(a: &Mat<S>) -> Result<Mat<S>> {
    assert!(a.is_square(), "cholesky of non-square matrix");
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > S::zero()) {
            return Err(Error::contract(format!(
                "cholesky: matrix not positive definite (pivot {} at {j})",
                d
            )));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Thin SVD `a = U diag(s) V^T` with `s` descending.
#[derive(Clone, Debug)]
pub struct Svd<S> {
    pub u: Mat<S>,
    pub s: Vec<S>,
    pub v: Mat<S>,
}

/// One-sided (Hestenes) Jacobi SVD for `rows >= cols`.
pub fn svd<S: Scalar>(a: &Mat<S>) -> Result<Svd<S>> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::Dimension {
            op: "svd (needs rows >= cols)",
            lhs: a.shape(),
            rhs: a.shape(),
        });
    }
    let mut u = a.clone();
    let mut v = Mat::identity(n);
    let eps = S::epsilon();
    // columns below this squared norm are numerically zero
    let negligible = (eps * a.frobenius()).powi(2);
    let mut converged = n <= 1;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (S::zero(), S::zero(), S::zero());
                for k in 0..m {
                    let (x, y) = (u[(k, p)], u[(k, q)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == S::zero()
                    || alpha.min(beta) <= negligible
                    || gamma.abs() <= eps * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (S::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (S::one() + zeta * zeta).sqrt());
                let c = S::one() / (S::one() + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let (x, y) = (u[(k, p)], u[(k, q)]);
                    u[(k, p)] = c * x - s * y;
                    u[(k, q)] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * x - s * y;
                    v[(k, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            op: "jacobi svd",
            iterations: MAX_SWEEPS,
        });
    }
    let norms: Vec<S> = (0..n)
        .map(|j| (0..m).map(|k| u[(k, j)] * u[(k, j)]).sum::<S>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let s: Vec<S> = order.iter().map(|&j| norms[j]).collect();
    let v = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    let smax = s.first().copied().unwrap_or(S::zero());
    let tol = smax * eps * S::from_usize_lossy(m.max(1));
    let mut uo = Mat::zeros(m, n);
    for (c, &j) in order.iter().enumerate() {
        if s[c] > tol && s[c] > S::zero() {
            for k in 0..m {
                uo[(k, c)] = u[(k, j)] / s[c];
            }
        }
    }
    // Rank-deficient columns are completed to an orthonormal set.
    complete_orthonormal(&mut uo, &s, tol);
    Ok(Svd { u: uo, s, v })
}

fn complete_orthonormal<S: Scalar>(u: &mut Mat<S>, s: &[S], tol: S) {
    let (m, n) = u.shape();
    let mut candidate = 0;
    for c in 0..n {
        if s[c] > tol && s[c] > S::zero() {
            continue;
        }
        while candidate < m {
            let mut w: Vec<S> = (0..m).map(|k| if k == candidate { S::one() } else { S::zero() }).collect();
            candidate += 1;
            for _ in 0..2 {
                for j in 0..n {
                    if j == c || (0..m).all(|k| u[(k, j)] == S::zero()) {
                        continue;
                    }
                    let d: S = (0..m).map(|k| u[(k, j)] * w[k]).sum();
                    for (k, wk) in w.iter_mut().enumerate() {
                        *wk -= d * u[(k, j)];
                    }
                }
            }
            let norm = w.iter().map(|&x| x * x).sum::<S>().sqrt();
            if norm > S::lit(0.5) {
                for (k, wk) in w.iter().enumerate() {
                    u[(k, c)] = *wk / norm;
                }
                break;
            }
        }
    }
}

/// Orthogonal polar factor `U V^T` of a square matrix.
pub fn polar<S: Scalar>(a: &Mat<S>) -> Result<Mat<S>> {
    assert!(a.is_square(), "polar of non-square matrix");
    let d = svd(a)?;
    Ok(d.u.mul_nt(&d.v))
}
