//! General real eigen-solver: Householder reduction to Hessenberg form followed
//! by single-shift complex QR iteration (Wilkinson shifts, deflation), giving a
//! complex Schur form `A = Q T Q^H`. Eigenvectors come from back-substitution
//! on the triangular factor.

use num_complex::Complex;

use super::{c_inverse, CMat, Mat};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Eigenpairs of a real square matrix, `A V = V diag(values)`.
#[derive(Clone, Debug)]
pub struct EigenDecomposition<S> {
    pub values: Vec<Complex<S>>,
    /// Unit-norm eigenvectors, column-wise.
    pub vectors: CMat<S>,
    /// `V^-1`, absent when `V` is numerically singular.
    pub vectors_inv: Option<CMat<S>>,
    /// `||A V - V diag(values)||_F`.
    pub residual: S,
    /// Frobenius condition estimate `||V||_F ||V^-1||_F` (infinite if singular).
    pub cond: S,
    scale: S,
}

impl<S: Scalar> EigenDecomposition<S> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn spectral_radius(&self) -> S {
        self.values.iter().fold(S::zero(), |m, z| m.max(z.norm()))
    }

    pub fn max_real(&self) -> S {
        self.values.iter().fold(S::neg_infinity(), |m, z| m.max(z.re))
    }

    /// Whether the decomposition is accurate enough to replace matrix powers:
    /// residual below `1e-8` and `cond(V)` below `1e8`.
    pub fn is_usable(&self) -> bool {
        let res_tol = S::lit(1e-8).max(S::lit(100.0) * S::epsilon() * self.scale);
        self.vectors_inv.is_some() && self.residual < res_tol && self.cond < S::lit(1e8)
    }
}

fn czero<S: Scalar>() -> Complex<S> {
    Complex::new(S::zero(), S::zero())
}

fn check_square<S: Scalar>(a: &Mat<S>, op: &'static str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape(),
            rhs: a.shape(),
        });
    }
    if !a.is_finite() {
        return Err(Error::contract(format!("{op}: matrix has non-finite entries")));
    }
    Ok(())
}

/// Householder reduction `A = Q H Q^T` with `H` upper Hessenberg.
fn hessenberg<S: Scalar>(a: &Mat<S>) -> (Mat<S>, Mat<S>) {
    let n = a.rows();
    let mut h = a.clone();
    let mut q = Mat::identity(n);
    for k in 0..n.saturating_sub(2) {
        let mut v: Vec<S> = (k + 1..n).map(|r| h[(r, k)]).collect();
        let norm = v.iter().map(|&x| x * x).sum::<S>().sqrt();
        if norm == S::zero() {
            continue;
        }
        let alpha = if v[0] >= S::zero() { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|&x| x * x).sum::<S>().sqrt();
        if vnorm == S::zero() {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        let two = S::lit(2.0);
        // H <- (I - 2 v v^T) H on rows k+1..n
        for c in 0..n {
            let d: S = v.iter().enumerate().map(|(i, &vi)| vi * h[(k + 1 + i, c)]).sum();
            for (i, &vi) in v.iter().enumerate() {
                h[(k + 1 + i, c)] -= two * vi * d;
            }
        }
        // H <- H (I - 2 v v^T), Q <- Q (I - 2 v v^T) on columns k+1..n
        for r in 0..n {
            let d: S = v.iter().enumerate().map(|(i, &vi)| vi * h[(r, k + 1 + i)]).sum();
            for (i, &vi) in v.iter().enumerate() {
                h[(r, k + 1 + i)] -= two * vi * d;
            }
            let d: S = v.iter().enumerate().map(|(i, &vi)| vi * q[(r, k + 1 + i)]).sum();
            for (i, &vi) in v.iter().enumerate() {
                q[(r, k + 1 + i)] -= two * vi * d;
            }
        }
        for r in k + 2..n {
            h[(r, k)] = S::zero();
        }
    }
    (h, q)
}

/// Eigenvalue of the 2x2 block `[[a, b], [c, d]]` closest to `d`.
fn wilkinson_shift<S: Scalar>(a: Complex<S>, b: Complex<S>, c: Complex<S>, d: Complex<S>) -> Complex<S> {
    let half = S::lit(0.5);
    let delta = (a - d) * half;
    let bc = b * c;
    let disc = (delta * delta + bc).sqrt();
    let den_plus = delta + disc;
    let den_minus = delta - disc;
    let den = if den_plus.norm() >= den_minus.norm() { den_plus } else { den_minus };
    if den.norm() == S::zero() {
        d
    } else {
        d - bc / den
    }
}

/// Complex Schur form of a real matrix: returns `(T, Q)` with `A = Q T Q^H`.
fn schur<S: Scalar>(a: &Mat<S>) -> Result<(CMat<S>, CMat<S>)> {
    let n = a.rows();
    let (h, q) = hessenberg(a);
    let mut t = h.to_complex();
    let mut z = q.to_complex();
    if n <= 1 {
        return Ok((t, z));
    }
    let eps = S::epsilon();
    let hnorm = t.c_frobenius().max(S::min_positive_value());
    let max_iter = 100 * n;
    let mut iter = 0;
    let mut since_deflation = 0;
    let mut hi = n - 1;
    while hi > 0 {
        // locate the start of the active unreduced block
        let mut lo = hi;
        while lo > 0 {
            let sub = t[(lo, lo - 1)].norm();
            let mut scale = t[(lo - 1, lo - 1)].norm() + t[(lo, lo)].norm();
            if scale == S::zero() {
                scale = hnorm;
            }
            if sub <= eps * scale {
                t[(lo, lo - 1)] = czero();
                break;
            }
            lo -= 1;
        }
        if lo == hi {
            hi -= 1;
            since_deflation = 0;
            continue;
        }
        iter += 1;
        since_deflation += 1;
        if iter > max_iter {
            return Err(Error::Convergence {
                op: "hessenberg qr",
                iterations: max_iter,
            });
        }
        let mu = if since_deflation % 11 == 10 {
            let bump = t[(hi, hi - 1)].norm() + if hi >= 2 { t[(hi - 1, hi - 2)].norm() } else { S::zero() };
            t[(hi, hi)] + Complex::new(bump * S::lit(0.75), bump * S::lit(0.5))
        } else {
            wilkinson_shift(t[(hi - 1, hi - 1)], t[(hi - 1, hi)], t[(hi, hi - 1)], t[(hi, hi)])
        };
        for k in lo..=hi {
            t[(k, k)] = t[(k, k)] - mu;
        }
        let mut rots: Vec<(S, Complex<S>)> = Vec::with_capacity(hi - lo);
        for k in lo..hi {
            let (x, y) = (t[(k, k)], t[(k + 1, k)]);
            let r = (x.norm_sqr() + y.norm_sqr()).sqrt();
            let (c, s) = if r == S::zero() {
                (S::one(), czero())
            } else if x.norm() == S::zero() {
                (S::zero(), y.conj() / y.norm())
            } else {
                let xn = x.norm();
                (xn / r, (x / xn) * y.conj() / r)
            };
            for col in k..n {
                let (a0, a1) = (t[(k, col)], t[(k + 1, col)]);
                t[(k, col)] = a0 * c + s * a1;
                t[(k + 1, col)] = -s.conj() * a0 + a1 * c;
            }
            rots.push((c, s));
        }
        for (i, &(c, s)) in rots.iter().enumerate() {
            let k = lo + i;
            let row_end = (k + 2).min(hi);
            for row in 0..=row_end {
                let (a0, a1) = (t[(row, k)], t[(row, k + 1)]);
                t[(row, k)] = a0 * c + s.conj() * a1;
                t[(row, k + 1)] = -s * a0 + a1 * c;
            }
            for row in 0..n {
                let (a0, a1) = (z[(row, k)], z[(row, k + 1)]);
                z[(row, k)] = a0 * c + s.conj() * a1;
                z[(row, k + 1)] = -s * a0 + a1 * c;
            }
        }
        for k in lo..=hi {
            t[(k, k)] = t[(k, k)] + mu;
        }
    }
    Ok((t, z))
}

/// Eigenvalues only.
pub fn eigvals<S: Scalar>(a: &Mat<S>) -> Result<Vec<Complex<S>>> {
    check_square(a, "eigvals")?;
    let (t, _) = schur(a)?;
    Ok((0..a.rows()).map(|i| t[(i, i)]).collect())
}

/// Largest eigenvalue modulus.
pub fn spectral_radius<S: Scalar>(a: &Mat<S>) -> Result<S> {
    Ok(eigvals(a)?.iter().fold(S::zero(), |m, z| m.max(z.norm())))
}

/// Full eigen-decomposition with eigenvectors and diagnostics.
pub fn eig<S: Scalar>(a: &Mat<S>) -> Result<EigenDecomposition<S>> {
    check_square(a, "eig")?;
    let n = a.rows();
    let (t, q) = schur(a)?;
    let values: Vec<Complex<S>> = (0..n).map(|i| t[(i, i)]).collect();
    let smin = (S::epsilon() * t.c_frobenius()).max(S::min_positive_value());

    // eigenvectors of the triangular factor
    let mut y = CMat::c_zeros(n, n);
    for k in 0..n {
        let lambda = values[k];
        y[(k, k)] = Complex::new(S::one(), S::zero());
        for i in (0..k).rev() {
            let mut acc: Complex<S> = czero();
            for j in i + 1..=k {
                acc = acc + t[(i, j)] * y[(j, k)];
            }
            let mut d = t[(i, i)] - lambda;
            if d.norm() < smin {
                d = Complex::new(smin, S::zero());
            }
            y[(i, k)] = -acc / d;
        }
    }
    let mut v = q.c_mul(&y);
    for c in 0..n {
        let norm = (0..n).map(|r| v[(r, c)].norm_sqr()).sum::<S>().sqrt();
        if norm > S::zero() {
            for r in 0..n {
                v[(r, c)] = v[(r, c)] / norm;
            }
        }
    }

    let av = a.to_complex().c_mul(&v);
    let residual = (0..n)
        .flat_map(|r| (0..n).map(move |c| (r, c)))
        .map(|(r, c)| (av[(r, c)] - v[(r, c)] * values[c]).norm_sqr())
        .sum::<S>()
        .sqrt();
    let vectors_inv = c_inverse(&v).ok();
    let cond = match &vectors_inv {
        Some(inv) => v.c_frobenius() * inv.c_frobenius(),
        None => S::infinity(),
    };
    Ok(EigenDecomposition {
        values,
        vectors: v,
        vectors_inv,
        residual,
        cond,
        scale: a.frobenius(),
    })
}
