use super::{Lu, Mat};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Solves `P - A^T P A = Q` through the Kronecker system
/// `(I - A^T (x) A^T) vec(P) = vec(Q)`; the result is symmetrized.
///
/// No stability check is made here; a singular system is reported as such.
pub fn solve_discrete_lyapunov<S: Scalar>(a: &Mat<S>, q: &Mat<S>) -> Result<Mat<S>> {
    if !a.is_square() || q.shape() != a.shape() {
        return Err(Error::Dimension {
            op: "solve_discrete_lyapunov",
            lhs: a.shape(),
            rhs: q.shape(),
        });
    }
    let n = a.rows();
    let nn = n * n;
    // Row-major vec: index (i, j) -> i * n + j. Then
    // (A^T P A)_{ij} = sum_{k,l} A_{ki} A_{lj} P_{kl}.
    let mut k = Mat::zeros(nn, nn);
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for kk in 0..n {
                let aki = a[(kk, i)];
                if aki == S::zero() {
                    continue;
                }
                for l in 0..n {
                    k[(row, kk * n + l)] -= aki * a[(l, j)];
                }
            }
            k[(row, row)] += S::one();
        }
    }
    let lu = Lu::factor_named(&k, "discrete lyapunov")?;
    let p = lu.solve_vec(q.as_slice());
    Ok(Mat::from_vec(n, n, p).symmetrize())
}

/// `||P - A^T P A - Q||_F`.
pub fn dlyap_residual<S: Scalar>(a: &Mat<S>, p: &Mat<S>, q: &Mat<S>) -> S {
    let apa = a.mul_tn(&p.mul_nn(a));
    p.sub(&apa).and_then(|d| d.sub(q)).map(|d| d.frobenius()).unwrap_or(S::infinity())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dynamics_give_q() {
        let p = solve_discrete_lyapunov(&Mat::<f64>::zeros(3, 3), &Mat::identity(3)).unwrap();
        assert_eq!(p, Mat::identity(3));
    }

    #[test]
    fn scalar_formula() {
        let p = solve_discrete_lyapunov(&Mat::<f64>::from_rows(&[&[0.5]]), &Mat::from_rows(&[&[1.0]])).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-15);
    }
}
