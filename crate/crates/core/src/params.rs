//! Operator parameterizations.
//!
//! * [`StableDtParams`]: free `(L, R)` mapped onto Schur-stable matrices,
//!   `A = 2 (M11 + M22 + R - R^T)^-1 M21` with `M = L L^T + eps I`.
//! * [`StableCtParams`]: free `(Wn, Wq, Wr)` mapped onto Hurwitz matrices.
//! * [`SocParams`]: `A = S^-1 O C S` with orthogonal `O` and `0 <= C <= I`,
//!   kept feasible by [`SocParams::project`].
//! * [`build_lkis`]: the ridge-regularized least-squares operator `Y1 Y2^+`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, polar, solve_discrete_lyapunov, svd, sym_eig, Lu, Mat};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub use crate::linalg::{eig, eigvals, spectral_radius, EigenDecomposition};

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_RIDGE: f64 = 1e-9;

fn uniform<S: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Mat<S> {
    Mat::from_fn(rows, cols, |_, _| S::lit(rng.random_range(-bound..=bound)))
}

fn check_shape<S: Scalar>(m: &Mat<S>, want: (usize, usize), op: &'static str) -> Result<()> {
    if m.shape() != want {
        return Err(Error::Dimension {
            op,
            lhs: m.shape(),
            rhs: want,
        });
    }
    Ok(())
}

/// Unconstrained parameters of a Schur-stable `N x N` operator.
#[derive(Clone, Debug, PartialEq)]
pub struct StableDtParams<S> {
    /// `2N x 2N`
    pub l: Mat<S>,
    /// `N x N`
    pub r: Mat<S>,
    pub epsilon: S,
}

impl<S: Scalar> StableDtParams<S> {
    pub fn new(l: Mat<S>, r: Mat<S>, epsilon: S) -> Result<Self> {
        let n = r.rows();
        check_shape(&r, (n, n), "StableDtParams R")?;
        check_shape(&l, (2 * n, 2 * n), "StableDtParams L")?;
        if !(epsilon > S::zero()) {
            return Err(Error::contract("StableDtParams: epsilon must be positive"));
        }
        Ok(Self { l, r, epsilon })
    }

    /// Entries of `L` and `R` drawn uniformly from `[-bound, bound]`.
    pub fn random<R: Rng + ?Sized>(n: usize, bound: f64, epsilon: S, rng: &mut R) -> Self {
        let l = uniform(rng, 2 * n, 2 * n, bound);
        let r = uniform(rng, n, n, bound);
        Self { l, r, epsilon }
    }

    pub fn dim(&self) -> usize {
        self.r.rows()
    }

    /// `M = L L^T + eps I`.
    pub fn m_matrix(&self) -> Mat<S> {
        let mut m = self.l.mul_nt(&self.l);
        for i in 0..m.rows() {
            m[(i, i)] += self.epsilon;
        }
        m
    }

    /// Value of the operator (no gradient).
    pub fn operator(&self) -> Result<Mat<S>> {
        let mut tape = Tape::new();
        let l = tape.constant(self.l.clone());
        let r = tape.constant(self.r.clone());
        let a = build_stable_dt(&mut tape, l, r, self.epsilon)?;
        Ok(tape.value(a).clone())
    }

    /// Recovers parameters whose operator equals a given Schur-stable `target`.
    ///
    /// Solves `P - A^T P A = I`, takes `E = P`, `F = P A`, assembles
    /// `M = [[E + E^T - P, F^T], [F, P]]`, rescales it so that
    /// `lambda_min(M) = 1` (the operator is invariant to this scaling when
    /// `R = 0`) and factors `M - eps I` by Cholesky.
    pub fn recover(target: &Mat<S>, epsilon: S) -> Result<Self> {
        if !target.is_square() {
            return Err(Error::Dimension {
                op: "recover",
                lhs: target.shape(),
                rhs: target.shape(),
            });
        }
        let rho = spectral_radius(target)?;
        if !(rho < S::one()) {
            return Err(Error::Infeasible(format!(
                "recover: target spectral radius {rho} is not below 1"
            )));
        }
        let n = target.rows();
        let p = solve_discrete_lyapunov(target, &Mat::identity(n))?;
        let f = p.mul_nn(target);
        let cert = BlockCertificate::from_blocks(p.clone(), f, p)?;
        let mut m = cert.m_block.clone();
        let lmin = sym_eig(&m)?.min();
        if !(lmin > S::zero()) {
            return Err(Error::Infeasible("recover: block matrix not positive definite".into()));
        }
        m = m.scale(S::one() / lmin);
        let mut shift = S::zero();
        let l = loop {
            let mut shifted = m.clone();
            for i in 0..2 * n {
                shifted[(i, i)] -= epsilon - shift;
            }
            match cholesky(&shifted) {
                Ok(l) => break l,
                Err(_) if shift < S::lit(1e-6) => {
                    shift = if shift == S::zero() { S::epsilon() } else { shift * S::lit(10.0) };
                }
                Err(e) => return Err(e),
            }
        };
        Ok(Self {
            l,
            r: Mat::zeros(n, n),
            epsilon,
        })
    }
}

/// Builds the Schur-stable operator on the tape from `L` (`2N x 2N`) and `R` (`N x N`).
pub fn build_stable_dt<S: Scalar>(tape: &mut Tape<S>, l: Var, r: Var, epsilon: S) -> Result<Var> {
    let n = r.rows();
    if r.shape() != (n, n) || l.shape() != (2 * n, 2 * n) {
        return Err(Error::Dimension {
            op: "build_stable_dt",
            lhs: l.shape(),
            rhs: r.shape(),
        });
    }
    let lt = tape.transpose(l);
    let llt = tape.matmul(l, lt)?;
    let eps_i = tape.constant(Mat::identity(2 * n).scale(epsilon));
    let m = tape.add(llt, eps_i)?;
    let m11 = tape.block(m, 0, 0, n, n)?;
    let m22 = tape.block(m, n, n, n, n)?;
    let m21 = tape.block(m, n, 0, n, n)?;
    let rt = tape.transpose(r);
    let skew = tape.sub(r, rt)?;
    let diag_sum = tape.add(m11, m22)?;
    let inner = tape.add(diag_sum, skew)?;
    let inv = tape.inverse(inner)?;
    let a = tape.matmul(inv, m21)?;
    Ok(tape.scale(a, S::lit(2.0)))
}

/// Unconstrained parameters of a Hurwitz `N x N` generator.
#[derive(Clone, Debug, PartialEq)]
pub struct StableCtParams<S> {
    pub wn: Mat<S>,
    pub wq: Mat<S>,
    pub wr: Mat<S>,
    pub epsilon: S,
}

impl<S: Scalar> StableCtParams<S> {
    pub fn new(wn: Mat<S>, wq: Mat<S>, wr: Mat<S>, epsilon: S) -> Result<Self> {
        let n = wn.rows();
        for m in [&wn, &wq, &wr] {
            check_shape(m, (n, n), "StableCtParams")?;
        }
        if !(epsilon > S::zero()) {
            return Err(Error::contract("StableCtParams: epsilon must be positive"));
        }
        Ok(Self { wn, wq, wr, epsilon })
    }

    pub fn random<R: Rng + ?Sized>(n: usize, bound: f64, epsilon: S, rng: &mut R) -> Self {
        Self {
            wn: uniform(rng, n, n, bound),
            wq: uniform(rng, n, n, bound),
            wr: uniform(rng, n, n, bound),
            epsilon,
        }
    }

    pub fn dim(&self) -> usize {
        self.wn.rows()
    }

    pub fn operator(&self) -> Result<Mat<S>> {
        let mut tape = Tape::new();
        let wn = tape.constant(self.wn.clone());
        let wq = tape.constant(self.wq.clone());
        let wr = tape.constant(self.wr.clone());
        let a = build_stable_ct(&mut tape, wn, wq, wr, self.epsilon)?;
        Ok(tape.value(a).clone())
    }
}

/// `A = (Wn Wn^T + eps I)^-1 (-Wq Wq^T - eps I + (Wr - Wr^T) / 2)`.
pub fn build_stable_ct<S: Scalar>(tape: &mut Tape<S>, wn: Var, wq: Var, wr: Var, epsilon: S) -> Result<Var> {
    let n = wn.rows();
    for v in [wn, wq, wr] {
        if v.shape() != (n, n) {
            return Err(Error::Dimension {
                op: "build_stable_ct",
                lhs: wn.shape(),
                rhs: v.shape(),
            });
        }
    }
    let eps_i = tape.constant(Mat::identity(n).scale(epsilon));
    let wnt = tape.transpose(wn);
    let nn = tape.matmul(wn, wnt)?;
    let lhs = tape.add(nn, eps_i)?;
    let wqt = tape.transpose(wq);
    let qq = tape.matmul(wq, wqt)?;
    let neg = tape.add(qq, eps_i)?;
    let wrt = tape.transpose(wr);
    let skew = tape.sub(wr, wrt)?;
    let half_skew = tape.scale(skew, S::lit(0.5));
    let rhs = tape.sub(half_skew, neg)?;
    let inv = tape.inverse(lhs)?;
    tape.matmul(inv, rhs)
}

/// Constrained parameterization `A = S^-1 O C S`.
#[derive(Clone, Debug, PartialEq)]
pub struct SocParams<S> {
    pub s: Mat<S>,
    pub o: Mat<S>,
    pub c: Mat<S>,
}

/// Floor applied to the singular values of `S` during projection.
const SOC_MIN_SINGULAR: f64 = 1e-6;

impl<S: Scalar> SocParams<S> {
    pub fn new(s: Mat<S>, o: Mat<S>, c: Mat<S>) -> Result<Self> {
        let n = s.rows();
        for m in [&s, &o, &c] {
            check_shape(m, (n, n), "SocParams")?;
        }
        Ok(Self { s, o, c })
    }

    /// Near-identity start: `S = I + U`, `O = polar(I + U)`, `C = I/2 + sym(U)`, then projected.
    pub fn random<R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Result<Self> {
        let eye = Mat::<S>::identity(n);
        let s = eye.add(&uniform(rng, n, n, bound))?;
        let o = eye.add(&uniform(rng, n, n, bound))?;
        let c = eye.scale(S::lit(0.5)).add(&uniform(rng, n, n, bound))?;
        let mut p = Self { s, o, c };
        p.project()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.s.rows()
    }

    /// Restores feasibility: `O` to its orthogonal polar factor, `C` to its
    /// symmetric part with eigenvalues clipped to `[0, 1]`, and the singular
    /// values of `S` floored away from zero.
    pub fn project(&mut self) -> Result<()> {
        self.o = polar(&self.o)?;
        let ce = sym_eig(&self.c)?;
        self.c = ce
            .reconstruct_with(|x| x.max(S::zero()).min(S::one()))
            .symmetrize();
        let d = svd(&self.s)?;
        let floor = S::lit(SOC_MIN_SINGULAR) * d.s[0].max(S::one());
        if d.s.iter().any(|&x| x < floor) {
            let n = self.dim();
            let us = Mat::from_fn(n, n, |r, c| d.u[(r, c)] * d.s[c].max(floor));
            self.s = us.mul_nt(&d.v);
        }
        Ok(())
    }

    pub fn operator(&self) -> Result<Mat<S>> {
        let mut tape = Tape::new();
        let s = tape.constant(self.s.clone());
        let o = tape.constant(self.o.clone());
        let c = tape.constant(self.c.clone());
        let a = build_soc(&mut tape, s, o, c)?;
        Ok(tape.value(a).clone())
    }
}

/// `A = S^-1 O C S` on the tape.
pub fn build_soc<S: Scalar>(tape: &mut Tape<S>, s: Var, o: Var, c: Var) -> Result<Var> {
    let sinv = tape.inverse(s)?;
    let oc = tape.matmul(o, c)?;
    let ocs = tape.matmul(oc, s)?;
    tape.matmul(sinv, ocs)
}

/// `A = Y1 Y2^T (Y2 Y2^T + ridge I)^-1`, the ridge-regularized `Y1 Y2^+`.
///
/// Columns of `y2` are embeddings at times `0..T-1` and columns of `y1` the
/// embeddings one step later.
pub fn build_lkis<S: Scalar>(tape: &mut Tape<S>, y1: Var, y2: Var, ridge: S) -> Result<Var> {
    if y1.shape() != y2.shape() {
        return Err(Error::Dimension {
            op: "build_lkis",
            lhs: y1.shape(),
            rhs: y2.shape(),
        });
    }
    if ridge < S::zero() {
        return Err(Error::contract("build_lkis: ridge must be non-negative"));
    }
    let n = y2.rows();
    let y2t = tape.transpose(y2);
    let cross = tape.matmul(y1, y2t)?;
    let gram = tape.matmul(y2, y2t)?;
    let reg = tape.constant(Mat::identity(n).scale(ridge));
    let gram = tape.add(gram, reg)?;
    let inv = tape.inverse(gram)?;
    tape.matmul(cross, inv)
}

/// Value-only least-squares operator from snapshot matrices.
pub fn lkis_operator<S: Scalar>(y1: &Mat<S>, y2: &Mat<S>, ridge: S) -> Result<Mat<S>> {
    let mut tape = Tape::new();
    let a = tape.constant(y1.clone());
    let b = tape.constant(y2.clone());
    let op = build_lkis(&mut tape, a, b, ridge)?;
    Ok(tape.value(op).clone())
}

/// Block matrices `E`, `F`, `P` behind a Schur-stable `E^-1 F`, together
/// with `M = [[E + E^T - P, F^T], [F, P]]`. `M > 0` holds exactly when
/// `E^-1 F` is Schur stable.
#[derive(Clone, Debug)]
pub struct BlockCertificate<S> {
    pub e: Mat<S>,
    pub f: Mat<S>,
    pub p: Mat<S>,
    pub m_block: Mat<S>,
}

impl<S: Scalar> BlockCertificate<S> {
    pub fn from_blocks(e: Mat<S>, f: Mat<S>, p: Mat<S>) -> Result<Self> {
        let n = e.rows();
        for m in [&e, &f, &p] {
            check_shape(m, (n, n), "BlockCertificate")?;
        }
        let top_left = e.add(&e.transpose())?.sub(&p)?;
        let m_block = Mat::from_fn(2 * n, 2 * n, |r, c| match (r < n, c < n) {
            (true, true) => top_left[(r, c)],
            (true, false) => f[(c - n, r)],
            (false, true) => f[(r - n, c)],
            (false, false) => p[(r - n, c - n)],
        });
        Ok(Self { e, f, p, m_block })
    }

    /// `E = (M11 + M22 + R - R^T) / 2`, `F = M21`, `P = M22` for given parameters.
    pub fn from_params(params: &StableDtParams<S>) -> Result<Self> {
        let n = params.dim();
        let m = params.m_matrix();
        let m11 = m.block(0, 0, n, n);
        let m22 = m.block(n, n, n, n);
        let m21 = m.block(n, 0, n, n);
        let e = m11
            .add(&m22)?
            .add(&params.r.sub(&params.r.transpose())?)?
            .scale(S::lit(0.5));
        Self::from_blocks(e, m21, m22)
    }

    pub fn operator(&self) -> Result<Mat<S>> {
        Ok(Lu::factor(&self.e)?.solve(&self.f))
    }

    /// Smallest eigenvalue of the symmetric block matrix.
    pub fn min_eigenvalue(&self) -> Result<S> {
        Ok(sym_eig(&self.m_block)?.min())
    }
}
