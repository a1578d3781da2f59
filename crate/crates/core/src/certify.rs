//! Stability and contraction certificates, eigenfunction extraction, the
//! constructive KKL embedding, evaluation metrics and method comparison.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fit_scaler, loocv, Trajectory};
use crate::embed::{phi, simulate, ExpmCache, Horizon, KoopmanModel, Method, TimeMode};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, eig, solve_discrete_lyapunov, spectral_radius, svd, sym_eig, dlyap_residual, Mat};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::train::{fit, TrainConfig};

/// `P` with `P - A^T P A = Q`. Requires `rho(A) < 1` and `Q` positive definite.
pub fn solve_dlyap<S: Scalar>(a: &Mat<S>, q: &Mat<S>) -> Result<Mat<S>> {
    if !a.is_square() || q.shape() != a.shape() {
        return Err(Error::Dimension {
            op: "solve_dlyap",
            lhs: a.shape(),
            rhs: q.shape(),
        });
    }
    let rho = spectral_radius(a)?;
    if !(rho < S::one()) {
        return Err(Error::Infeasible(format!("solve_dlyap: spectral radius {rho} is not below 1")));
    }
    cholesky(&q.symmetrize()).map_err(|_| Error::contract("solve_dlyap: Q is not positive definite"))?;
    solve_discrete_lyapunov(a, q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    /// Lower bound on the smallest singular value of the lift's Jacobian.
    pub min_sv_phi: f64,
    /// Bound on `||P - A^T P A - Q||_F`.
    pub lyap_residual: f64,
    /// Cap on states at which the Jacobian is evaluated.
    pub max_samples: usize,
    pub pairs: usize,
    pub pair_steps: usize,
    pub seed: u64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            min_sv_phi: 1e-6,
            lyap_residual: 1e-8,
            max_samples: 500,
            pairs: 100,
            pair_steps: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Outcome of [`certify`]. Matrices are stored row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionCertificate {
    pub time_mode: TimeMode,
    pub rho: f64,
    /// Largest real part of the spectrum (the continuous-time criterion).
    pub max_real: f64,
    pub p: Option<Vec<Vec<f64>>>,
    pub q: Vec<Vec<f64>>,
    pub lyap_residual: Option<f64>,
    pub p_min_eig: Option<f64>,
    pub p_max_eig: Option<f64>,
    /// `lambda_min(Q) / lambda_max(P)`.
    pub beta: Option<f64>,
    pub min_sv_phi: f64,
    /// Smallest eigenvalue of `Phi^T P Phi` over the sampled states.
    pub metric_min_eig: Option<f64>,
    pub samples: usize,
    pub d1_residual: f64,
    /// Largest one-step ratio of P-weighted pair distances.
    pub pair_max_ratio: Option<f64>,
    /// `sqrt(1 - beta)`, the guaranteed per-step contraction.
    pub pair_ratio_bound: Option<f64>,
    pub verdict: Verdict,
    pub reasons: Vec<String>,
}

impl ContractionCertificate {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

fn rows_of<S: Scalar>(m: &Mat<S>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).iter().map(|v| v.as_f64()).collect()).collect()
}

/// Evenly spaced indices thinning `total` items down to at most `cap`.
pub fn thin_indices(total: usize, cap: usize) -> Vec<usize> {
    if total <= cap {
        return (0..total).collect();
    }
    if cap <= 1 {
        return vec![0; cap.min(total)];
    }
    (0..cap).map(|k| k * (total - 1) / (cap - 1)).collect()
}

/// Jacobian `d phi / d x` (`N x n`) at a scaled state, one reverse pass per output.
pub fn phi_jacobian<S: Scalar>(model: &KoopmanModel<S>, x: &[S]) -> Result<Mat<S>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let xv = tape.param(Mat::col_vec(x));
    let z = phi(&mut tape, model, &vars, xv)?;
    let (big_n, n) = (model.big_n(), model.n());
    let mut jac = Mat::zeros(big_n, n);
    for i in 0..big_n {
        tape.zero_grad();
        let zi = tape.block(z, i, 0, 1, 1)?;
        tape.backward(zi)?;
        let g = tape.grad(xv);
        for j in 0..n {
            jac[(i, j)] = g[(j, 0)];
        }
    }
    Ok(jac)
}

/// Scaled states of a dataset, optionally with their successors.
fn scaled_pairs<S: Scalar>(model: &KoopmanModel<S>, data: &[Trajectory<S>]) -> (Vec<Vec<S>>, Vec<(Vec<S>, Vec<S>, S)>) {
    let mut states = Vec::new();
    let mut pairs = Vec::new();
    for t in data {
        let scaled: Vec<Vec<S>> = t.states.iter().map(|x| model.scaler.apply(x)).collect();
        let times = t.times_or_index();
        for k in 0..scaled.len() {
            if k + 1 < scaled.len() {
                pairs.push((scaled[k].clone(), scaled[k + 1].clone(), times[k + 1] - times[k]));
            }
        }
        states.extend(scaled);
    }
    (states, pairs)
}

fn columns<S: Scalar>(v: &[Vec<S>]) -> Mat<S> {
    let rows = v.first().map_or(0, Vec::len);
    Mat::from_fn(rows, v.len(), |r, c| v[c][r])
}

/// Post-hoc certificate for a trained model on raw-unit data.
pub fn certify<S: Scalar>(
    model: &KoopmanModel<S>,
    data: &[Trajectory<S>],
    opts: &CertifyOptions,
) -> Result<ContractionCertificate> {
    let a = model.operator()?;
    let big_n = model.big_n();
    let ed = eig(&a)?;
    let rho = ed.spectral_radius();
    let max_real = ed.max_real();
    let q = Mat::<S>::identity(big_n);
    let mut reasons = Vec::new();

    let (states, pairs) = scaled_pairs(model, data);
    if states.is_empty() {
        return Err(Error::contract("certify: empty dataset"));
    }

    // Jacobian rank on the sampled support
    let idx = thin_indices(states.len(), opts.max_samples);
    let mut jacobians = Vec::with_capacity(idx.len());
    let mut min_sv = f64::INFINITY;
    for &i in &idx {
        let j = phi_jacobian(model, &states[i])?;
        let s = svd(&j)?;
        min_sv = min_sv.min(s.s.last().map_or(0.0, |v| v.as_f64()));
        jacobians.push(j);
    }
    if !(min_sv > opts.min_sv_phi) {
        reasons.push(format!(
            "lift Jacobian rank: smallest singular value {min_sv:e} not above {:e}",
            opts.min_sv_phi
        ));
    }

    // one-step consistency on consecutive data pairs
    let mut d1 = 0.0f64;
    if !pairs.is_empty() {
        let now = model.phi_value(&columns(&pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>()))?;
        let next = model.phi_value(&columns(&pairs.iter().map(|p| p.1.clone()).collect::<Vec<_>>()))?;
        let mut cache = (model.time_mode == TimeMode::Continuous).then(|| ExpmCache::new(a.clone()));
        let pred = match cache.as_mut() {
            None => a.mul_nn(&now),
            Some(cache) => {
                let mut out = Mat::zeros(big_n, pairs.len());
                for (c, p) in pairs.iter().enumerate() {
                    let col = cache.get(p.2)?.mul_nn(&Mat::col_vec(&now.col(c)));
                    out.set_col(c, col.as_slice());
                }
                out
            }
        };
        for c in 0..pairs.len() {
            let e: S = (0..big_n).map(|r| (next[(r, c)] - pred[(r, c)]).powi(2)).sum();
            d1 = d1.max(e.sqrt().as_f64());
        }
    }

    let mut cert = ContractionCertificate {
        time_mode: model.time_mode,
        rho: rho.as_f64(),
        max_real: max_real.as_f64(),
        p: None,
        q: rows_of(&q),
        lyap_residual: None,
        p_min_eig: None,
        p_max_eig: None,
        beta: None,
        min_sv_phi: min_sv,
        metric_min_eig: None,
        samples: idx.len(),
        d1_residual: d1,
        pair_max_ratio: None,
        pair_ratio_bound: None,
        verdict: Verdict::Fail,
        reasons: Vec::new(),
    };

    if model.time_mode == TimeMode::Continuous {
        if !(max_real < S::zero()) {
            reasons.push(format!("spectral abscissa {max_real} is not negative"));
        }
        cert.verdict = if reasons.is_empty() { Verdict::Pass } else { Verdict::Fail };
        cert.reasons = reasons;
        return Ok(cert);
    }

    if !(rho < S::one()) {
        reasons.push(format!("spectral radius {rho} is not below 1"));
        cert.reasons = reasons;
        return Ok(cert);
    }
    let p = solve_dlyap(&a, &q)?;
    let residual = dlyap_residual(&a, &p, &q).as_f64();
    let pe = sym_eig(&p)?;
    let (pmin, pmax) = (pe.min().as_f64(), pe.max().as_f64());
    if !(residual < opts.lyap_residual) {
        reasons.push(format!("Lyapunov residual {residual:e} exceeds {:e}", opts.lyap_residual));
    }
    if !(pmin > 0.0) {
        reasons.push(format!("P not positive definite (min eigenvalue {pmin:e})"));
    }
    let beta = 1.0 / pmax;

    // the metric Phi^T P Phi on the sampled states
    let mut metric_min = f64::INFINITY;
    for j in &jacobians {
        let m = j.mul_tn(&p.mul_nn(j));
        metric_min = metric_min.min(sym_eig(&m)?.min().as_f64());
    }
    if !(metric_min > 0.0) {
        reasons.push(format!("contraction metric not positive definite (min eigenvalue {metric_min:e})"));
    }

    // P-weighted distance between lifted pairs under the linear evolution
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pnorm = |e: &Mat<S>| -> f64 { e.mul_tn(&p.mul_nn(e))[(0, 0)].as_f64().max(0.0).sqrt() };
    let mut max_ratio = 0.0f64;
    for _ in 0..opts.pairs {
        let ia = rng.random_range(0..states.len());
        let ib = rng.random_range(0..states.len());
        let za = model.phi_value(&Mat::col_vec(&states[ia]))?;
        let zb = model.phi_value(&Mat::col_vec(&states[ib]))?;
        let mut e = za.sub(&zb)?;
        let mut d = pnorm(&e);
        for _ in 0..opts.pair_steps {
            e = a.mul_nn(&e);
            let dn = pnorm(&e);
            if d > 0.0 {
                max_ratio = max_ratio.max(dn / d);
            }
            d = dn;
        }
    }
    if !(max_ratio < 1.0) {
        reasons.push(format!("P-weighted pair distance did not decrease (ratio {max_ratio})"));
    }

    cert.p = Some(rows_of(&p));
    cert.lyap_residual = Some(residual);
    cert.p_min_eig = Some(pmin);
    cert.p_max_eig = Some(pmax);
    cert.beta = Some(beta);
    cert.metric_min_eig = Some(metric_min);
    cert.pair_max_ratio = Some(max_ratio);
    cert.pair_ratio_bound = Some((1.0 - beta).max(0.0).sqrt());
    cert.verdict = if reasons.is_empty() { Verdict::Pass } else { Verdict::Fail };
    cert.reasons = reasons;
    Ok(cert)
}

/// `phi_lambda(x) = w^T phi(x)` for a left eigenvector `w` of the operator.
#[derive(Clone, Debug, PartialEq)]
pub struct Eigenfunction<S> {
    pub lambda: Complex<S>,
    pub w: Vec<Complex<S>>,
    /// `max |phi_lambda(x_{t+1}) - lambda phi_lambda(x_t)|` over the data.
    pub residual: S,
}

impl<S: Scalar> Eigenfunction<S> {
    /// Evaluates at a raw-unit state.
    pub fn eval(&self, model: &KoopmanModel<S>, x: &[S]) -> Result<Complex<S>> {
        let z = model.phi_value(&Mat::col_vec(&model.scaler.apply(x)))?;
        Ok(self.eval_lifted(z.as_slice()))
    }

    pub fn eval_lifted(&self, z: &[S]) -> Complex<S> {
        self.w
            .iter()
            .zip(z)
            .fold(Complex::new(S::zero(), S::zero()), |acc, (w, &v)| acc + *w * v)
    }

    pub fn w_norm(&self) -> S {
        self.w.iter().map(|w| w.norm_sqr()).sum::<S>().sqrt()
    }
}

/// Eigenfunctions from the rows of `V^-1`, with residuals over consecutive
/// samples of `data` (discrete time).
pub fn extract_eigenfunctions<S: Scalar>(
    model: &KoopmanModel<S>,
    data: &[Trajectory<S>],
) -> Result<Vec<Eigenfunction<S>>> {
    let a = model.operator()?;
    let ed = eig(&a)?;
    let vinv = match (&ed.vectors_inv, ed.is_usable()) {
        (Some(v), true) => v.clone(),
        _ => {
            return Err(Error::Convergence {
                op: "eigenvector basis (operator is defective or ill-conditioned)",
                iterations: 0,
            })
        }
    };
    let (_, pairs) = scaled_pairs(model, data);
    let (now, next) = if pairs.is_empty() {
        (Mat::zeros(model.big_n(), 0), Mat::zeros(model.big_n(), 0))
    } else {
        (
            model.phi_value(&columns(&pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>()))?,
            model.phi_value(&columns(&pairs.iter().map(|p| p.1.clone()).collect::<Vec<_>>()))?,
        )
    };
    let n = ed.dim();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let w: Vec<Complex<S>> = (0..n).map(|c| vinv[(i, c)]).collect();
        let mut ef = Eigenfunction {
            lambda: ed.values[i],
            w,
            residual: S::zero(),
        };
        for c in 0..now.cols() {
            let r = ef.eval_lifted(&next.col(c)) - ef.lambda * ef.eval_lifted(&now.col(c));
            ef.residual = ef.residual.max(r.norm());
        }
        out.push(ef);
    }
    Ok(out)
}

/// `sum ||x_hat - x||^2 / sum ||x||^2` over all samples.
pub fn nse<S: Scalar>(sim: &[Vec<S>], truth: &[Vec<S>]) -> Result<S> {
    if sim.len() != truth.len() || truth.is_empty() {
        return Err(Error::contract(format!(
            "nse: lengths {} and {} must match and be nonzero",
            sim.len(),
            truth.len()
        )));
    }
    let mut num = S::zero();
    let mut den = S::zero();
    for (s, t) in sim.iter().zip(truth) {
        if s.len() != t.len() {
            return Err(Error::contract("nse: state dimensions differ"));
        }
        for (&a, &b) in s.iter().zip(t) {
            num += (a - b) * (a - b);
            den += b * b;
        }
    }
    if den == S::zero() {
        return Err(Error::contract("nse: truth is identically zero"));
    }
    Ok(num / den)
}

/// Simulates `traj` from its first sample with the model's time handling.
pub fn simulate_like<S: Scalar>(model: &KoopmanModel<S>, traj: &Trajectory<S>) -> Result<Vec<Vec<S>>> {
    let x0 = traj
        .states
        .first()
        .ok_or_else(|| Error::contract("simulate: empty trajectory"))?;
    let times = traj.times_or_index();
    let horizon = match model.time_mode {
        TimeMode::Discrete => Horizon::Steps(traj.len() - 1),
        TimeMode::Continuous => Horizon::Times(&times),
    };
    Ok(simulate(model, x0, horizon)?.states)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nse: f64,
    /// Mean squared round-trip error in scaled units.
    pub rec_error: f64,
    pub rho: f64,
    pub per_trajectory: Vec<TrajectoryEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEval {
    pub id: String,
    pub nse: f64,
}

pub fn evaluate<S: Scalar>(model: &KoopmanModel<S>, data: &[Trajectory<S>]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::contract("evaluate: empty dataset"));
    }
    let mut all_sim = Vec::new();
    let mut all_truth = Vec::new();
    let mut per = Vec::with_capacity(data.len());
    let (mut rec, mut count) = (0.0, 0usize);
    for t in data {
        let sim = simulate_like(model, t)?;
        per.push(TrajectoryEval {
            id: t.source_id.clone(),
            nse: nse(&sim, &t.states)?.as_f64(),
        });
        let scaled = columns(&t.states.iter().map(|x| model.scaler.apply(x)).collect::<Vec<_>>());
        let back = model.phi_left_value(&model.phi_value(&scaled)?)?;
        rec += back.sub(&scaled)?.frobenius_sq().as_f64();
        count += t.len();
        all_sim.extend(sim);
        all_truth.extend(t.states.iter().cloned());
    }
    let a = model.operator()?;
    let ed = eig(&a)?;
    let rho = match model.time_mode {
        TimeMode::Discrete => ed.spectral_radius().as_f64(),
        TimeMode::Continuous => ed.max_real().as_f64().exp(),
    };
    Ok(EvalReport {
        nse: nse(&all_sim, &all_truth)?.as_f64(),
        rec_error: rec / count as f64,
        rho,
        per_trajectory: per,
    })
}

/// Series construction of an exact linear embedding for an invertible map
/// with an exponentially stable fixed point.
///
/// With `H(x) = A x - f(x)` (coordinates centred on the fixed point) and
/// backward iterates `X(x, -j)`, the truncated series
/// `T(x) = sum_{j=0}^{J} A^j H(X(x, -j-1))` satisfies
/// `T(f(x)) = A T(x) + H(x) - A^{J+1} H(X(x, -J-1))`, so
/// `phi(x) = x + T(x)` obeys `phi(f(x)) = A phi(x)` up to that remainder.
pub struct KklConstruction<F, G> {
    f: F,
    f_inv: G,
    pub x_star: Vec<f64>,
    pub a: Mat<f64>,
    a_inv: Mat<f64>,
    pub truncation_j: usize,
    pub t_x: usize,
    /// Box the backward iterates must stay in: `|x_i - x_star_i| <= orbit_bound`.
    pub orbit_bound: f64,
}

impl<F, G> KklConstruction<F, G>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    /// Linearizes `f` at `x_star` by central differences.
    pub fn new(f: F, f_inv: G, x_star: Vec<f64>, orbit_bound: f64, truncation_j: usize, t_x: usize) -> Result<Self> {
        let n = x_star.len();
        let h = 1e-6;
        let mut a = Mat::zeros(n, n);
        for j in 0..n {
            let mut xp = x_star.clone();
            let mut xm = x_star.clone();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            for i in 0..n {
                a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        Self::with_linearization(f, f_inv, x_star, a, orbit_bound, truncation_j, t_x)
    }

    pub fn with_linearization(
        f: F,
        f_inv: G,
        x_star: Vec<f64>,
        a: Mat<f64>,
        orbit_bound: f64,
        truncation_j: usize,
        t_x: usize,
    ) -> Result<Self> {
        let fx = f(&x_star);
        let gap: f64 = fx.iter().zip(&x_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if !(gap < 1e-10) {
            return Err(Error::contract(format!("kkl: x_star is not a fixed point (gap {gap:e})")));
        }
        let rho = spectral_radius(&a)?;
        if !(rho < 1.0) {
            return Err(Error::Infeasible(format!("kkl: linearization has spectral radius {rho}")));
        }
        let a_inv = crate::linalg::Lu::factor_named(&a, "kkl linearization")?.inverse();
        Ok(Self {
            f,
            f_inv,
            x_star,
            a,
            a_inv,
            truncation_j,
            t_x,
            orbit_bound,
        })
    }

    pub fn with_truncation(mut self, j: usize) -> Self {
        self.truncation_j = j;
        self
    }

    pub fn with_t_x(mut self, t_x: usize) -> Self {
        self.t_x = t_x;
        self
    }

    fn centred(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.x_star).map(|(a, b)| a - b).collect()
    }

    /// `H(x) = A (x - x*) - (f(x) - x*)`.
    pub fn h(&self, x: &[f64]) -> Vec<f64> {
        let ax = self.a.matvec(&self.centred(x));
        let fx = self.centred(&(self.f)(x));
        ax.iter().zip(&fx).map(|(a, b)| a - b).collect()
    }

    /// Backward iterates `X(x, -1), ..., X(x, -count)`.
    pub fn backward_orbit(&self, x: &[f64], count: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(count);
        let mut cur = x.to_vec();
        for j in 1..=count {
            cur = (self.f_inv)(&cur);
            if self.centred(&cur).iter().any(|v| !(v.abs() <= self.orbit_bound)) {
                return Err(Error::Domain(format!(
                    "kkl: backward iterate {j} left the box of half-width {} ({cur:?})",
                    self.orbit_bound
                )));
            }
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn forward(&self, x: &[f64], steps: usize) -> Vec<f64> {
        let mut cur = x.to_vec();
        for _ in 0..steps {
            cur = (self.f)(&cur);
        }
        cur
    }

    /// `T(x) = sum_{j=0}^{J} A^j H(X(x, -j-1))`, accumulated Horner-style.
    pub fn t_map(&self, x: &[f64]) -> Result<Vec<f64>> {
        let orbit = self.backward_orbit(x, self.truncation_j + 1)?;
        let mut acc = vec![0.0; x.len()];
        for xj in orbit.iter().rev() {
            let h = self.h(xj);
            acc = self.a.matvec(&acc).iter().zip(&h).map(|(a, b)| a + b).collect();
        }
        Ok(acc)
    }

    /// `phi(x) = A^{-t_x} [X(x, t_x) + T(X(x, t_x))]` in centred coordinates.
    pub fn phi(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xt = self.forward(x, self.t_x);
        let t = self.t_map(&xt)?;
        let mut v: Vec<f64> = self.centred(&xt).iter().zip(&t).map(|(a, b)| a + b).collect();
        for _ in 0..self.t_x {
            v = self.a_inv.matvec(&v);
        }
        Ok(v)
    }

    /// `||phi(f(x)) - A phi(x)||`.
    pub fn d1_residual(&self, x: &[f64]) -> Result<f64> {
        let lhs = self.phi(&(self.f)(x))?;
        let rhs = self.a.matvec(&self.phi(x)?);
        Ok(lhs.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
    }

    /// Max residual over `grid` for each truncation length in `js`.
    pub fn residual_sweep(self, grid: &[Vec<f64>], js: &[usize]) -> Result<(Self, Vec<(usize, f64)>)> {
        let mut kkl = self;
        let mut out = Vec::with_capacity(js.len());
        for &j in js {
            kkl.truncation_j = j;
            let mut worst = 0.0f64;
            for x in grid {
                worst = worst.max(kkl.d1_residual(x)?);
            }
            out.push((j, worst));
        }
        Ok((kkl, out))
    }

    /// Finite-difference Jacobian norm (Frobenius) of `T` at `X(x, t_x)`.
    pub fn t_jacobian_norm(&self, x: &[f64], t_x: usize) -> Result<f64> {
        let base = self.forward(x, t_x);
        let n = base.len();
        let h = 1e-6;
        let mut sq = 0.0;
        for j in 0..n {
            let mut xp = base.clone();
            let mut xm = base.clone();
            xp[j] += h;
            xm[j] -= h;
            let (tp, tm) = (self.t_map(&xp)?, self.t_map(&xm)?);
            for i in 0..n {
                sq += ((tp[i] - tm[i]) / (2.0 * h)).powi(2);
            }
        }
        Ok(sq.sqrt())
    }
}

/// Inverse of a strictly increasing scalar map by bisection on `[lo, hi]`.
pub fn bisect_inverse(f: impl Fn(f64) -> f64, y: f64, lo: f64, hi: f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Worker threads; `0` means one per logical core.
    pub workers: usize,
    /// Width of the box of perturbed initial conditions, raw units.
    pub perturb_width: f64,
    /// Initial conditions per perturbation study; `0` disables it.
    pub perturb_samples: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Skel, Method::Soc, Method::Lkis],
            seeds: vec![0],
            train: TrainConfig::default(),
            workers: 0,
            perturb_width: 2.0,
            perturb_samples: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub method: Method,
    pub seed: u64,
    pub fold: usize,
    pub test_id: String,
    pub nse: f64,
    pub train_loss: f64,
    pub rho: f64,
    pub outlier: bool,
    /// NSE of predicting the equilibrium at every step.
    pub baseline_nse: f64,
    pub aborted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationResult>,
}

/// Spread of rollouts started from a box around the true initial condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub samples: usize,
    pub initial_spread: f64,
    pub max_spread: f64,
    pub final_spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub median_nse: f64,
    pub outliers_gt_1: usize,
    pub unstable_folds: usize,
    pub runs: usize,
    pub median_baseline_nse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub folds: Vec<FoldResult>,
    pub summary: BTreeMap<String, MethodSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Equilibrium estimate: mean of the final samples of the training trajectories.
pub fn equilibrium_estimate<S: Scalar>(train: &[Trajectory<S>]) -> Vec<S> {
    let n = train.first().map_or(0, Trajectory::dim);
    let mut eq = vec![S::zero(); n];
    for t in train {
        if let Some(last) = t.states.last() {
            for (e, &v) in eq.iter_mut().zip(last) {
                *e += v;
            }
        }
    }
    let k = S::from_usize_lossy(train.len().max(1));
    eq.iter().map(|&v| v / k).collect()
}

fn max_pairwise<S: Scalar>(points: &[&Vec<S>]) -> f64 {
    let mut m = 0.0f64;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d: S = points[i].iter().zip(points[j]).map(|(a, b)| (*a - *b).powi(2)).sum();
            m = m.max(d.sqrt().as_f64());
        }
    }
    m
}

fn perturbation_study<S: Scalar>(
    model: &KoopmanModel<S>,
    test: &Trajectory<S>,
    width: f64,
    samples: usize,
    seed: u64,
) -> Result<PerturbationResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = &test.states[0];
    let mut rollouts = Vec::with_capacity(samples);
    for _ in 0..samples {
        let start: Vec<S> = x0
            .iter()
            .map(|&v| v + S::lit(rng.random_range(-0.5 * width..=0.5 * width)))
            .collect();
        let mut shifted = test.clone();
        shifted.states[0] = start;
        rollouts.push(simulate_like(model, &shifted)?);
    }
    let steps = test.len();
    let mut spreads = Vec::with_capacity(steps);
    for t in 0..steps {
        let pts: Vec<&Vec<S>> = rollouts.iter().map(|r| &r[t]).collect();
        spreads.push(max_pairwise(&pts));
    }
    Ok(PerturbationResult {
        samples,
        initial_spread: spreads[0],
        max_spread: spreads.iter().cloned().fold(0.0, f64::max),
        final_spread: *spreads.last().unwrap_or(&0.0),
    })
}

/// Runs one (method, seed, fold) job of a leave-one-out comparison.
pub fn run_fold<S: Scalar>(
    data: &[Trajectory<S>],
    train_ids: &[usize],
    test_id: usize,
    method: Method,
    seed: u64,
    cfg: &CompareConfig,
) -> Result<(FoldResult, KoopmanModel<S>)> {
    let train_raw: Vec<Trajectory<S>> = train_ids.iter().map(|&i| data[i].clone()).collect();
    let test = &data[test_id];
    let scaler = fit_scaler(&train_raw)?;
    let scaled: Vec<Trajectory<S>> = train_raw.iter().map(|t| scaler.apply_traj(t)).collect();
    let tcfg = TrainConfig {
        method,
        seed,
        ..cfg.train.clone()
    };
    let outcome = fit(&scaled, scaler, &tcfg)?;
    let model = outcome.model;
    let sim = simulate_like(&model, test)?;
    let nse_v = nse(&sim, &test.states)?.as_f64();
    let eq = equilibrium_estimate(&train_raw);
    let flat = vec![eq; test.len()];
    let baseline = nse(&flat, &test.states)?.as_f64();
    let ed = eig(&model.operator()?)?;
    let rho = match model.time_mode {
        TimeMode::Discrete => ed.spectral_radius().as_f64(),
        TimeMode::Continuous => ed.max_real().as_f64().exp(),
    };
    let perturbation = if cfg.perturb_samples > 0 {
        Some(perturbation_study(&model, test, cfg.perturb_width, cfg.perturb_samples, seed)?)
    } else {
        None
    };
    Ok((
        FoldResult {
            method,
            seed,
            fold: test_id,
            test_id: test.source_id.clone(),
            nse: nse_v,
            train_loss: outcome.log.best_total().unwrap_or(f64::NAN),
            rho,
            outlier: !(nse_v <= 1.0),
            baseline_nse: baseline,
            aborted: outcome.log.aborted.clone(),
            perturbation,
        },
        model,
    ))
}

/// Leave-one-out comparison of methods over seeds, parallel over jobs.
/// Results are ordered by (method, seed, fold) regardless of scheduling.
pub fn compare<S: Scalar>(data: &[Trajectory<S>], cfg: &CompareConfig) -> Result<ComparisonReport> {
    let plan = loocv(data.len())?;
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    let mut jobs = Vec::new();
    for &m in &methods {
        for &s in &cfg.seeds {
            for fold in &plan.folds {
                jobs.push((m, s, fold.clone()));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::contract(format!("worker pool: {e}")))?;
    let results: Vec<Result<FoldResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|(m, s, fold)| run_fold(data, &fold.train, fold.test[0], *m, *s, cfg).map(|r| r.0))
            .collect()
    });
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut summary = BTreeMap::new();
    for &m in &methods {
        let rows: Vec<&FoldResult> = folds.iter().filter(|r| r.method == m).collect();
        let nses: Vec<f64> = rows.iter().map(|r| r.nse).collect();
        let base: Vec<f64> = rows.iter().map(|r| r.baseline_nse).collect();
        summary.insert(
            m.to_string(),
            MethodSummary {
                median_nse: median(&nses),
                outliers_gt_1: rows.iter().filter(|r| r.outlier).count(),
                unstable_folds: rows.iter().filter(|r| !(r.rho < 1.0)).count(),
                runs: rows.len(),
                median_baseline_nse: median(&base),
            },
        );
    }
    Ok(ComparisonReport { folds, summary })
}

impl ComparisonReport {
    /// Long-form rows for plotting tools.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let wrap = |e: csv::Error| Error::contract(format!("report csv: {e}"));
        w.write_record([
            "method",
            "seed",
            "fold",
            "test_id",
            "nse",
            "train_loss",
            "rho",
            "outlier",
            "baseline_nse",
            "final_spread",
        ])
        .map_err(wrap)?;
        for r in &self.folds {
            w.write_record([
                r.method.to_string(),
                r.seed.to_string(),
                r.fold.to_string(),
                r.test_id.clone(),
                r.nse.to_string(),
                r.train_loss.to_string(),
                r.rho.to_string(),
                r.outlier.to_string(),
                r.baseline_nse.to_string(),
                r.perturbation.as_ref().map_or(String::new(), |p| p.final_spread.to_string()),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io("<report writer>", e))?;
        Ok(())
    }

    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        let jp = json_path.as_ref();
        std::fs::write(jp, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(jp, e))?;
        let cp = csv_path.as_ref();
        let file = std::fs::File::create(cp).map_err(|e| Error::io(cp, e))?;
        self.write_csv(file)
    }
}
