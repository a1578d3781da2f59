//! Losses, the Adam optimizer and the full-batch training loop.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{fit_scaler, Scaler, Trajectory};
use crate::embed::{
    expm, operator_var, phi, phi_left, rollout_z, KoopmanModel, LeftInverseKind, ModelSpec, ModelVars, OperatorParams,
};
use crate::error::{Error, Result};
use crate::linalg::{eig, Mat};
use crate::params::{DEFAULT_EPSILON, DEFAULT_RIDGE};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub use crate::embed::{Method, TimeMode};

pub const DEFAULT_ALPHA: f64 = 1e3;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_EPOCHS: usize = 5000;

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_embedding_dim() -> usize {
    20
}
fn default_hidden() -> Vec<usize> {
    vec![50, 50]
}
fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}
fn default_init_bound() -> f64 {
    0.1
}
fn default_method() -> Method {
    Method::Skel
}
fn default_time_mode() -> TimeMode {
    TimeMode::Discrete
}
fn default_left_inverse() -> LeftInverseKind {
    LeftInverseKind::Network
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the reconstruction loss.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_time_mode")]
    pub time_mode: TimeMode,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_left_inverse")]
    pub left_inverse: LeftInverseKind,
    /// Half-width of the uniform init of the operator parameters.
    #[serde(default = "default_init_bound")]
    pub op_init_bound: f64,
    #[serde(default = "default_init_bound")]
    pub bias_init_bound: f64,
    /// Measure the simulation error after decoding, in state space.
    #[serde(default)]
    pub x_space_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            epsilon: DEFAULT_EPSILON,
            lr: DEFAULT_LR,
            epochs: DEFAULT_EPOCHS,
            embedding_dim: default_embedding_dim(),
            hidden_dims: default_hidden(),
            method: Method::Skel,
            time_mode: TimeMode::Discrete,
            ridge: DEFAULT_RIDGE,
            seed: 0,
            left_inverse: LeftInverseKind::Network,
            op_init_bound: 0.1,
            bias_init_bound: 0.1,
            x_space_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::contract("alpha must be non-negative"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::contract("lr must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::contract("epsilon must be positive"));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::contract("ridge must be non-negative"));
        }
        if self.embedding_dim < n {
            return Err(Error::contract(format!(
                "embedding_dim {} is below the state dimension {n}",
                self.embedding_dim
            )));
        }
        if self.time_mode == TimeMode::Continuous && self.method != Method::Skel {
            return Err(Error::contract("continuous time is supported for method skel only"));
        }
        Ok(())
    }

    pub fn model_spec(&self, n: usize) -> ModelSpec {
        ModelSpec {
            n,
            big_n: self.embedding_dim,
            hidden: self.hidden_dims.clone(),
            method: self.method,
            time_mode: self.time_mode,
            left_inverse: self.left_inverse,
            epsilon: self.epsilon,
            ridge: self.ridge,
            op_init_bound: self.op_init_bound,
            bias_init_bound: self.bias_init_bound,
        }
    }
}

/// Adam moments for every parameter matrix.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub m: Vec<Mat<S>>,
    pub v: Vec<Mat<S>>,
    pub step: usize,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            step: 0,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
        }
    }

    /// One bias-corrected Adam update. Gradients are checked before any
    /// parameter moves, so a non-finite gradient leaves the state untouched.
    pub fn step(&mut self, params: &mut [&mut Mat<S>], grads: &[Mat<S>], names: &[String], lr: S) -> Result<()> {
        check_grads(grads, names, self.step + 1)?;
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract("adam: parameter count changed"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = S::one() - self.beta1.powi(t);
        let c2 = S::one() - self.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].as_slice();
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (i, w) in p.as_mut_slice().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (S::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (S::one() - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn check_grads<S: Scalar>(grads: &[Mat<S>], names: &[String], step: usize) -> Result<()> {
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            param: names.get(k).cloned().unwrap_or_else(|| format!("#{k}")),
            step,
        });
    }
    Ok(())
}

/// Scaled samples of one trajectory ready for the objective.
#[derive(Clone, Debug)]
pub struct Prepared<S> {
    /// `n x (T + 1)`
    pub x: Mat<S>,
    /// Sample times relative to the first sample.
    pub dt: Vec<S>,
}

impl<S: Scalar> Prepared<S> {
    pub fn from_trajectory(t: &Trajectory<S>) -> Result<Self> {
        if t.len() < 2 {
            return Err(Error::contract(format!(
                "trajectory {} needs at least 2 samples for the simulation loss",
                t.source_id
            )));
        }
        let times = t.times_or_index();
        let t0 = times[0];
        Ok(Self {
            x: t.state_matrix(),
            dt: times.iter().map(|&v| v - t0).collect(),
        })
    }

    pub fn steps(&self) -> usize {
        self.x.cols() - 1
    }
}

/// `(1/T) sum_t ||z_data_t - z_roll_t||^2`, both `N x (T + 1)`.
pub fn loss_sim<S: Scalar>(tape: &mut Tape<S>, z_data: Var, z_roll: Var) -> Result<Var> {
    let steps = z_data.cols().checked_sub(1).filter(|&t| t > 0).ok_or_else(|| {
        Error::contract("loss_sim: trajectory must contain at least two samples")
    })?;
    let d = tape.sub(z_data, z_roll)?;
    let sq = tape.frobenius_sq(d);
    Ok(tape.scale(sq, S::one() / S::from_usize_lossy(steps)))
}

/// Mean squared round-trip error over all samples.
pub fn loss_rec<S: Scalar>(tape: &mut Tape<S>, x: Var, x_rec: Var) -> Result<Var> {
    let d = tape.sub(x, x_rec)?;
    let sq = tape.frobenius_sq(d);
    Ok(tape.scale(sq, S::one() / S::from_usize_lossy(x.cols())))
}

/// Tape handles and values of one objective evaluation.
#[derive(Clone, Debug)]
pub struct Objective<S> {
    pub total: Var,
    pub operator: Var,
    /// Mean over trajectories.
    pub j_se: S,
    pub j_rec: S,
}

/// Linear rollout of `z0` over the sample times of `p`.
fn rollout_for<S: Scalar>(
    tape: &mut Tape<S>,
    time_mode: TimeMode,
    a: Var,
    z0: Var,
    p: &Prepared<S>,
    expm_memo: &mut HashMap<u64, Var>,
) -> Result<Var> {
    let cols = match time_mode {
        TimeMode::Discrete => rollout_z(tape, a, z0, p.steps())?,
        TimeMode::Continuous => {
            let mut cols = Vec::with_capacity(p.dt.len());
            for &t in &p.dt {
                if t == S::zero() {
                    cols.push(z0);
                    continue;
                }
                let key = t.as_f64().to_bits();
                let e = match expm_memo.get(&key) {
                    Some(&e) => e,
                    None => {
                        let e = expm(tape, a, t)?;
                        expm_memo.insert(key, e);
                        e
                    }
                };
                cols.push(tape.matmul(e, z0)?);
            }
            cols
        }
    };
    tape.hstack(&cols)
}

/// Mean over trajectories of `J_se + alpha J_rec`, recorded on `tape`.
pub fn objective<S: Scalar>(
    tape: &mut Tape<S>,
    model: &KoopmanModel<S>,
    vars: &ModelVars,
    data: &[Prepared<S>],
    cfg: &TrainConfig,
) -> Result<Objective<S>> {
    if data.is_empty() {
        return Err(Error::contract("objective: empty dataset"));
    }
    let n = model.n();
    let total_cols: usize = data.iter().map(|p| p.x.cols()).sum();
    let mut all_x = Mat::zeros(n, total_cols);
    let mut offsets = Vec::with_capacity(data.len());
    let mut c0 = 0;
    for p in data {
        if p.x.rows() != n {
            return Err(Error::Dimension {
                op: "objective data",
                lhs: (n, 1),
                rhs: p.x.shape(),
            });
        }
        for c in 0..p.x.cols() {
            for r in 0..n {
                all_x[(r, c0 + c)] = p.x[(r, c)];
            }
        }
        offsets.push(c0);
        c0 += p.x.cols();
    }
    let x_all = tape.constant(all_x);
    let z_all = phi(tape, model, vars, x_all)?;
    let x_rec_all = phi_left(tape, model, vars, z_all)?;
    let big_n = model.big_n();

    let snapshots = if matches!(model.op, OperatorParams::Lkis { .. }) {
        let mut now = Vec::with_capacity(data.len());
        let mut next = Vec::with_capacity(data.len());
        for (p, &off) in data.iter().zip(&offsets) {
            let t = p.steps();
            now.push(tape.block(z_all, 0, off, big_n, t)?);
            next.push(tape.block(z_all, 0, off + 1, big_n, t)?);
        }
        let y2 = tape.hstack(&now)?;
        let y1 = tape.hstack(&next)?;
        Some((y1, y2))
    } else {
        None
    };
    let a = operator_var(tape, model, vars, snapshots)?;

    let mut memo = HashMap::new();
    let mut terms = Vec::with_capacity(data.len());
    let (mut j_se_sum, mut j_rec_sum) = (S::zero(), S::zero());
    for (p, &off) in data.iter().zip(&offsets) {
        let cols = p.x.cols();
        let z_data = tape.block(z_all, 0, off, big_n, cols)?;
        let x_data = tape.block(x_all, 0, off, n, cols)?;
        let x_rec = tape.block(x_rec_all, 0, off, n, cols)?;
        let z0 = tape.col(z_data, 0)?;
        let z_roll = rollout_for(tape, model.time_mode, a, z0, p, &mut memo)?;
        let j_se = if cfg.x_space_loss {
            let x_roll = phi_left(tape, model, vars, z_roll)?;
            loss_sim(tape, x_data, x_roll)?
        } else {
            loss_sim(tape, z_data, z_roll)?
        };
        let j_rec = loss_rec(tape, x_data, x_rec)?;
        j_se_sum += tape.scalar(j_se);
        j_rec_sum += tape.scalar(j_rec);
        let weighted = tape.scale(j_rec, S::lit(cfg.alpha));
        terms.push(tape.add(j_se, weighted)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let k = S::from_usize_lossy(data.len());
    let total = tape.scale(total, S::one() / k);
    Ok(Objective {
        total,
        operator: a,
        j_se: j_se_sum / k,
        j_rec: j_rec_sum / k,
    })
}

/// Value of the objective at the model's current parameters.
pub fn evaluate_objective<S: Scalar>(
    model: &KoopmanModel<S>,
    data: &[Prepared<S>],
    cfg: &TrainConfig,
) -> Result<(S, S, S)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let obj = objective(&mut tape, model, &vars, data, cfg)?;
    Ok((tape.scalar(obj.total), obj.j_se, obj.j_rec))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "J_se")]
    pub j_se: f64,
    #[serde(rename = "J_rec")]
    pub j_rec: f64,
    pub total: f64,
    /// `rho(A)` in discrete time; `rho(exp(A))` in continuous time.
    pub spectral_radius: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Why training stopped before the epoch budget, if it did.
    pub aborted: Option<String>,
}

impl TrainingLog {
    /// Records with the wall-clock column zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Vec<EpochRecord> {
        self.records
            .iter()
            .map(|r| EpochRecord { wall_ms: 0.0, ..r.clone() })
            .collect()
    }

    pub fn best_total(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.records[e].total)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::contract(format!("log csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::io("<log writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome<S> {
    /// Parameters with the lowest training objective seen.
    pub model: KoopmanModel<S>,
    pub log: TrainingLog,
}

fn stability_measure<S: Scalar>(a: &Mat<S>, time_mode: TimeMode) -> f64 {
    match eig(a) {
        Ok(ed) => match time_mode {
            TimeMode::Discrete => ed.spectral_radius().as_f64(),
            TimeMode::Continuous => ed.max_real().as_f64().exp(),
        },
        Err(_) => f64::NAN,
    }
}

/// Full-batch training on scaled trajectories; `scaler` is stored in the model.
pub fn fit<S: Scalar>(train: &[Trajectory<S>], scaler: Scaler<S>, cfg: &TrainConfig) -> Result<FitOutcome<S>> {
    let first = train.first().ok_or_else(|| Error::contract("fit: empty training set"))?;
    let n = first.dim();
    cfg.validate(n)?;
    if cfg.time_mode == TimeMode::Continuous && train.iter().any(|t| t.times.is_none()) {
        return Err(Error::contract("continuous-time training needs sample times"));
    }
    let data = train.iter().map(Prepared::from_trajectory).collect::<Result<Vec<_>>>()?;
    let mut model = KoopmanModel::init(&cfg.model_spec(n), scaler, cfg.seed)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(k, _)| k).collect();
    let shapes: Vec<(usize, usize)> = model.named_params().iter().map(|(_, m)| m.shape()).collect();
    let mut adam = AdamState::<S>::new(&shapes);
    let lr = S::lit(cfg.lr);
    let mut log = TrainingLog::default();
    let mut best: Option<(S, KoopmanModel<S>)> = None;
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let obj = match objective(&mut tape, &model, &vars, &data, cfg) {
            Ok(o) => o,
            Err(e @ (Error::Singular { .. } | Error::Convergence { .. })) => {
                log.aborted = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let total = tape.scalar(obj.total);
        let a_value = tape.value(obj.operator).clone();
        log.records.push(EpochRecord {
            epoch,
            j_se: obj.j_se.as_f64(),
            j_rec: obj.j_rec.as_f64(),
            total: total.as_f64(),
            spectral_radius: stability_measure(&a_value, cfg.time_mode),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if !total.is_finite() {
            log.aborted = Some(format!("epoch {epoch}: non-finite loss"));
            break;
        }
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            let mut snapshot = model.clone();
            if let OperatorParams::Lkis { a, .. } = &mut snapshot.op {
                *a = a_value;
            }
            best = Some((total, snapshot));
            log.best_epoch = Some(epoch);
        }
        tape.backward(obj.total)?;
        let grads: Vec<Mat<S>> = vars.all().iter().map(|&v| tape.grad(v)).collect();
        let step = match model.method() {
            Method::Soc => check_grads(&grads, &names, epoch + 1).and_then(|_| {
                for (p, g) in model.params_mut().into_iter().zip(&grads) {
                    p.axpy(-lr, g);
                }
                match &mut model.op {
                    OperatorParams::Soc(p) => p.project(),
                    _ => Ok(()),
                }
            }),
            _ => adam.step(&mut model.params_mut(), &grads, &names, lr),
        };
        if let Err(e) = step {
            match e {
                Error::NonFinite { .. } | Error::Convergence { .. } => {
                    log.aborted = Some(format!("epoch {epoch}: {e}"));
                    break;
                }
                other => return Err(other),
            }
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok(FitOutcome { model, log })
}

/// Fits the scaler on `train_raw`, scales, and trains.
pub fn fit_raw<S: Scalar>(train_raw: &[Trajectory<S>], cfg: &TrainConfig) -> Result<FitOutcome<S>> {
    let scaler = fit_scaler(train_raw)?;
    let scaled: Vec<Trajectory<S>> = train_raw.iter().map(|t| scaler.apply_traj(t)).collect();
    fit(&scaled, scaler, cfg)
}
