//! Trajectory ingestion, preprocessing, synthetic generators and splits.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

/// Ordered state samples of one run of a system.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S> {
    pub source_id: String,
    pub states: Vec<Vec<S>>,
    /// Strictly increasing sample times, when known.
    pub times: Option<Vec<S>>,
    /// Set once velocities have been appended by [`augment_velocity`].
    pub velocity_augmented: bool,
}

impl<S: Scalar> Trajectory<S> {
    pub fn new(source_id: impl Into<String>, states: Vec<Vec<S>>, times: Option<Vec<S>>) -> Result<Self> {
        let source_id = source_id.into();
        let dim = states.first().map_or(0, Vec::len);
        if states.iter().any(|s| s.len() != dim) {
            return Err(Error::contract(format!("trajectory {source_id}: states of unequal dimension")));
        }
        if let Some(t) = &times {
            if t.len() != states.len() {
                return Err(Error::contract(format!(
                    "trajectory {source_id}: {} times for {} states",
                    t.len(),
                    states.len()
                )));
            }
            if t.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::contract(format!("trajectory {source_id}: times not strictly increasing")));
            }
        }
        Ok(Self {
            source_id,
            states,
            times,
            velocity_augmented: false,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// States as columns of an `n x len` matrix.
    pub fn state_matrix(&self) -> Mat<S> {
        Mat::from_fn(self.dim(), self.len(), |r, c| self.states[c][r])
    }

    /// Sample times, or `0, 1, 2, ...` when absent.
    pub fn times_or_index(&self) -> Vec<S> {
        match &self.times {
            Some(t) => t.clone(),
            None => (0..self.len()).map(S::from_usize_lossy).collect(),
        }
    }

    pub fn map_states(&self, f: impl Fn(&[S]) -> Vec<S>) -> Self {
        Self {
            source_id: self.source_id.clone(),
            states: self.states.iter().map(|s| f(s)).collect(),
            times: self.times.clone(),
            velocity_augmented: self.velocity_augmented,
        }
    }
}

/// Compares identifiers so that embedded integers order numerically (`t2 < t10`).
fn natural_cmp(a: &str, b: &str) -> Ordering {
    fn chunks(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (ca, cb) = (chunks(a), chunks(b));
    for (x, y) in ca.iter().zip(&cb) {
        let ord = match (x, y) {
            ((true, xs), (true, ys)) => {
                let (xt, yt) = (xs.trim_start_matches('0'), ys.trim_start_matches('0'));
                xt.len().cmp(&yt.len()).then_with(|| xt.cmp(yt))
            }
            ((_, xs), (_, ys)) => xs.cmp(ys),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    ca.len().cmp(&cb.len()).then_with(|| a.cmp(b))
}

fn parse_cell<S: Scalar>(cell: &str, line: u64, column: &str) -> Result<S> {
    let v = f64::from_str(cell.trim()).map_err(|_| Error::Parse {
        line,
        msg: format!("column `{column}`: `{cell}` is not a number"),
    })?;
    Ok(S::lit(v))
}

/// Reads trajectories in the `traj_id,t,x0,...,x{n-1}` schema.
///
/// Rows are grouped by `traj_id` and ordered by `t`; trajectories are returned
/// in natural order of their ids.
pub fn read_csv<S: Scalar, R: Read>(reader: R) -> Result<Vec<Trajectory<S>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if headers.len() < 3 || headers.get(0).map(str::trim) != Some("traj_id") || headers.get(1).map(str::trim) != Some("t") {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be `traj_id,t,x0,...`".into(),
        });
    }
    let width = headers.len();
    let mut groups: BTreeMap<String, Vec<(S, Vec<S>, u64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                msg: format!("expected {width} cells, found {}", rec.len()),
            });
        }
        let id = rec[0].trim().to_string();
        let t = parse_cell::<S>(&rec[1], line, "t")?;
        let x = (2..width)
            .map(|c| parse_cell::<S>(&rec[c], line, &headers[c]))
            .collect::<Result<Vec<S>>>()?;
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                msg: "non-finite value".into(),
            });
        }
        groups.entry(id).or_default().push((t, x, line));
    }
    let mut ids: Vec<String> = groups.keys().cloned().collect();
    ids.sort_by(|a, b| natural_cmp(a, b));
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let mut rows = groups.remove(&id).expect("grouped id");
        rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
        if let Some(w) = rows.windows(2).find(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Parse {
                line: w[1].2.max(w[0].2),
                msg: format!("trajectory `{id}`: repeated time {}", w[1].0),
            });
        }
        let times = rows.iter().map(|r| r.0).collect();
        let states = rows.into_iter().map(|r| r.1).collect();
        out.push(Trajectory::new(id, states, Some(times))?);
    }
    Ok(out)
}

pub fn load_csv<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Trajectory<S>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file))
}

/// Writes trajectories in the [`read_csv`] schema with round-trippable floats.
pub fn write_csv<S: Scalar, W: Write>(writer: W, trajs: &[Trajectory<S>]) -> Result<()> {
    let dim = trajs.first().map_or(0, Trajectory::dim);
    if trajs.iter().any(|t| t.dim() != dim) {
        return Err(Error::contract("write_csv: trajectories of unequal dimension"));
    }
    let mut w = std::io::BufWriter::new(writer);
    let wrap = |e: std::io::Error| Error::io("<csv writer>", e);
    let mut header = String::from("traj_id,t");
    for i in 0..dim {
        header.push_str(&format!(",x{i}"));
    }
    writeln!(w, "{header}").map_err(wrap)?;
    for traj in trajs {
        let times = traj.times_or_index();
        for (t, x) in times.iter().zip(&traj.states) {
            let mut line = format!("{},{}", traj.source_id, t);
            for v in x {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}").map_err(wrap)?;
        }
    }
    w.flush().map_err(wrap)?;
    Ok(())
}

pub fn save_csv<S: Scalar>(path: impl AsRef<Path>, trajs: &[Trajectory<S>]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(file, trajs).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Natural cubic spline through `(t_i, y_i)`.
#[derive(Clone, Debug)]
pub struct CubicSpline<S> {
    t: Vec<S>,
    y: Vec<S>,
    /// second derivatives at the knots
    m: Vec<S>,
}

impl<S: Scalar> CubicSpline<S> {
    pub fn natural(t: &[S], y: &[S]) -> Result<Self> {
        let n = t.len();
        if n != y.len() || n < 2 {
            return Err(Error::contract("spline needs at least two matching knots"));
        }
        let mut m = vec![S::zero(); n];
        if n > 2 {
            // tridiagonal system for interior second derivatives (Thomas algorithm)
            let h: Vec<S> = t.windows(2).map(|w| w[1] - w[0]).collect();
            let k = n - 2;
            let mut diag = vec![S::zero(); k];
            let mut upper = vec![S::zero(); k];
            let mut rhs = vec![S::zero(); k];
            let six = S::lit(6.0);
            for i in 0..k {
                diag[i] = S::lit(2.0) * (h[i] + h[i + 1]);
                upper[i] = h[i + 1];
                rhs[i] = six * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
            }
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] = rhs[i] - w * rhs[i - 1];
            }
            let mut sol = vec![S::zero(); k];
            sol[k - 1] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                sol[i] = (rhs[i] - upper[i] * sol[i + 1]) / diag[i];
            }
            m[1..n - 1].copy_from_slice(&sol);
        }
        Ok(Self {
            t: t.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    pub fn eval(&self, x: S) -> S {
        let n = self.t.len();
        let i = match self.t.binary_search_by(|v| v.partial_cmp(&x).unwrap_or(Ordering::Less)) {
            Ok(i) => return self.y[i],
            Err(i) => i.clamp(1, n - 1) - 1,
        };
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - x) / h;
        let b = (x - self.t[i]) / h;
        let six = S::lit(6.0);
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / six
    }
}

/// Resamples on the uniform grid `t0, t0 + dt, ...` (up to the last sample)
/// with a natural cubic spline per dimension.
pub fn resample_uniform<S: Scalar>(traj: &Trajectory<S>, dt: S) -> Result<Trajectory<S>> {
    let times = traj
        .times
        .as_ref()
        .ok_or_else(|| Error::contract("resample_uniform: trajectory has no times"))?;
    if traj.len() < 4 {
        return Err(Error::contract(format!(
            "resample_uniform: need at least 4 samples, got {}",
            traj.len()
        )));
    }
    if !(dt > S::zero()) {
        return Err(Error::contract("resample_uniform: dt must be positive"));
    }
    let splines = (0..traj.dim())
        .map(|d| {
            let y: Vec<S> = traj.states.iter().map(|s| s[d]).collect();
            CubicSpline::natural(times, &y)
        })
        .collect::<Result<Vec<_>>>()?;
    let t0 = times[0];
    let t_end = *times.last().expect("nonempty");
    let span = (t_end - t0) / dt;
    // tolerate grid points that miss the end by rounding
    let count = (span + S::lit(1e-9)).floor().to_usize().unwrap_or(0) + 1;
    let new_times: Vec<S> = (0..count).map(|k| t0 + S::from_usize_lossy(k) * dt).collect();
    let states = new_times
        .iter()
        .map(|&t| splines.iter().map(|s| s.eval(t.min(t_end))).collect())
        .collect();
    let mut out = Trajectory::new(traj.source_id.clone(), states, Some(new_times))?;
    out.velocity_augmented = traj.velocity_augmented;
    Ok(out)
}

/// Appends finite-difference velocities: central in the interior, one-sided
/// at the ends. Requires uniformly spaced times.
pub fn augment_velocity<S: Scalar>(traj: &Trajectory<S>) -> Result<Trajectory<S>> {
    if traj.velocity_augmented {
        return Err(Error::contract("augment_velocity: trajectory already carries velocities"));
    }
    if traj.len() < 2 {
        return Err(Error::contract("augment_velocity: need at least 2 samples"));
    }
    let times = traj
        .times
        .as_ref()
        .ok_or_else(|| Error::contract("augment_velocity: uniform times required"))?;
    let dt = times[1] - times[0];
    let tol = S::lit(1e-6) * dt.abs().max(S::one());
    if times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > tol) {
        return Err(Error::contract("augment_velocity: times are not uniform"));
    }
    let n = traj.len();
    let two_dt = S::lit(2.0) * dt;
    let states = (0..n)
        .map(|k| {
            let x = &traj.states[k];
            let v: Vec<S> = (0..x.len())
                .map(|d| {
                    if k == 0 {
                        (traj.states[1][d] - x[d]) / dt
                    } else if k == n - 1 {
                        (x[d] - traj.states[k - 1][d]) / dt
                    } else {
                        (traj.states[k + 1][d] - traj.states[k - 1][d]) / two_dt
                    }
                })
                .collect();
            let mut full = x.clone();
            full.extend(v);
            full
        })
        .collect();
    let mut out = Trajectory::new(traj.source_id.clone(), states, traj.times.clone())?;
    out.velocity_augmented = true;
    Ok(out)
}

/// Per-dimension affine map of the training range `[min, max]` onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct Scaler<S> {
    pub min: Vec<S>,
    pub max: Vec<S>,
}

impl<S: Scalar> Scaler<S> {
    pub fn new(min: Vec<S>, max: Vec<S>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::contract("scaler: min/max length mismatch"));
        }
        if let Some(d) = (0..min.len()).find(|&d| !(max[d] > min[d])) {
            return Err(Error::contract(format!("scaler: dimension {d} is constant")));
        }
        Ok(Self { min, max })
    }

    /// Identity map on `n` dimensions.
    pub fn identity(n: usize) -> Self {
        Self {
            min: vec![-S::one(); n],
            max: vec![S::one(); n],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn apply(&self, x: &[S]) -> Vec<S> {
        let two = S::lit(2.0);
        x.iter()
            .enumerate()
            .map(|(d, &v)| two * (v - self.min[d]) / (self.max[d] - self.min[d]) - S::one())
            .collect()
    }

    pub fn invert(&self, y: &[S]) -> Vec<S> {
        let half = S::lit(0.5);
        y.iter()
            .enumerate()
            .map(|(d, &v)| (v + S::one()) * half * (self.max[d] - self.min[d]) + self.min[d])
            .collect()
    }

    pub fn apply_traj(&self, t: &Trajectory<S>) -> Trajectory<S> {
        t.map_states(|x| self.apply(x))
    }

    pub fn invert_traj(&self, t: &Trajectory<S>) -> Trajectory<S> {
        t.map_states(|x| self.invert(x))
    }
}

pub fn fit_scaler<S: Scalar>(train: &[Trajectory<S>]) -> Result<Scaler<S>> {
    let first = train
        .iter()
        .find(|t| !t.is_empty())
        .ok_or_else(|| Error::contract("fit_scaler: empty training set"))?;
    let n = first.dim();
    let mut min = vec![S::infinity(); n];
    let mut max = vec![S::neg_infinity(); n];
    for t in train {
        if !t.is_empty() && t.dim() != n {
            return Err(Error::contract("fit_scaler: trajectories of unequal dimension"));
        }
        for s in &t.states {
            for d in 0..n {
                min[d] = min[d].min(s[d]);
                max[d] = max[d].max(s[d]);
            }
        }
    }
    Scaler::new(min, max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// `x+ = A0 x` with upper-triangular `A0`, spectral radius 0.95.
    LinearSink,
    /// Planar rotation contracted by 0.98 per step, stored as `[p, v]`.
    SpiralSink,
    /// `x+ = 0.5 x + 0.25 tanh(x)` elementwise in two dimensions.
    TanhContraction,
}

impl FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_sink" => Ok(Self::LinearSink),
            "spiral_sink" => Ok(Self::SpiralSink),
            "tanh_contraction" => Ok(Self::TanhContraction),
            other => Err(Error::contract(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LinearSink => "linear_sink",
            Self::SpiralSink => "spiral_sink",
            Self::TanhContraction => "tanh_contraction",
        })
    }
}

pub const LINEAR_SINK_MATRIX: [[f64; 2]; 2] = [[0.95, 0.1], [0.0, 0.9]];
pub const SPIRAL_CONTRACTION: f64 = 0.98;
pub const SPIRAL_ANGLE: f64 = 0.2;

/// Repeated demonstrations of one motion: starts jittered around a common point.
pub const TANH_START_CENTER: [f64; 2] = [1.6, -1.2];
pub const TANH_START_JITTER: f64 = 0.3;

/// One step of the noiseless tanh contraction.
pub fn tanh_contraction_step(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| 0.5 * v + 0.25 * v.tanh()).collect()
}

/// Generates `n_traj` trajectories of `steps` samples each. Noise is added to
/// the recorded observations only, never to the propagated state.
pub fn gen_synthetic<S: Scalar>(
    kind: SyntheticKind,
    n_traj: usize,
    steps: usize,
    dt: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<Trajectory<S>>> {
    if n_traj == 0 || steps == 0 || !(dt > 0.0) || !(noise_std >= 0.0) {
        return Err(Error::contract("gen_synthetic: counts and dt must be positive, noise non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::contract(e.to_string()))?;
    let (c, s) = (SPIRAL_ANGLE.cos(), SPIRAL_ANGLE.sin());
    let rot = |p: &[f64]| {
        vec![
            SPIRAL_CONTRACTION * (c * p[0] - s * p[1]),
            SPIRAL_CONTRACTION * (s * p[0] + c * p[1]),
        ]
    };
    let mut out = Vec::with_capacity(n_traj);
    for j in 0..n_traj {
        let mut state: Vec<f64> = match kind {
            SyntheticKind::LinearSink => (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            SyntheticKind::SpiralSink => {
                let r = rng.random_range(0.5..1.5);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                vec![r * phi.cos(), r * phi.sin()]
            }
            SyntheticKind::TanhContraction => TANH_START_CENTER
                .iter()
                .map(|&c| c + rng.random_range(-TANH_START_JITTER..=TANH_START_JITTER))
                .collect(),
        };
        let mut states = Vec::with_capacity(steps);
        for _ in 0..steps {
            let observed: Vec<f64> = match kind {
                SyntheticKind::SpiralSink => {
                    let next = rot(&state);
                    vec![state[0], state[1], (next[0] - state[0]) / dt, (next[1] - state[1]) / dt]
                }
                _ => state.clone(),
            };
            states.push(
                observed
                    .iter()
                    .map(|&v| S::lit(if noise_std > 0.0 { v + noise.sample(&mut rng) } else { v }))
                    .collect(),
            );
            state = match kind {
                SyntheticKind::LinearSink => {
                    let a = LINEAR_SINK_MATRIX;
                    vec![
                        a[0][0] * state[0] + a[0][1] * state[1],
                        a[1][0] * state[0] + a[1][1] * state[1],
                    ]
                }
                SyntheticKind::SpiralSink => rot(&state),
                SyntheticKind::TanhContraction => tanh_contraction_step(&state),
            };
        }
        let times = (0..steps).map(|k| S::lit(k as f64 * dt)).collect();
        out.push(Trajectory::new(format!("{kind}_{j}"), states, Some(times))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
}

/// Leave-one-out folds over `n_traj` trajectories.
pub fn loocv(n_traj: usize) -> Result<SplitPlan> {
    if n_traj < 2 {
        return Err(Error::contract("loocv: need at least 2 trajectories"));
    }
    let folds = (0..n_traj)
        .map(|k| Fold {
            train: (0..n_traj).filter(|&i| i != k).collect(),
            test: vec![k],
        })
        .collect();
    Ok(SplitPlan { folds })
}
