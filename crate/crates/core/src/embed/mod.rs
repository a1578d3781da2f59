//! Observables, decoder and the assembled Koopman model.
//!
//! The model predicts `x(t) = phi_L(A^t phi(x0))` in discrete time and
//! `x(t) = phi_L(exp(A t) phi(x0))` in continuous time, with the lift
//! `phi(x) = C x + net(x)` and `C = [I; 0]`.

mod serial;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::linalg::{eig, CMat, EigenDecomposition, Mat};
use crate::params::{
    build_lkis, build_soc, build_stable_ct, build_stable_dt, SocParams, StableCtParams, StableDtParams,
};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub use serial::{model_from_json, model_to_json, ModelDocument};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    Discrete,
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Unconstrained stable parameterization.
    Skel,
    /// `S^-1 O C S` with projected gradient descent.
    Soc,
    /// Least-squares operator from the current embeddings.
    Lkis,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Skel => "skel",
            Method::Soc => "soc",
            Method::Lkis => "lkis",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skel" => Ok(Method::Skel),
            "soc" => Ok(Method::Soc),
            "lkis" => Ok(Method::Lkis),
            other => Err(Error::contract(format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for TimeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeMode::Discrete => "discrete",
            TimeMode::Continuous => "continuous",
        })
    }
}

impl FromStr for TimeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(TimeMode::Discrete),
            "continuous" => Ok(TimeMode::Continuous),
            other => Err(Error::contract(format!("unknown time mode `{other}`"))),
        }
    }
}

/// One affine layer `W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<S> {
    /// `d_out x d_in`
    pub w: Mat<S>,
    /// `d_out x 1`
    pub b: Mat<S>,
}

/// Fully connected network, ReLU on hidden layers, identity on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<S> {
    pub layers: Vec<Dense<S>>,
}

impl<S: Scalar> Mlp<S> {
    /// Weights uniform in `+-1/sqrt(fan_in)`, biases uniform in
    /// `+-bias_bound`. With `zero_last` the output layer starts at zero.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], bias_bound: f64, zero_last: bool, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::contract(format!("mlp: invalid layer dims {dims:?}")));
        }
        let count = dims.len() - 1;
        let mut layers = Vec::with_capacity(count);
        for (k, pair) in dims.windows(2).enumerate() {
            let (d_in, d_out) = (pair[0], pair[1]);
            if zero_last && k + 1 == count {
                layers.push(Dense {
                    w: Mat::zeros(d_out, d_in),
                    b: Mat::zeros(d_out, 1),
                });
                continue;
            }
            let bound = 1.0 / (d_in as f64).sqrt();
            let w = Mat::from_fn(d_out, d_in, |_, _| S::lit(rng.random_range(-bound..=bound)));
            let b = Mat::from_fn(d_out, 1, |_, _| {
                S::lit(if bias_bound > 0.0 {
                    rng.random_range(-bias_bound..=bias_bound)
                } else {
                    0.0
                })
            });
            layers.push(Dense { w, b });
        }
        Ok(Self { layers })
    }

    /// Network with every weight and bias zero.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::contract(format!("mlp: invalid layer dims {dims:?}")));
        }
        Ok(Self {
            layers: dims
                .windows(2)
                .map(|p| Dense {
                    w: Mat::zeros(p[1], p[0]),
                    b: Mat::zeros(p[1], 1),
                })
                .collect(),
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.w.rows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty mlp").w.rows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Value-only forward pass on a batch of column inputs.
    pub fn eval(&self, x: &Mat<S>) -> Result<Mat<S>> {
        if x.rows() != self.input_dim() {
            return Err(Error::Dimension {
                op: "mlp input",
                lhs: (self.input_dim(), 1),
                rhs: x.shape(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = layer.w.mul_nn(&h);
            for r in 0..out.rows() {
                let b = layer.b[(r, 0)];
                for c in 0..out.cols() {
                    let v = out[(r, c)] + b;
                    out[(r, c)] = if k < last && !(v > S::zero()) { S::zero() } else { v };
                }
            }
            h = out;
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> MlpVars {
        let leaf = |tape: &mut Tape<S>, m: &Mat<S>| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (leaf(tape, &l.w), leaf(tape, &l.b)))
                .collect(),
        }
    }
}

/// Tape handles of an [`Mlp`]'s weights and biases.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let ones = tape.constant(Mat::filled(1, x.cols(), S::one()));
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let wx = tape.matmul(w, h)?;
            let bias = tape.matmul(b, ones)?;
            h = tape.add(wx, bias)?;
            if k < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// The lift `phi(x) = C x + net(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observables<S> {
    pub n: usize,
    pub big_n: usize,
    pub net: Mlp<S>,
}

impl<S: Scalar> Observables<S> {
    pub fn new(net: Mlp<S>) -> Result<Self> {
        let (n, big_n) = (net.input_dim(), net.output_dim());
        if big_n < n {
            return Err(Error::contract(format!(
                "observables: embedding dimension {big_n} below state dimension {n}"
            )));
        }
        Ok(Self { n, big_n, net })
    }

    /// `C = [I_n; 0]`.
    pub fn lift_matrix(&self) -> Mat<S> {
        Mat::from_fn(self.big_n, self.n, |r, c| if r == c { S::one() } else { S::zero() })
    }

    /// Value-only lift of a batch of columns.
    pub fn eval(&self, x: &Mat<S>) -> Result<Mat<S>> {
        let mut z = self.net.eval(x)?;
        for c in 0..x.cols() {
            for r in 0..self.n {
                z[(r, c)] += x[(r, c)];
            }
        }
        Ok(z)
    }
}

/// Decoder from the embedding back to the state.
#[derive(Clone, Debug, PartialEq)]
pub enum LeftInverse<S> {
    Network(Mlp<S>),
    /// `C^T z`, exact whenever the lift stacks `x` verbatim.
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeftInverseKind {
    Network,
    Projection,
}

/// Operator parameters of a model.
#[derive(Clone, Debug, PartialEq)]
pub enum OperatorParams<S> {
    StableDt(StableDtParams<S>),
    StableCt(StableCtParams<S>),
    Soc(SocParams<S>),
    /// The operator is refit from snapshots; `a` holds the most recent fit.
    Lkis { ridge: S, a: Mat<S> },
}

impl<S: Scalar> OperatorParams<S> {
    pub fn method(&self) -> Method {
        match self {
            Self::StableDt(_) | Self::StableCt(_) => Method::Skel,
            Self::Soc(_) => Method::Soc,
            Self::Lkis { .. } => Method::Lkis,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::StableDt(p) => p.dim(),
            Self::StableCt(p) => p.dim(),
            Self::Soc(p) => p.dim(),
            Self::Lkis { a, .. } => a.rows(),
        }
    }

    pub fn matrix(&self) -> Result<Mat<S>> {
        match self {
            Self::StableDt(p) => p.operator(),
            Self::StableCt(p) => p.operator(),
            Self::Soc(p) => p.operator(),
            Self::Lkis { a, .. } => Ok(a.clone()),
        }
    }

    fn named(&self) -> Vec<(&'static str, &Mat<S>)> {
        match self {
            Self::StableDt(p) => vec![("L", &p.l), ("R", &p.r)],
            Self::StableCt(p) => vec![("Wn", &p.wn), ("Wq", &p.wq), ("Wr", &p.wr)],
            Self::Soc(p) => vec![("S", &p.s), ("O", &p.o), ("C", &p.c)],
            Self::Lkis { .. } => vec![],
        }
    }

    fn named_mut(&mut self) -> Vec<&mut Mat<S>> {
        match self {
            Self::StableDt(p) => vec![&mut p.l, &mut p.r],
            Self::StableCt(p) => vec![&mut p.wn, &mut p.wq, &mut p.wr],
            Self::Soc(p) => vec![&mut p.s, &mut p.o, &mut p.c],
            Self::Lkis { .. } => vec![],
        }
    }
}

/// Architecture and initialization settings for [`KoopmanModel::init`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n: usize,
    pub big_n: usize,
    pub hidden: Vec<usize>,
    pub method: Method,
    pub time_mode: TimeMode,
    pub left_inverse: LeftInverseKind,
    pub epsilon: f64,
    pub ridge: f64,
    /// Half-width of the uniform init of the operator parameters.
    pub op_init_bound: f64,
    /// Half-width of the uniform init of network biases.
    pub bias_init_bound: f64,
}

impl ModelSpec {
    pub fn new(n: usize, big_n: usize) -> Self {
        Self {
            n,
            big_n,
            hidden: vec![50, 50],
            method: Method::Skel,
            time_mode: TimeMode::Discrete,
            left_inverse: LeftInverseKind::Network,
            epsilon: crate::params::DEFAULT_EPSILON,
            ridge: crate::params::DEFAULT_RIDGE,
            op_init_bound: 0.1,
            bias_init_bound: 0.1,
        }
    }
}

/// Learned lift, decoder, operator and the data scaler they operate under.
#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanModel<S> {
    pub obs: Observables<S>,
    pub left_inv: LeftInverse<S>,
    pub op: OperatorParams<S>,
    pub scaler: Scaler<S>,
    pub time_mode: TimeMode,
}

impl<S: Scalar> KoopmanModel<S> {
    pub fn new(
        obs: Observables<S>,
        left_inv: LeftInverse<S>,
        op: OperatorParams<S>,
        scaler: Scaler<S>,
        time_mode: TimeMode,
    ) -> Result<Self> {
        if let LeftInverse::Network(net) = &left_inv {
            if net.input_dim() != obs.big_n || net.output_dim() != obs.n {
                return Err(Error::contract(format!(
                    "left inverse maps {} -> {}, expected {} -> {}",
                    net.input_dim(),
                    net.output_dim(),
                    obs.big_n,
                    obs.n
                )));
            }
        }
        if op.dim() != obs.big_n {
            return Err(Error::contract(format!(
                "operator dimension {} differs from embedding dimension {}",
                op.dim(),
                obs.big_n
            )));
        }
        if scaler.dim() != obs.n {
            return Err(Error::contract(format!(
                "scaler dimension {} differs from state dimension {}",
                scaler.dim(),
                obs.n
            )));
        }
        let ct_op = matches!(op, OperatorParams::StableCt(_));
        match (time_mode, &op) {
            (TimeMode::Discrete, OperatorParams::StableCt(_)) => {
                return Err(Error::contract("discrete-time model with a continuous-time operator"))
            }
            (TimeMode::Continuous, _) if !ct_op => {
                return Err(Error::contract("continuous time is supported for method skel only"))
            }
            _ => {}
        }
        Ok(Self {
            obs,
            left_inv,
            op,
            scaler,
            time_mode,
        })
    }

    /// Fresh model. The lift's output layer starts at zero so `phi(x) = C x`.
    pub fn init(spec: &ModelSpec, scaler: Scaler<S>, seed: u64) -> Result<Self> {
        if spec.big_n < spec.n || spec.n == 0 {
            return Err(Error::contract(format!(
                "embedding dimension {} must be at least the state dimension {}",
                spec.big_n, spec.n
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obs_dims = vec![spec.n];
        obs_dims.extend(&spec.hidden);
        obs_dims.push(spec.big_n);
        let obs = Observables::new(Mlp::new(&obs_dims, spec.bias_init_bound, true, &mut rng)?)?;
        let left_inv = match spec.left_inverse {
            LeftInverseKind::Network => {
                let mut dims = vec![spec.big_n];
                dims.extend(&spec.hidden);
                dims.push(spec.n);
                LeftInverse::Network(Mlp::new(&dims, spec.bias_init_bound, false, &mut rng)?)
            }
            LeftInverseKind::Projection => LeftInverse::Projection,
        };
        let eps = S::lit(spec.epsilon);
        let op = match (spec.method, spec.time_mode) {
            (Method::Skel, TimeMode::Discrete) => {
                OperatorParams::StableDt(StableDtParams::random(spec.big_n, spec.op_init_bound, eps, &mut rng))
            }
            (Method::Skel, TimeMode::Continuous) => {
                OperatorParams::StableCt(StableCtParams::random(spec.big_n, spec.op_init_bound, eps, &mut rng))
            }
            (Method::Soc, _) => OperatorParams::Soc(SocParams::random(spec.big_n, spec.op_init_bound, &mut rng)?),
            (Method::Lkis, _) => OperatorParams::Lkis {
                ridge: S::lit(spec.ridge),
                a: Mat::zeros(spec.big_n, spec.big_n),
            },
        };
        Self::new(obs, left_inv, op, scaler, spec.time_mode)
    }

    pub fn n(&self) -> usize {
        self.obs.n
    }

    pub fn big_n(&self) -> usize {
        self.obs.big_n
    }

    pub fn method(&self) -> Method {
        self.op.method()
    }

    /// Current value of the operator.
    pub fn operator(&self) -> Result<Mat<S>> {
        self.op.matrix()
    }

    /// Trainable matrices with stable names, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Mat<S>)> {
        let mut out = Vec::new();
        for (k, l) in self.obs.net.layers.iter().enumerate() {
            out.push((format!("obs.{k}.w"), &l.w));
            out.push((format!("obs.{k}.b"), &l.b));
        }
        if let LeftInverse::Network(net) = &self.left_inv {
            for (k, l) in net.layers.iter().enumerate() {
                out.push((format!("dec.{k}.w"), &l.w));
                out.push((format!("dec.{k}.b"), &l.b));
            }
        }
        for (name, m) in self.op.named() {
            out.push((format!("op.{name}"), m));
        }
        out
    }

    /// Mutable views in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Mat<S>> {
        let mut out = Vec::new();
        for l in &mut self.obs.net.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        if let LeftInverse::Network(net) = &mut self.left_inv {
            for l in &mut net.layers {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
        }
        out.extend(self.op.named_mut());
        out
    }

    /// Places every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> ModelVars {
        let obs = self.obs.net.bind(tape, trainable);
        let dec = match &self.left_inv {
            LeftInverse::Network(net) => Some(net.bind(tape, trainable)),
            LeftInverse::Projection => None,
        };
        let op = self
            .op
            .named()
            .into_iter()
            .map(|(_, m)| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect();
        let lift = tape.constant(self.obs.lift_matrix());
        let lift_t = tape.constant(self.obs.lift_matrix().transpose());
        ModelVars {
            obs,
            dec,
            op,
            lift,
            lift_t,
        }
    }

    /// Value-only lift of scaled states given as columns.
    pub fn phi_value(&self, x: &Mat<S>) -> Result<Mat<S>> {
        self.obs.eval(x)
    }

    /// Value-only decoding of embeddings given as columns.
    pub fn phi_left_value(&self, z: &Mat<S>) -> Result<Mat<S>> {
        if z.rows() != self.big_n() {
            return Err(Error::Dimension {
                op: "phi_left",
                lhs: (self.big_n(), 1),
                rhs: z.shape(),
            });
        }
        match &self.left_inv {
            LeftInverse::Network(net) => net.eval(z),
            LeftInverse::Projection => Ok(z.block(0, 0, self.n(), z.cols())),
        }
    }
}

/// Tape handles for one bound model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub obs: MlpVars,
    pub dec: Option<MlpVars>,
    pub op: Vec<Var>,
    lift: Var,
    lift_t: Var,
}

impl ModelVars {
    /// Every parameter handle in [`KoopmanModel::named_params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.obs.vars().collect();
        if let Some(d) = &self.dec {
            v.extend(d.vars());
        }
        v.extend(self.op.iter().copied());
        v
    }
}

/// `phi(X) = C X + net(X)` for scaled states stacked as columns.
pub fn phi<S: Scalar>(tape: &mut Tape<S>, model: &KoopmanModel<S>, vars: &ModelVars, x: Var) -> Result<Var> {
    if x.rows() != model.n() {
        return Err(Error::Dimension {
            op: "phi",
            lhs: (model.n(), 1),
            rhs: x.shape(),
        });
    }
    let net = vars.obs.forward(tape, x)?;
    let cx = tape.matmul(vars.lift, x)?;
    tape.add(cx, net)
}

/// Decoder applied to embeddings stacked as columns.
pub fn phi_left<S: Scalar>(tape: &mut Tape<S>, model: &KoopmanModel<S>, vars: &ModelVars, z: Var) -> Result<Var> {
    if z.rows() != model.big_n() {
        return Err(Error::Dimension {
            op: "phi_left",
            lhs: (model.big_n(), 1),
            rhs: z.shape(),
        });
    }
    match &vars.dec {
        Some(dec) => dec.forward(tape, z),
        None => tape.matmul(vars.lift_t, z),
    }
}

/// Builds the operator on the tape. LKIS needs the snapshot pair
/// `(Y1, Y2)` of shifted and unshifted embeddings.
pub fn operator_var<S: Scalar>(
    tape: &mut Tape<S>,
    model: &KoopmanModel<S>,
    vars: &ModelVars,
    snapshots: Option<(Var, Var)>,
) -> Result<Var> {
    match &model.op {
        OperatorParams::StableDt(p) => build_stable_dt(tape, vars.op[0], vars.op[1], p.epsilon),
        OperatorParams::StableCt(p) => build_stable_ct(tape, vars.op[0], vars.op[1], vars.op[2], p.epsilon),
        OperatorParams::Soc(_) => build_soc(tape, vars.op[0], vars.op[1], vars.op[2]),
        OperatorParams::Lkis { ridge, .. } => {
            let (y1, y2) = snapshots.ok_or_else(|| Error::contract("lkis operator needs snapshot matrices"))?;
            build_lkis(tape, y1, y2, *ridge)
        }
    }
}

/// `(z0, A z0, ..., A^T z0)` by `T` sequential products.
pub fn rollout_z<S: Scalar>(tape: &mut Tape<S>, a: Var, z0: Var, steps: usize) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(z0);
    let mut z = z0;
    for _ in 0..steps {
        z = tape.matmul(a, z)?;
        out.push(z);
    }
    Ok(out)
}

/// Coefficients of the diagonal (6, 6) Pade approximant of `exp`.
const PADE6: [f64; 7] = [
    1.0,
    0.5,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
];

/// Number of squarings used for `exp(A t)`.
pub fn expm_squarings<S: Scalar>(a: &Mat<S>, t: S) -> u32 {
    let norm = a.norm_1() * t.abs();
    if !(norm > S::one()) {
        return 0;
    }
    norm.log2().ceil().to_u32().unwrap_or(0)
}

/// `exp(A t)` on the tape by scaling and squaring with Pade(6, 6).
pub fn expm<S: Scalar>(tape: &mut Tape<S>, a: Var, t: S) -> Result<Var> {
    if a.rows() != a.cols() {
        return Err(Error::Dimension {
            op: "expm",
            lhs: a.shape(),
            rhs: a.shape(),
        });
    }
    let s = expm_squarings(tape.value(a), t);
    let x = tape.scale(a, t / S::lit(2f64.powi(s as i32)));
    let eye = tape.constant(Mat::identity(a.rows()));
    let mut num = tape.constant(Mat::identity(a.rows()));
    let mut den = num;
    let mut power = eye;
    for (k, &c) in PADE6.iter().enumerate().skip(1) {
        power = if k == 1 { x } else { tape.matmul(power, x)? };
        let term = tape.scale(power, S::lit(c));
        num = tape.add(num, term)?;
        den = if k % 2 == 1 { tape.sub(den, term)? } else { tape.add(den, term)? };
    }
    let inv = tape.inverse(den)?;
    let mut r = tape.matmul(inv, num)?;
    for _ in 0..s {
        r = tape.matmul(r, r)?;
    }
    Ok(r)
}

/// Value of `exp(A t)`.
pub fn expm_value<S: Scalar>(a: &Mat<S>, t: S) -> Result<Mat<S>> {
    let mut tape = Tape::new();
    let v = tape.constant(a.clone());
    let e = expm(&mut tape, v, t)?;
    Ok(tape.value(e).clone())
}

/// Memo of `exp(A t)` values keyed by the exact bit pattern of `t`.
pub struct ExpmCache<S> {
    a: Mat<S>,
    memo: HashMap<u64, Mat<S>>,
}

impl<S: Scalar> ExpmCache<S> {
    pub fn new(a: Mat<S>) -> Self {
        Self { a, memo: HashMap::new() }
    }

    pub fn get(&mut self, t: S) -> Result<&Mat<S>> {
        let key = t.as_f64().to_bits();
        if !self.memo.contains_key(&key) {
            let v = expm_value(&self.a, t)?;
            self.memo.insert(key, v);
        }
        Ok(&self.memo[&key])
    }
}

/// Which route [`matrix_power_fast`] took.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerPath {
    Eigen,
    /// Repeated multiplication (discrete) or Pade exponential (continuous).
    Fallback,
}

#[derive(Clone, Debug)]
pub struct MatrixPower<S> {
    pub value: Mat<S>,
    pub path: PowerPath,
}

/// Imaginary residue tolerated before a result is declared non-real.
const IMAG_TOL: f64 = 1e-8;

fn eigen_reconstruct<S: Scalar>(ed: &EigenDecomposition<S>, f: impl Fn(Complex<S>) -> Complex<S>) -> Option<Mat<S>> {
    let vinv = ed.vectors_inv.as_ref()?;
    let n = ed.dim();
    let d: Vec<Complex<S>> = ed.values.iter().map(|&l| f(l)).collect();
    let scaled: CMat<S> = Mat::from_fn(n, n, |r, c| ed.vectors[(r, c)] * d[c]);
    let out = scaled.c_mul(vinv);
    (out.max_abs_im() < S::lit(IMAG_TOL)).then(|| out.re())
}

/// `A^t` through `V diag(lambda^t) V^-1` when the decomposition is usable,
/// otherwise by `t` repeated products.
pub fn matrix_power_fast<S: Scalar>(a: &Mat<S>, ed: &EigenDecomposition<S>, t: usize) -> Result<MatrixPower<S>> {
    if !a.is_square() || a.rows() != ed.dim() {
        return Err(Error::Dimension {
            op: "matrix_power_fast",
            lhs: a.shape(),
            rhs: (ed.dim(), ed.dim()),
        });
    }
    if t == 0 {
        return Ok(MatrixPower {
            value: Mat::identity(a.rows()),
            path: PowerPath::Eigen,
        });
    }
    let exp = u32::try_from(t).ok();
    if ed.is_usable() {
        if let Some(e) = exp {
            if let Some(value) = eigen_reconstruct(ed, |l| l.powu(e)) {
                return Ok(MatrixPower {
                    value,
                    path: PowerPath::Eigen,
                });
            }
        }
    }
    Ok(MatrixPower {
        value: a.powi(t),
        path: PowerPath::Fallback,
    })
}

/// `exp(A t)` through `V diag(e^{lambda t}) V^-1`, falling back to Pade.
pub fn matrix_exp_fast<S: Scalar>(a: &Mat<S>, ed: &EigenDecomposition<S>, t: S) -> Result<MatrixPower<S>> {
    if ed.is_usable() {
        if let Some(value) = eigen_reconstruct(ed, |l| (l * t).exp()) {
            return Ok(MatrixPower {
                value,
                path: PowerPath::Eigen,
            });
        }
    }
    Ok(MatrixPower {
        value: expm_value(a, t)?,
        path: PowerPath::Fallback,
    })
}

/// Prediction length for [`simulate`].
#[derive(Clone, Copy, Debug)]
pub enum Horizon<'a, S> {
    /// `steps + 1` discrete-time samples.
    Steps(usize),
    /// Sample times; the first entry is the time of `x0`.
    Times(&'a [S]),
}

/// Raw-unit prediction together with its embedding-space rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation<S> {
    pub states: Vec<Vec<S>>,
    pub latent: Vec<Vec<S>>,
}

/// Scales `x0`, lifts it, propagates linearly, decodes and unscales.
pub fn simulate<S: Scalar>(model: &KoopmanModel<S>, x0: &[S], horizon: Horizon<'_, S>) -> Result<Simulation<S>> {
    if x0.len() != model.n() {
        return Err(Error::Dimension {
            op: "simulate",
            lhs: (model.n(), 1),
            rhs: (x0.len(), 1),
        });
    }
    let xs = Mat::col_vec(&model.scaler.apply(x0));
    let z0 = model.phi_value(&xs)?;
    let a = model.operator()?;
    let big_n = model.big_n();
    let zs: Vec<Mat<S>> = match (model.time_mode, horizon) {
        (TimeMode::Discrete, h) => {
            let steps = match h {
                Horizon::Steps(s) => s,
                Horizon::Times(t) => t.len().saturating_sub(1),
            };
            let mut out = Vec::with_capacity(steps + 1);
            let mut z = z0;
            out.push(z.clone());
            for _ in 0..steps {
                z = a.mul_nn(&z);
                out.push(z.clone());
            }
            out
        }
        (TimeMode::Continuous, Horizon::Times(times)) => {
            let Some(&t0) = times.first() else {
                return Ok(Simulation {
                    states: vec![],
                    latent: vec![],
                });
            };
            let mut cache = ExpmCache::new(a);
            times
                .iter()
                .map(|&t| Ok(cache.get(t - t0)?.mul_nn(&z0)))
                .collect::<Result<_>>()?
        }
        (TimeMode::Continuous, Horizon::Steps(_)) => {
            return Err(Error::contract("continuous-time simulation needs sample times"))
        }
    };
    let mut zmat = Mat::zeros(big_n, zs.len());
    for (c, z) in zs.iter().enumerate() {
        zmat.set_col(c, z.as_slice());
    }
    let xhat = model.phi_left_value(&zmat)?;
    let states = (0..xhat.cols()).map(|c| model.scaler.invert(&xhat.col(c))).collect();
    let latent = zs.into_iter().map(Mat::into_vec).collect();
    Ok(Simulation { states, latent })
}

/// Eigendecomposition of the model's operator.
pub fn operator_eig<S: Scalar>(model: &KoopmanModel<S>) -> Result<EigenDecomposition<S>> {
    eig(&model.operator()?)
}
