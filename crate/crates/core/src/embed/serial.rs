//! JSON model documents: `{meta: {...}, params: {name: {shape, data}}}`.
//!
//! Values are written as `f64` with shortest round-trip formatting, so a
//! save/load cycle reproduces every parameter exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    Dense, KoopmanModel, LeftInverse, LeftInverseKind, Method, Mlp, Observables, OperatorParams, TimeMode,
};
use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::params::{SocParams, StableCtParams, StableDtParams};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format: u32,
    pub n: usize,
    #[serde(rename = "N")]
    pub big_n: usize,
    pub time_mode: TimeMode,
    pub method: Method,
    pub left_inverse: LeftInverseKind,
    pub obs_dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dec_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    pub scaler: Scaler<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub meta: ModelMeta,
    pub params: BTreeMap<String, ParamEntry>,
}

fn entry<S: Scalar>(m: &Mat<S>) -> ParamEntry {
    ParamEntry {
        shape: [m.rows(), m.cols()],
        data: m.as_slice().iter().map(|v| v.as_f64()).collect(),
    }
}

impl<S: Scalar> KoopmanModel<S> {
    pub fn to_document(&self) -> ModelDocument {
        let mut params: BTreeMap<String, ParamEntry> =
            self.named_params().into_iter().map(|(k, m)| (k, entry(m))).collect();
        let (epsilon, ridge) = match &self.op {
            OperatorParams::StableDt(p) => (Some(p.epsilon.as_f64()), None),
            OperatorParams::StableCt(p) => (Some(p.epsilon.as_f64()), None),
            OperatorParams::Soc(_) => (None, None),
            OperatorParams::Lkis { ridge, a } => {
                params.insert("op.A".into(), entry(a));
                (None, Some(ridge.as_f64()))
            }
        };
        let (left_inverse, dec_dims) = match &self.left_inv {
            LeftInverse::Network(net) => (LeftInverseKind::Network, Some(net.dims())),
            LeftInverse::Projection => (LeftInverseKind::Projection, None),
        };
        ModelDocument {
            meta: ModelMeta {
                format: FORMAT_VERSION,
                n: self.n(),
                big_n: self.big_n(),
                time_mode: self.time_mode,
                method: self.method(),
                left_inverse,
                obs_dims: self.obs.net.dims(),
                dec_dims,
                epsilon,
                ridge,
                scaler: Scaler {
                    min: self.scaler.min.iter().map(|v| v.as_f64()).collect(),
                    max: self.scaler.max.iter().map(|v| v.as_f64()).collect(),
                },
            },
            params,
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        let meta = &doc.meta;
        if meta.format != FORMAT_VERSION {
            return Err(Error::contract(format!("unsupported model format {}", meta.format)));
        }
        let take = |name: &str, shape: (usize, usize)| -> Result<Mat<S>> {
            let e = doc
                .params
                .get(name)
                .ok_or_else(|| Error::contract(format!("model file lacks parameter `{name}`")))?;
            if (e.shape[0], e.shape[1]) != shape || e.data.len() != shape.0 * shape.1 {
                return Err(Error::Dimension {
                    op: "model parameter",
                    lhs: shape,
                    rhs: (e.shape[0], e.shape[1]),
                });
            }
            Ok(Mat::from_vec(shape.0, shape.1, e.data.iter().map(|&v| S::lit(v)).collect()))
        };
        let mlp = |prefix: &str, dims: &[usize]| -> Result<Mlp<S>> {
            if dims.len() < 2 {
                return Err(Error::contract(format!("{prefix}: need at least two layer dims")));
            }
            let layers = dims
                .windows(2)
                .enumerate()
                .map(|(k, p)| {
                    Ok(Dense {
                        w: take(&format!("{prefix}.{k}.w"), (p[1], p[0]))?,
                        b: take(&format!("{prefix}.{k}.b"), (p[1], 1))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Mlp { layers })
        };
        let obs = Observables::new(mlp("obs", &meta.obs_dims)?)?;
        if obs.n != meta.n || obs.big_n != meta.big_n {
            return Err(Error::contract("model file: layer dims disagree with n/N"));
        }
        let left_inv = match meta.left_inverse {
            LeftInverseKind::Network => {
                let dims = meta
                    .dec_dims
                    .as_ref()
                    .ok_or_else(|| Error::contract("model file: network decoder without dec_dims"))?;
                LeftInverse::Network(mlp("dec", dims)?)
            }
            LeftInverseKind::Projection => LeftInverse::Projection,
        };
        let nn = (meta.big_n, meta.big_n);
        let eps = || {
            meta.epsilon
                .map(S::lit)
                .ok_or_else(|| Error::contract("model file: missing epsilon"))
        };
        let op = match (meta.method, meta.time_mode) {
            (Method::Skel, TimeMode::Discrete) => OperatorParams::StableDt(StableDtParams::new(
                take("op.L", (2 * meta.big_n, 2 * meta.big_n))?,
                take("op.R", nn)?,
                eps()?,
            )?),
            (Method::Skel, TimeMode::Continuous) => OperatorParams::StableCt(StableCtParams::new(
                take("op.Wn", nn)?,
                take("op.Wq", nn)?,
                take("op.Wr", nn)?,
                eps()?,
            )?),
            (Method::Soc, _) => OperatorParams::Soc(SocParams::new(take("op.S", nn)?, take("op.O", nn)?, take("op.C", nn)?)?),
            (Method::Lkis, _) => OperatorParams::Lkis {
                ridge: S::lit(meta.ridge.unwrap_or(crate::params::DEFAULT_RIDGE)),
                a: take("op.A", nn)?,
            },
        };
        let scaler = Scaler::new(
            meta.scaler.min.iter().map(|&v| S::lit(v)).collect(),
            meta.scaler.max.iter().map(|&v| S::lit(v)).collect(),
        )?;
        KoopmanModel::new(obs, left_inv, op, scaler, meta.time_mode)
    }
}

pub fn model_to_json<S: Scalar>(model: &KoopmanModel<S>) -> Result<String> {
    Ok(serde_json::to_string_pretty(&model.to_document())?)
}

pub fn model_from_json<S: Scalar>(json: &str) -> Result<KoopmanModel<S>> {
    let doc: ModelDocument = serde_json::from_str(json)?;
    KoopmanModel::from_document(&doc)
}
