use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use skel::certify::CertifyOptions;
use skel::data::SyntheticKind;
use skel::embed::Method;
use skel::train::TrainConfig;

/// Everything a command may read from `--config`. Unset fields fall back to
/// the library defaults; command-line flags win over both.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub gen: GenConfig,
    pub preprocess: Preprocess,
    pub train: TrainConfig,
    pub certify: CertifyOptions,
    pub horizon: Option<usize>,
    pub dt: Option<f64>,
    pub methods: Option<Vec<Method>>,
    pub seeds: Option<Vec<u64>>,
    pub workers: Option<usize>,
    pub perturb_width: Option<f64>,
    pub perturb_samples: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub kind: SyntheticKind,
    pub n_traj: usize,
    pub steps: usize,
    pub dt: f64,
    pub noise_std: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::TanhContraction,
            n_traj: 5,
            steps: 200,
            dt: 1.0,
            noise_std: 1e-3,
        }
    }
}

/// Optional resampling and velocity augmentation applied before training.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    pub resample_dt: Option<f64>,
    pub velocity: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Flag, then config, then `SKEL_SEED`, then `fallback`.
    pub fn resolve_seed(&self, flag: Option<u64>, fallback: u64) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var("SKEL_SEED") {
            Ok(v) => v.trim().parse().with_context(|| format!("SKEL_SEED is not an unsigned integer: `{v}`")),
            Err(_) => Ok(fallback),
        }
    }
}

/// Parses a snake_case enum name through its serde representation.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

pub fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| anyhow::anyhow!("missing --{what} (flag or config field `{what}`)"))
}
