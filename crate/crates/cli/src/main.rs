mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{parse_enum, required, RunConfig};
use skel::certify::{certify, compare, evaluate, simulate_like, CompareConfig};
use skel::data::{augment_velocity, gen_synthetic, load_csv, resample_uniform, save_csv, SyntheticKind};
use skel::embed::{model_from_json, model_to_json, simulate, Horizon, LeftInverseKind, Method, TimeMode};
use skel::train::fit_raw;
use skel::{Error, Model, Traj};

#[derive(Parser)]
#[command(name = "skel", version, about = "Learn and certify stable Koopman models from trajectory data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; falls back to the config, then SKEL_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic trajectory CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_enum::<SyntheticKind>)]
        kind: Option<SyntheticKind>,
        #[arg(long)]
        n_traj: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a model; writes the model JSON and the per-epoch log CSV.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: DataIo,
        #[command(flatten)]
        train: TrainFlags,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Roll a model out from each trajectory's first state.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelIo,
        /// Number of steps; defaults to the length of each input trajectory.
        #[arg(long)]
        horizon: Option<usize>,
        /// Step used with --horizon for continuous-time models.
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Normalized simulation error and reconstruction error on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelIo,
    },
    /// Stability and contraction certificate for a model.
    Certify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelIo,
    },
    /// Leave-one-out comparison of methods over seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: DataIo,
        #[command(flatten)]
        train: TrainFlags,
        /// Per-fold CSV next to the JSON report.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', value_parser = parse_enum::<Method>)]
        methods: Option<Vec<Method>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker threads; 0 or unset uses every logical core.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        perturb_width: Option<f64>,
        #[arg(long)]
        perturb_samples: Option<usize>,
    },
}

#[derive(Args)]
struct DataIo {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resample every trajectory onto a uniform grid with this step.
    #[arg(long)]
    resample_dt: Option<f64>,
    /// Append finite-difference velocities to the state.
    #[arg(long)]
    velocity: bool,
}

#[derive(Args)]
struct ModelIo {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, value_parser = parse_enum::<Method>)]
    method: Option<Method>,
    #[arg(long, value_parser = parse_enum::<TimeMode>)]
    time_mode: Option<TimeMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_enum::<LeftInverseKind>)]
    left_inverse: Option<LeftInverseKind>,
    #[arg(long)]
    x_space_loss: bool,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.method {
            t.method = v;
        }
        if let Some(v) = self.time_mode {
            t.time_mode = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.alpha {
            t.alpha = v;
        }
        if let Some(v) = self.epsilon {
            t.epsilon = v;
        }
        if let Some(v) = self.ridge {
            t.ridge = v;
        }
        if let Some(v) = self.embedding_dim {
            t.embedding_dim = v;
        }
        if let Some(v) = &self.hidden {
            t.hidden_dims = v.clone();
        }
        if let Some(v) = self.left_inverse {
            t.left_inverse = v;
        }
        if self.x_space_loss {
            t.x_space_loss = true;
        }
    }
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let numerical = err.chain().any(|c| {
            matches!(
                c.downcast_ref::<Error>(),
                Some(Error::NonFinite { .. } | Error::Convergence { .. } | Error::Singular { .. })
            )
        });
        Failure {
            code: if numerical { 2 } else { 1 },
            err,
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::GenData {
            common,
            kind,
            n_traj,
            steps,
            dt,
            noise_std,
            out,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let seed = cfg.resolve_seed(common.seed, 0)?;
            let g = &cfg.gen;
            let trajs: Vec<Traj> = gen_synthetic(
                kind.unwrap_or(g.kind),
                n_traj.unwrap_or(g.n_traj),
                steps.unwrap_or(g.steps),
                dt.unwrap_or(g.dt),
                noise_std.unwrap_or(g.noise_std),
                seed,
            )?;
            let out = required(out.or(cfg.out), "out")?;
            save_csv(&out, &trajs)?;
            Ok(())
        }
        Command::Train { common, io, train, log } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            cfg.train.seed = cfg.resolve_seed(common.seed, cfg.train.seed)?;
            train.apply(&mut cfg);
            let data = load_prepared(&io, &cfg)?;
            let out = required(io.out.or(cfg.out.clone()), "out")?;
            let log_path = log.or(cfg.log.clone()).unwrap_or_else(|| out.with_extension("log.csv"));
            let fit = fit_raw(&data, &cfg.train)?;
            write_text(&out, &model_to_json(&fit.model)?)?;
            fit.log.save_csv(&log_path)?;
            if let Some(reason) = fit.log.aborted {
                return Err(Failure {
                    code: 2,
                    err: anyhow::anyhow!("training aborted at {reason}; best model so far written to {}", out.display()),
                });
            }
            Ok(())
        }
        Command::Simulate {
            common,
            io,
            horizon,
            dt,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let (model, data, out) = model_and_data(io, &cfg)?;
            let horizon = horizon.or(cfg.horizon);
            let dt = dt.or(cfg.dt).unwrap_or(1.0);
            let sims = data
                .iter()
                .map(|t| simulate_one(&model, t, horizon, dt))
                .collect::<Result<Vec<_>>>()?;
            save_csv(&out, &sims)?;
            Ok(())
        }
        Command::Eval { common, io } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let (model, data, out) = model_and_data(io, &cfg)?;
            let report = evaluate(&model, &data)?;
            write_text(&out, &serde_json::to_string_pretty(&report).context("serializing report")?)?;
            Ok(())
        }
        Command::Certify { common, io } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let mut opts = cfg.certify.clone();
            opts.seed = cfg.resolve_seed(common.seed, opts.seed)?;
            let (model, data, out) = model_and_data(io, &cfg)?;
            let cert = certify(&model, &data, &opts)?;
            write_text(&out, &serde_json::to_string_pretty(&cert).context("serializing certificate")?)?;
            Ok(())
        }
        Command::Compare {
            common,
            io,
            train,
            csv,
            methods,
            seeds,
            workers,
            perturb_width,
            perturb_samples,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            cfg.train.seed = cfg.resolve_seed(common.seed, cfg.train.seed)?;
            train.apply(&mut cfg);
            let data = load_prepared(&io, &cfg)?;
            let out = required(io.out.or(cfg.out.clone()), "out")?;
            let csv_path = csv.or(cfg.csv.clone()).unwrap_or_else(|| out.with_extension("folds.csv"));
            let defaults = CompareConfig::default();
            let ccfg = CompareConfig {
                methods: methods.or(cfg.methods.clone()).unwrap_or(defaults.methods),
                seeds: seeds.or(cfg.seeds.clone()).unwrap_or_else(|| vec![cfg.train.seed]),
                train: cfg.train.clone(),
                workers: workers.or(cfg.workers).unwrap_or(defaults.workers),
                perturb_width: perturb_width.or(cfg.perturb_width).unwrap_or(defaults.perturb_width),
                perturb_samples: perturb_samples.or(cfg.perturb_samples).unwrap_or(defaults.perturb_samples),
            };
            let report = compare(&data, &ccfg)?;
            report.save(&out, &csv_path)?;
            Ok(())
        }
    }
}

fn load_prepared(io: &DataIo, cfg: &RunConfig) -> Result<Vec<Traj>> {
    let path = required(io.data.clone().or(cfg.data.clone()), "data")?;
    let mut data: Vec<Traj> = load_csv(&path)?;
    if let Some(dt) = io.resample_dt.or(cfg.preprocess.resample_dt) {
        data = data.iter().map(|t| resample_uniform(t, dt)).collect::<skel::Result<_>>()?;
    }
    if io.velocity || cfg.preprocess.velocity {
        data = data.iter().map(augment_velocity).collect::<skel::Result<_>>()?;
    }
    Ok(data)
}

fn model_and_data(io: ModelIo, cfg: &RunConfig) -> Result<(Model, Vec<Traj>, PathBuf)> {
    let model_path = required(io.model.or(cfg.model.clone()), "model")?;
    let text = std::fs::read_to_string(&model_path).with_context(|| format!("reading model {}", model_path.display()))?;
    let model: Model = model_from_json(&text).with_context(|| format!("loading model {}", model_path.display()))?;
    let data_path = required(io.data.or(cfg.data.clone()), "data")?;
    let data: Vec<Traj> = load_csv(&data_path)?;
    if let Some(t) = data.iter().find(|t| t.dim() != model.n()) {
        anyhow::bail!(
            "trajectory {} has {} state columns but the model expects {}",
            t.source_id,
            t.dim(),
            model.n()
        );
    }
    let out = required(io.out.or(cfg.out.clone()), "out")?;
    Ok((model, data, out))
}

fn simulate_one(model: &Model, t: &Traj, horizon: Option<usize>, dt: f64) -> Result<Traj> {
    let id = format!("{}_sim", t.source_id);
    let Some(steps) = horizon else {
        let states = simulate_like(model, t)?;
        return Ok(Traj::new(id, states, t.times.clone())?);
    };
    let t0 = t.times.as_ref().map_or(0.0, |ts| ts[0]);
    let times: Vec<f64> = (0..=steps).map(|k| t0 + k as f64 * dt).collect();
    let h = match model.time_mode {
        TimeMode::Discrete => Horizon::Steps(steps),
        TimeMode::Continuous => Horizon::Times(&times),
    };
    let sim = simulate(model, &t.states[0], h)?;
    let times = match (model.time_mode, &t.times) {
        (TimeMode::Discrete, None) => None,
        _ => Some(times),
    };
    Ok(Traj::new(id, sim.states, times)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
