use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skel::data::{gen_synthetic, Scaler, SyntheticKind, Trajectory, LINEAR_SINK_MATRIX};
use skel::embed::{simulate, Horizon, KoopmanModel, LeftInverseKind, Method, TimeMode};
use skel::linalg::{eig, Mat};
use skel::train::{evaluate_objective, fit, fit_raw, AdamState, Prepared, TrainConfig};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        embedding_dim: 6,
        hidden_dims: vec![16, 16],
        epochs: 200,
        lr: 3e-3,
        ..Default::default()
    }
}

fn tanh_data(n_traj: usize, steps: usize, seed: u64) -> Vec<Trajectory<f64>> {
    gen_synthetic(SyntheticKind::TanhContraction, n_traj, steps, 1.0, 1e-3, seed).unwrap()
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let target = Mat::<f64>::from_vec(2, 2, vec![1.5, -0.5, 3.0, 0.25]);
    let mut p = Mat::<f64>::zeros(2, 2);
    let mut adam = AdamState::new(&[(2, 2)]);
    let names = vec!["p".to_string()];
    let mut loss = f64::INFINITY;
    for _ in 0..2000 {
        let diff = p.sub(&target).unwrap();
        loss = diff.frobenius().powi(2);
        let grad = diff.scale(2.0);
        adam.step(&mut [&mut p], &[grad], &names, 0.01).unwrap();
    }
    assert!(loss < 1e-3, "loss {loss:e}");
}

#[test]
fn linear_data_recovers_the_generating_matrix() {
    let trajs = gen_synthetic::<f64>(SyntheticKind::LinearSink, 4, 30, 1.0, 0.0, 3).unwrap();
    let cfg = TrainConfig {
        embedding_dim: 2,
        hidden_dims: vec![4],
        left_inverse: LeftInverseKind::Projection,
        epochs: 4000,
        lr: 1e-2,
        ..Default::default()
    };
    // identity scaling keeps the dynamics linear
    let out = fit(&trajs, Scaler::identity(2), &cfg).unwrap();
    assert!(out.log.aborted.is_none());
    let a = out.model.operator().unwrap();
    // on noiseless data the least-squares one-step solution is the generator itself
    for r in 0..2 {
        for c in 0..2 {
            let err = (a[(r, c)] - LINEAR_SINK_MATRIX[r][c]).abs();
            assert!(err < 1e-3, "entry ({r},{c}) off by {err:e}");
        }
    }
}

#[test]
fn objective_ignores_trajectory_order() {
    let cfg = small_cfg();
    let trajs = tanh_data(4, 20, 1);
    let model = KoopmanModel::<f64>::init(&cfg.model_spec(2), Scaler::identity(2), 5).unwrap();
    let prep = |ts: &[Trajectory<f64>]| ts.iter().map(|t| Prepared::from_trajectory(t).unwrap()).collect::<Vec<_>>();
    let forward = evaluate_objective(&model, &prep(&trajs), &cfg).unwrap().0;
    let mut rev = trajs.clone();
    rev.reverse();
    rev.swap(0, 2);
    let shuffled = evaluate_objective(&model, &prep(&rev), &cfg).unwrap().0;
    assert!((forward - shuffled).abs() <= 1e-12 * forward.abs());
}

#[test]
fn zero_alpha_leaves_only_the_simulation_loss() {
    let cfg = TrainConfig { alpha: 0.0, ..small_cfg() };
    let trajs = tanh_data(2, 15, 2);
    let data: Vec<_> = trajs.iter().map(|t| Prepared::from_trajectory(t).unwrap()).collect();
    let model = KoopmanModel::<f64>::init(&cfg.model_spec(2), Scaler::identity(2), 1).unwrap();
    let (total, j_se, _) = evaluate_objective(&model, &data, &cfg).unwrap();
    assert_eq!(total, j_se);
}

#[test]
fn stable_methods_stay_stable_every_epoch() {
    let trajs = tanh_data(3, 30, 4);
    for (method, tm) in [(Method::Skel, TimeMode::Discrete), (Method::Skel, TimeMode::Continuous), (Method::Soc, TimeMode::Discrete)] {
        let cfg = TrainConfig {
            method,
            time_mode: tm,
            epochs: 60,
            lr: if method == Method::Soc { 1e-4 } else { 3e-3 },
            ..small_cfg()
        };
        let out = fit_raw(&trajs, &cfg).unwrap();
        for r in &out.log.records {
            if method == Method::Soc {
                assert!(r.spectral_radius <= 1.0 + 1e-9, "{method} epoch {}: {}", r.epoch, r.spectral_radius);
            } else {
                assert!(r.spectral_radius < 1.0, "{method} {tm} epoch {}: {}", r.epoch, r.spectral_radius);
            }
        }
    }
}

#[test]
fn same_seed_gives_identical_logs() {
    let trajs = tanh_data(3, 20, 6);
    let cfg = TrainConfig { epochs: 40, seed: 11, ..small_cfg() };
    let a = fit_raw(&trajs, &cfg).unwrap();
    let b = fit_raw(&trajs, &cfg).unwrap();
    assert_eq!(a.log.without_timing(), b.log.without_timing());
    assert_eq!(a.model, b.model);
    let c = fit_raw(&trajs, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.log.without_timing(), c.log.without_timing());
}

#[test]
fn heavy_reconstruction_weight_tightens_the_roundtrip() {
    let trajs = tanh_data(3, 30, 7);
    let roundtrip = |alpha: f64| {
        let cfg = TrainConfig { alpha, epochs: 300, ..small_cfg() };
        let out = fit_raw(&trajs, &cfg).unwrap();
        let m = &out.model;
        let mut worst = 0.0f64;
        for t in &trajs {
            for x in &t.states {
                let xs = Mat::from_vec(2, 1, m.scaler.apply(x));
                let back = m.phi_left_value(&m.phi_value(&xs).unwrap()).unwrap();
                worst = worst.max(back.sub(&xs).unwrap().max_abs());
            }
        }
        worst
    };
    let loose = roundtrip(1.0);
    let tight = roundtrip(1e9);
    assert!(tight <= loose, "alpha 1e9 gave {tight:e}, alpha 1 gave {loose:e}");
}

#[test]
fn spiral_training_cuts_the_objective_by_ninety_percent() {
    let trajs = gen_synthetic::<f64>(SyntheticKind::SpiralSink, 3, 40, 0.5, 0.0, 8).unwrap();
    let cfg = TrainConfig { epochs: 400, embedding_dim: 8, ..small_cfg() };
    let out = fit_raw(&trajs, &cfg).unwrap();
    let first = out.log.records[0].total;
    let best = out.log.best_total().unwrap();
    assert!(best <= 0.1 * first, "objective {first:e} -> {best:e}");
    // the trained model reproduces the training motion in raw units
    let t = &trajs[0];
    let sim = simulate(&out.model, &t.states[0], Horizon::Steps(t.len() - 1)).unwrap();
    let err: f64 = sim.states.iter().zip(&t.states).map(|(a, b)| (a[0] - b[0]).powi(2)).sum::<f64>();
    let energy: f64 = t.states.iter().map(|x| x[0] * x[0]).sum();
    assert!(err < 0.5 * energy, "simulation error {err:e} vs signal {energy:e}");
}

#[test]
fn continuous_training_accepts_irregular_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let trajs: Vec<Trajectory<f64>> = (0..3)
        .map(|k| {
            let mut t = 0.0;
            let mut x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let (mut ts, mut xs) = (Vec::new(), Vec::new());
            for _ in 0..25 {
                ts.push(t);
                xs.push(x.clone());
                let h: f64 = rng.random_range(0.05..0.3);
                t += h;
                let decay = (-0.8 * h).exp();
                x = x.iter().map(|v| v * decay).collect();
            }
            Trajectory::new(format!("irr{k}"), xs, Some(ts)).unwrap()
        })
        .collect();
    let cfg = TrainConfig { time_mode: TimeMode::Continuous, epochs: 150, ..small_cfg() };
    let out = fit_raw(&trajs, &cfg).unwrap();
    assert!(out.log.aborted.is_none());
    assert!(out.log.best_total().unwrap() < out.log.records[0].total);
    let a = out.model.operator().unwrap();
    assert!(eig(&a).unwrap().max_real() < 0.0);
    let untimed: Vec<_> = trajs.iter().map(|t| Trajectory::new("u", t.states.clone(), None).unwrap()).collect();
    assert!(fit_raw(&untimed, &cfg).is_err());
}

#[test]
fn log_csv_has_the_expected_columns() {
    let cfg = TrainConfig { epochs: 5, ..small_cfg() };
    let out = fit_raw(&tanh_data(2, 10, 10), &cfg).unwrap();
    let mut buf = Vec::new();
    out.log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,J_se,J_rec,total,spectral_radius,wall_ms");
    assert_eq!(lines.count(), 5);
    let best = out.log.best_epoch.unwrap();
    let min = out.log.records.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
    assert_eq!(out.log.records[best].total, min);
}

#[test]
fn invalid_configs_are_rejected() {
    let trajs = tanh_data(2, 10, 11);
    for cfg in [
        TrainConfig { lr: 0.0, ..small_cfg() },
        TrainConfig { alpha: -1.0, ..small_cfg() },
        TrainConfig { embedding_dim: 1, ..small_cfg() },
        TrainConfig { method: Method::Lkis, time_mode: TimeMode::Continuous, ..small_cfg() },
    ] {
        assert!(fit_raw(&trajs, &cfg).is_err());
    }
    assert!(fit_raw::<f64>(&[], &small_cfg()).is_err());
}
