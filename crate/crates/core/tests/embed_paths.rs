use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skel::data::Scaler;
use skel::embed::{
    expm, expm_squarings, expm_value, matrix_exp_fast, matrix_power_fast, model_from_json, model_to_json,
    rollout_z, simulate, Horizon, KoopmanModel, LeftInverseKind, Method, ModelSpec, PowerPath, TimeMode,
};
use skel::linalg::{eig, Mat};
use skel::params::StableDtParams;
use skel::tape::Tape;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, b: f64) -> Mat<f64> {
    Mat::from_fn(r, c, |_, _| rng.random_range(-b..b))
}

fn stable(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> Mat<f64> {
    let a = random(rng, n, n, 1.0);
    let r = eig(&a).unwrap().spectral_radius();
    a.scale(rho / r)
}

fn taylor(a: &Mat<f64>, t: f64, terms: usize) -> Mat<f64> {
    let at = a.scale(t);
    let mut sum = Mat::identity(a.rows());
    let mut term = Mat::identity(a.rows());
    for k in 1..terms {
        term = term.mul_nn(&at).scale(1.0 / k as f64);
        sum.add_assign(&term);
    }
    sum
}

#[test]
fn expm_matches_taylor_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let a = random(&mut rng, 5, 5, 0.5);
        let t = rng.random_range(0.1..2.0);
        let e = expm_value(&a, t).unwrap();
        let err = e.sub(&taylor(&a, t, 30)).unwrap().max_abs();
        assert!(err < 1e-9, "error {err:e}");
    }
}

#[test]
fn expm_squaring_count_follows_one_norm() {
    let a = Mat::from_diag(&[3.0, 0.0]);
    assert_eq!(expm_squarings(&a, 1.0), 2);
    assert_eq!(expm_squarings(&a, 0.1), 0);
    assert_eq!(expm_squarings(&Mat::<f64>::zeros(2, 2), 5.0), 0);
    let e = expm_value(&Mat::from_diag(&[-4.0, 1.0]), 2.5).unwrap();
    assert!((e[(0, 0)] - (-10.0f64).exp()).abs() < 1e-15);
    assert!((e[(1, 1)] - 2.5f64.exp()).abs() < 1e-9 * 2.5f64.exp());
}

#[test]
fn expm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a0 = random(&mut rng, 3, 3, 0.8);
    let w = random(&mut rng, 3, 3, 1.0);
    let loss = |a: &Mat<f64>| expm_value(a, 1.7).unwrap().hadamard(&w).unwrap().sum();
    let mut tape = Tape::new();
    let a = tape.param(a0.clone());
    let e = expm(&mut tape, a, 1.7).unwrap();
    let wv = tape.constant(w.clone());
    let h = tape.hadamard(e, wv).unwrap();
    let l = tape.sum(h);
    tape.backward(l).unwrap();
    let g = tape.grad(a);
    let step = 1e-5;
    for i in 0..3 {
        for j in 0..3 {
            let mut p = a0.clone();
            let mut m = a0.clone();
            p[(i, j)] += step;
            m[(i, j)] -= step;
            let fd = (loss(&p) - loss(&m)) / (2.0 * step);
            assert!((g[(i, j)] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "({i},{j}) {} vs {fd}", g[(i, j)]);
        }
    }
}

#[test]
fn power_fast_matches_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..5 {
        let a = stable(&mut rng, 20, 0.97);
        let ed = eig(&a).unwrap();
        let mut iter = Mat::identity(20);
        for t in 1..=100 {
            iter = a.mul_nn(&iter);
            if t % 10 == 0 {
                let fast = matrix_power_fast(&a, &ed, t).unwrap();
                assert_eq!(fast.path, PowerPath::Eigen);
                assert!(fast.value.sub(&iter).unwrap().max_abs() < 1e-8, "t={t}");
            }
        }
    }
}

#[test]
fn power_fast_trivial_and_defective_cases() {
    let a = Mat::from_diag(&[0.5, 0.9]);
    let ed = eig(&a).unwrap();
    let p = matrix_power_fast(&a, &ed, 3).unwrap();
    assert!(p.value.sub(&Mat::from_diag(&[0.125, 0.729])).unwrap().max_abs() < 1e-15);
    assert_eq!(matrix_power_fast(&a, &ed, 0).unwrap().value, Mat::identity(2));
    // a Jordan block has no eigenvector basis
    let j = Mat::<f64>::from_rows(&[&[0.5, 1.0], &[0.0, 0.5]]);
    let p = matrix_power_fast(&j, &eig(&j).unwrap(), 4).unwrap();
    assert_eq!(p.path, PowerPath::Fallback);
    assert!(p.value.sub(&j.powi(4)).unwrap().max_abs() < 1e-14);
}

#[test]
fn exp_fast_matches_pade() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = random(&mut rng, 6, 6, 0.7);
    let ed = eig(&a).unwrap();
    for t in [0.0, 0.3, 1.0, 4.0] {
        let fast = matrix_exp_fast(&a, &ed, t).unwrap();
        let pade = expm_value(&a, t).unwrap();
        assert!(fast.value.sub(&pade).unwrap().max_abs() < 1e-9 * (1.0 + pade.max_abs()));
    }
}

#[test]
fn rollout_final_state_matches_power_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a0 = StableDtParams::<f64>::random(6, 0.5, 1e-8, &mut rng).operator().unwrap();
    let z0 = random(&mut rng, 6, 1, 1.0);
    let mut tape = Tape::new();
    let a = tape.constant(a0.clone());
    let z = tape.constant(z0.clone());
    let roll = rollout_z(&mut tape, a, z, 50).unwrap();
    assert_eq!(roll.len(), 51);
    let last = tape.value(roll[50]).clone();
    let fast = matrix_power_fast(&a0, &eig(&a0).unwrap(), 50).unwrap().value.mul_nn(&z0);
    assert!(last.sub(&fast).unwrap().max_abs() < 1e-9);
}

fn model(method: Method, time_mode: TimeMode, seed: u64) -> KoopmanModel<f64> {
    let mut spec = ModelSpec::new(2, 6);
    spec.hidden = vec![8, 8];
    spec.method = method;
    spec.time_mode = time_mode;
    let scaler = Scaler::new(vec![-2.0, -1.0], vec![2.0, 3.0]).unwrap();
    let mut m = KoopmanModel::init(&spec, scaler, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in m.params_mut() {
        for v in p.as_mut_slice() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    m
}

#[test]
fn simulated_latents_evolve_linearly() {
    let m = model(Method::Skel, TimeMode::Discrete, 1);
    let a = m.operator().unwrap();
    let sim = simulate(&m, &[0.5, 1.5], Horizon::Steps(30)).unwrap();
    assert_eq!(sim.states.len(), 31);
    for w in sim.latent.windows(2) {
        let next = a.matvec(&w[0]);
        for (x, y) in next.iter().zip(&w[1]) {
            assert!((x - y).abs() <= 1e-15 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn simulation_settles_within_geometric_bound() {
    let m = model(Method::Skel, TimeMode::Discrete, 2);
    let rho = eig(&m.operator().unwrap()).unwrap().spectral_radius();
    let horizon = (10.0 / (1.0 - rho)).ceil() as usize + 200;
    let sim = simulate(&m, &[1.0, 0.0], Horizon::Steps(horizon)).unwrap();
    let n = sim.states.len();
    let step: f64 = sim.states[n - 1]
        .iter()
        .zip(&sim.states[n - 2])
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(step < 1e-6, "last step {step:e} (rho {rho})");
}

#[test]
fn continuous_simulation_uses_elapsed_time() {
    let m = model(Method::Skel, TimeMode::Continuous, 3);
    let times = [2.0, 2.25, 3.0, 5.5];
    let sim = simulate(&m, &[0.1, 0.2], Horizon::Times(&times)).unwrap();
    let a = m.operator().unwrap();
    let z0 = &sim.latent[0];
    for (k, &t) in times.iter().enumerate() {
        let want = expm_value(&a, t - times[0]).unwrap().matvec(z0);
        for (x, y) in want.iter().zip(&sim.latent[k]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!(simulate(&m, &[0.1, 0.2], Horizon::Steps(3)).is_err());
}

#[test]
fn model_json_roundtrip_preserves_predictions() {
    for (method, tm) in [
        (Method::Skel, TimeMode::Discrete),
        (Method::Skel, TimeMode::Continuous),
        (Method::Soc, TimeMode::Discrete),
        (Method::Lkis, TimeMode::Discrete),
    ] {
        let m = model(method, tm, 4);
        let back: KoopmanModel<f64> = model_from_json(&model_to_json(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let h = [0.0, 1.0, 2.0];
        let horizon = || match tm {
            TimeMode::Discrete => Horizon::Steps(2),
            TimeMode::Continuous => Horizon::Times(&h),
        };
        assert_eq!(
            simulate(&back, &[0.3, 0.3], horizon()).unwrap(),
            simulate(&m, &[0.3, 0.3], horizon()).unwrap()
        );
    }
}

#[test]
fn projection_decoder_reads_state_coordinates() {
    let mut spec = ModelSpec::new(2, 4);
    spec.left_inverse = LeftInverseKind::Projection;
    let m = KoopmanModel::<f64>::init(&spec, Scaler::identity(2), 0).unwrap();
    let z = Mat::from_vec(4, 1, vec![0.25, -0.5, 9.0, 9.0]);
    assert_eq!(m.phi_left_value(&z).unwrap().into_vec(), vec![0.25, -0.5]);
    // zero last layer: the lift starts as C x
    let x = Mat::from_vec(2, 1, vec![0.7, -0.1]);
    assert_eq!(m.phi_value(&x).unwrap().into_vec(), vec![0.7, -0.1, 0.0, 0.0]);
}
