#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skel::data::{Scaler, Trajectory};
use skel::embed::{KoopmanModel, Method, ModelSpec, TimeMode};
use skel::linalg::Mat;
use skel::tape::{Elementwise, Tape, Var};
use skel::train::{evaluate_objective, objective, Prepared, TrainConfig};

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Largest relative deviation between reverse-mode and central-difference
/// gradients of `sum(W .* f(inputs))`.
pub fn worst_relative_error(f: &Build, inputs: &[Mat<f64>], rng: &mut ChaCha8Rng) -> f64 {
    let value = |xs: &[Mat<f64>], w: &Mat<f64>| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).hadamard(w).unwrap().sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let w = Mat::from_fn(out.rows(), out.cols(), |_, _| rng.random_range(-1.0..1.0));
    let wv = tape.constant(w.clone());
    let prod = tape.hadamard(out, wv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let g = tape.grad(vars[k]);
        for i in 0..x.len() {
            let mut xp = inputs.to_vec();
            let mut xm = inputs.to_vec();
            xp[k].as_mut_slice()[i] += h;
            xm[k].as_mut_slice()[i] -= h;
            let fd = (value(&xp, &w) - value(&xm, &w)) / (2.0 * h);
            let an = g.as_slice()[i];
            worst = worst.max((an - fd).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
    }
    worst
}

pub fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
    Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Entries kept at least `gap` away from zero so ReLU kinks stay outside the stencil.
pub fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize, gap: f64) -> Mat<f64> {
    Mat::from_fn(r, c, |_, _| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Worst relative error over the standard primitive set for one seed.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let cases: Vec<(&'static str, Box<Build>, Vec<(usize, usize)>)> = vec![
        ("matmul", Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()), vec![(3, 4), (4, 2)]),
        ("add", Box::new(|t, v| t.add(v[0], v[1]).unwrap()), vec![(3, 3), (3, 3)]),
        ("sub", Box::new(|t, v| t.sub(v[0], v[1]).unwrap()), vec![(2, 5), (2, 5)]),
        ("hadamard", Box::new(|t, v| t.hadamard(v[0], v[1]).unwrap()), vec![(3, 2), (3, 2)]),
        ("scale", Box::new(|t, v| t.scale(v[0], -1.7)), vec![(3, 3)]),
        ("transpose", Box::new(|t, v| t.transpose(v[0])), vec![(2, 4)]),
        ("frobenius_sq", Box::new(|t, v| t.frobenius_sq(v[0])), vec![(3, 4)]),
        ("sum", Box::new(|t, v| t.sum(v[0])), vec![(4, 2)]),
        ("block", Box::new(|t, v| t.block(v[0], 1, 1, 2, 2).unwrap()), vec![(4, 4)]),
        ("hstack", Box::new(|t, v| t.hstack(&[v[0], v[1], v[0]]).unwrap()), vec![(3, 1), (3, 2)]),
        (
            "elementwise",
            Box::new(|t, v| t.elementwise(Elementwise::Hadamard, v[0], Some(v[1])).unwrap()),
            vec![(2, 2), (2, 2)],
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, f, shapes) in &cases {
        let inputs: Vec<Mat<f64>> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
        out.push((*name, worst_relative_error(f.as_ref(), &inputs, &mut rng)));
    }
    // inverse on a diagonally dominant, well-conditioned input
    let a = random(&mut rng, 4, 4).add(&Mat::identity(4).scale(4.0)).unwrap();
    out.push(("inverse", worst_relative_error(&|t, v| t.inverse(v[0]).unwrap(), &[a], &mut rng)));
    let x = away_from_zero(&mut rng, 3, 4, 1e-3);
    out.push(("relu", worst_relative_error(&|t, v| t.relu(v[0]), &[x], &mut rng)));
    out
}

fn toy_data(rng: &mut ChaCha8Rng, steps: usize) -> Vec<Prepared<f64>> {
    (0..2)
        .map(|k| {
            let states: Vec<Vec<f64>> = (0..=steps).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let times = (0..=steps).map(|t| 0.5 * t as f64 + 0.1 * (t * t) as f64).collect();
            Prepared::from_trajectory(&Trajectory::new(format!("toy{k}"), states, Some(times)).unwrap()).unwrap()
        })
        .collect()
}

pub fn objective_gradient_error(method: Method, time_mode: TimeMode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = toy_data(&mut rng, 3);
    let cfg = TrainConfig {
        method,
        time_mode,
        alpha: 2.0,
        ridge: 1e-3,
        embedding_dim: 4,
        hidden_dims: vec![6],
        ..Default::default()
    };
    let mut spec: ModelSpec = cfg.model_spec(2);
    spec.op_init_bound = 0.5;
    let mut model = KoopmanModel::<f64>::init(&spec, Scaler::identity(2), 17).unwrap();
    for p in model.params_mut() {
        for v in p.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
    }

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let obj = objective(&mut tape, &model, &vars, &data, &cfg).unwrap();
    tape.backward(obj.total).unwrap();
    let grads: Vec<Mat<f64>> = vars.all().iter().map(|&v| tape.grad(v)).collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let count = model.params_mut().len();
    assert_eq!(count, grads.len());
    for k in 0..count {
        let len = grads[k].len();
        for i in 0..len {
            let mut plus = model.clone();
            plus.params_mut()[k].as_mut_slice()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[k].as_mut_slice()[i] -= h;
            let fp = evaluate_objective(&plus, &data, &cfg).unwrap().0;
            let fm = evaluate_objective(&minus, &data, &cfg).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads[k].as_slice()[i];
            worst = worst.max((an - fd).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
    }
    worst
}

/// `exp(t A)` by a truncated Taylor series.
pub fn taylor_expm(a: &Mat<f64>, t: f64, terms: usize) -> Mat<f64> {
    let at = a.scale(t);
    let mut sum = Mat::identity(a.rows());
    let mut term = Mat::identity(a.rows());
    for k in 1..terms {
        term = term.mul_nn(&at).scale(1.0 / k as f64);
        sum.add_assign(&term);
    }
    sum
}
