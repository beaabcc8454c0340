#![allow(dead_code)]

pub mod gradcheck;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stagewise::autodiff::{ParamStore, Tape, Var};
use stagewise::data::{synthesize_cohort, SubjectRecord, SynthConfig};
use stagewise::model::ModelConfig;
use stagewise::TrainConfig;

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Reduces `out` to a scalar through a fixed random projection.
pub fn project(tape: &mut Tape<f64>, out: Var, weights: &Array2<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let m = tape.mul(out, w);
    tape.sum(m)
}

/// Worst relative error between back-propagated and central-difference
/// gradients over `per_param` sampled entries of every parameter.
pub fn fd_check<F>(store: &mut ParamStore<f64>, per_param: usize, seed: u64, loss: F) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    fd_check_with(store, |s| s, per_param, seed, |t, s| loss(t, s))
}

/// As [`fd_check`], for parameters held inside `state`.
///
/// Entries whose one-sided differences disagree and whose central
/// difference moves when the step shrinks sit on a kink (a ReLU or `abs`
/// switching inside the step) and are skipped; more than a quarter of
/// entries skipped counts as a failure.
pub fn fd_check_with<S, G, F>(state: &mut S, store_of: G, per_param: usize, seed: u64, loss: F) -> f64
where
    G: Fn(&mut S) -> &mut ParamStore<f64>,
    F: Fn(&mut Tape<f64>, &S) -> Var,
{
    let mut tape = Tape::new();
    let root = loss(&mut tape, state);
    let grads = tape.backward(root);
    let base = tape.scalar(root);
    // Entries far below the loss scale are compared against this floor,
    // since central differences carry rounding noise there.
    let floor = FD_FLOOR * base.abs().max(1.0);
    let mut rng = rng(seed ^ 0xfd);
    let mut worst: f64 = 0.0;
    let (mut checked, mut kinks) = (0usize, 0usize);
    let n = store_of(state).len();
    for id in 0..n {
        let (rows, cols) = store_of(state).get(id).dim();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Array2::zeros((rows, cols)));
        for _ in 0..per_param.min(rows * cols) {
            let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let orig = store_of(state).get(id)[[r, c]];
            let eval = |x: f64, state: &mut S| {
                store_of(state).get_mut(id)[[r, c]] = x;
                let mut t = Tape::new();
                let v = loss(&mut t, state);
                t.scalar(v)
            };
            let plus = eval(orig + FD_STEP, state);
            let minus = eval(orig - FD_STEP, state);
            store_of(state).get_mut(id)[[r, c]] = orig;
            checked += 1;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let (right, left) = ((plus - base) / FD_STEP, (base - minus) / FD_STEP);
            if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(floor) {
                let h = FD_STEP / 10.0;
                let fine = (eval(orig + h, state) - eval(orig - h, state)) / (2.0 * h);
                store_of(state).get_mut(id)[[r, c]] = orig;
                if (fine - numeric).abs() > 1e-6 * numeric.abs().max(floor) {
                    kinks += 1;
                    continue;
                }
            }
            let a = analytic[[r, c]];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if std::env::var("FD_DEBUG").is_ok() && err > 1e-5 {
                eprintln!("param {id} [{r},{c}] analytic {a:e} numeric {numeric:e} err {err:e}");
            }
            worst = worst.max(err);
        }
    }
    if std::env::var("FD_DEBUG").is_ok() && kinks > 0 {
        eprintln!("{kinks} of {checked} entries skipped at kinks");
    }
    if 4 * kinks > checked {
        return f64::INFINITY;
    }
    worst
}

/// A model configuration small enough for fast end-to-end tests.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_text: 64,
        adapter_hidden: vec![32],
        d_adapter: 16,
        d_common: 8,
        d_specific: 8,
        d: 16,
        volume_shape: [4, 4, 4],
        heads: 2,
        ffw_width: 32,
        ..ModelConfig::default()
    }
}

pub fn tiny_cohort(n: usize, seed: u64) -> Vec<SubjectRecord> {
    let cfg = SynthConfig {
        n_subjects: n,
        volume_shape: [4, 4, 4],
        availability: [1.0, 0.8, 0.6],
        ..SynthConfig::default()
    };
    synthesize_cohort(&cfg, seed).unwrap()
}

pub fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 3,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}
