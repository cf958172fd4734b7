//! Shared helpers for the integration suites: an independent central
//! finite-difference gradient oracle and random tensor builders.
#![allow(dead_code)]

pub mod gradchecks;

use episodica::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform random tensor with entries in `lo..hi`.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Evaluate `build` as a scalar function of a fresh leaf holding `x`.
pub fn eval_scalar(build: &dyn Fn(&Tape, Var) -> Var, x: &Tensor) -> f64 {
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = build(&tape, v);
    tape.value(loss).item() as f64
}

/// Central finite differences of `build` at `x`, one coordinate at a time.
pub fn finite_diff(build: &dyn Fn(&Tape, Var) -> Var, x: &Tensor, eps: f32) -> Tensor {
    let mut grad = vec![0.0f32; x.len()];
    for i in 0..x.len() {
        let bump = |delta: f32| {
            let mut data = x.data().to_vec();
            data[i] += delta;
            Tensor::new(x.shape().to_vec(), data).unwrap()
        };
        let plus = eval_scalar(build, &bump(eps));
        let minus = eval_scalar(build, &bump(-eps));
        grad[i] = ((plus - minus) / (2.0 * eps as f64)) as f32;
    }
    Tensor::new(x.shape().to_vec(), grad).unwrap()
}

/// Infinity-norm relative error between an analytic and a reference
/// gradient.
pub fn rel_error(got: &Tensor, want: &Tensor) -> f64 {
    let scale = want
        .data()
        .iter()
        .chain(got.data())
        .map(|&v| (v as f64).abs())
        .fold(0.0f64, f64::max)
        .max(1e-6);
    got.data()
        .iter()
        .zip(want.data())
        .map(|(&g, &w)| ((g as f64) - (w as f64)).abs())
        .fold(0.0f64, f64::max)
        / scale
}

/// Assert the tape gradient of `build` at `x` matches central finite
/// differences within `tol` (relative, infinity norm).
pub fn check_grad(name: &str, build: &dyn Fn(&Tape, Var) -> Var, x: &Tensor, tol: f64) {
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = build(&tape, v);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.wrt(v);
    let numeric = finite_diff(build, x, 1e-2);
    let err = rel_error(&analytic, &numeric);
    assert!(err < tol, "{name}: gradient relative error {err:.3e} (tolerance {tol:.0e})");
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
