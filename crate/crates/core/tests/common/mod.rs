#![allow(dead_code)]

use hyperfed_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> hyperfed_core::Result<Var> + 'a;

fn eval(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).data()[0]
}

/// Per-input relative error `‖analytic − numeric‖ / ‖numeric‖` of central
/// differences; inputs whose numeric gradient vanishes are compared in
/// absolute terms.
pub fn rel_errors(build: &Build, inputs: &[Tensor<f64>]) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();
    inputs
        .iter()
        .enumerate()
        .map(|(k, input)| {
            let numeric: Vec<f64> = (0..input.len())
                .map(|i| {
                    let mut plus = inputs.to_vec();
                    plus[k].data_mut()[i] += H;
                    let mut minus = inputs.to_vec();
                    minus[k].data_mut()[i] -= H;
                    (eval(build, &plus) - eval(build, &minus)) / (2.0 * H)
                })
                .collect();
            let diff = analytic[k]
                .data()
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
            if norm < 1e-12 {
                diff
            } else {
                diff / norm
            }
        })
        .collect()
}

pub fn max_rel_error(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    rel_errors(build, inputs).into_iter().fold(0.0, f64::max)
}
