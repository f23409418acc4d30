//! Central finite-difference checks for every differentiable operation.

use std::sync::Arc;

use hyperfed_tensor::{LinearMap, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay out of the stencil.
fn random_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn eval(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).data()[0]
}

/// Worst relative error between analytic and central-difference gradients,
/// taken per input tensor over the whole gradient vector.
fn max_rel_err(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            *slot = (eval(build, &plus) - eval(build, &minus)) / (2.0 * H);
        }
        let diff: f64 = analytic[k]
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic[k]
            .norm()
            .max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt())
            .max(1e-12);
        worst = worst.max(diff / scale);
    }
    worst
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let build: Box<Build> = Box::new(|t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 0)?;
        t.sum(y)
    });
    let err = max_rel_err(&*build, &[x, k, b]);
    assert!(err < 1e-4, "conv2d rel err {err}");
}

#[test]
fn strided_padded_conv2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 7, 6], &mut rng);
    let k = random(&[2, 3, 3, 3], &mut rng);
    let b = random(&[2], &mut rng);
    let w = random(&[2, 2, 4, 3], &mut rng);
    let build: Box<Build> = Box::new(move |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv)?;
        t.sum(p)
    });
    let err = max_rel_err(&*build, &[x, k, b]);
    assert!(err < 1e-4, "strided conv2d rel err {err}");
}

#[test]
fn mse_gradient_is_two_residual_over_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random(&[4, 5], &mut rng);
    let target = random(&[4, 5], &mut rng);
    let tc = target.clone();
    let build: Box<Build> = Box::new(move |t, v| {
        let tv = t.constant(tc.clone());
        t.mse(v[0], tv)
    });
    let err = max_rel_err(&*build, &[p.clone()]);
    assert!(err < 1e-5, "mse rel err {err}");

    let mut tape = Tape::new();
    let pv = tape.param(p.clone());
    let tv = tape.constant(target.clone());
    let l = tape.mse(pv, tv).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(pv);
    for ((gi, pi), ti) in g.data().iter().zip(p.data()).zip(target.data()) {
        assert!((gi - 2.0 * (pi - ti) / 20.0).abs() < 1e-15);
    }
}

#[test]
fn film_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 4, 4], &mut rng);
    let g = random(&[3], &mut rng);
    let b = random(&[3], &mut rng);
    let w = random(&[2, 3, 4, 4], &mut rng);
    let build: Box<Build> = Box::new(move |t, v| {
        let y = t.film(v[0], v[1], v[2])?;
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv)?;
        t.sum(p)
    });
    let err = max_rel_err(&*build, &[x, g, b]);
    assert!(err < 1e-4, "film rel err {err}");
}

#[test]
fn joint_gradient_reaches_modulation_and_feature_parameters() {
    // loss = mse(gamma * f(x) + beta, t) with f a conv layer
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 1, 6, 6], &mut rng);
    let target = random(&[1, 2, 6, 6], &mut rng);
    let k = random(&[2, 1, 3, 3], &mut rng);
    let kb = random(&[2], &mut rng);
    let gamma = random(&[2], &mut rng);
    let beta = random(&[2], &mut rng);
    let build: Box<Build> = Box::new(move |t, v| {
        let xv = t.constant(x.clone());
        let f = t.conv2d(xv, v[0], v[1], 1, 1)?;
        let m = t.film(f, v[2], v[3])?;
        let tv = t.constant(target.clone());
        t.mse(m, tv)
    });
    let inputs = [k, kb, gamma, beta];
    let err = max_rel_err(&*build, &inputs);
    assert!(err < 1e-4, "joint rel err {err}");

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    for v in vars {
        assert!(tape.grad(v).norm() > 0.0);
    }
}

#[test]
fn linear_relu_slice_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 7], &mut rng);
    let w1 = random_off_zero(&[5, 7], &mut rng);
    let b1 = random_off_zero(&[5], &mut rng);
    let w2 = random(&[6, 5], &mut rng);
    let b2 = random(&[6], &mut rng);
    let build: Box<Build> = Box::new(|t, v| {
        let h = t.linear(v[0], v[1], v[2])?;
        let h = t.relu(h)?;
        let o = t.linear(h, v[3], v[4])?;
        let a = t.slice(o, 1, 4)?;
        let a = t.add_scalar(a, 1.0)?;
        let b = t.slice(o, 7, 3)?;
        let sa = t.sum_sq(a)?;
        let sb = t.mean(b)?;
        let l = t.add(sa, sb)?;
        t.scale(l, 0.5)
    });
    let err = max_rel_err(&*build, &[x, w1, b1, w2, b2]);
    assert!(err < 1e-4, "linear chain rel err {err}");
}

#[test]
fn elementwise_and_scalar_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let s = random(&[1], &mut rng);
    let build: Box<Build> = Box::new(|t, v| {
        let p = t.mul(v[0], v[1])?;
        let q = t.sub(p, v[0])?;
        let r = t.mul_scalar_var(q, v[2])?;
        let r = t.reshape(r, &[12])?;
        t.sum_sq(r)
    });
    let err = max_rel_err(&*build, &[a, b, s]);
    assert!(err < 1e-4, "elementwise rel err {err}");
}

/// Dense matrix wrapped as an operator with an explicit adjoint.
struct Dense {
    m: Tensor<f64>,
    rows: usize,
    cols: usize,
}

impl LinearMap<f64> for Dense {
    fn apply(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut y = vec![0.0; self.rows];
        for (r, yv) in y.iter_mut().enumerate() {
            for c in 0..self.cols {
                *yv += self.m.data()[r * self.cols + c] * x.data()[c];
            }
        }
        Tensor::new(&[self.rows], y)
    }

    fn apply_adjoint(&self, y: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut x = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (c, xv) in x.iter_mut().enumerate() {
                *xv += self.m.data()[r * self.cols + c] * y.data()[r];
            }
        }
        Tensor::new(&[self.cols], x)
    }
}

#[test]
fn linear_map_backward_uses_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let op = Arc::new(Dense {
        m: random(&[4, 6], &mut rng),
        rows: 4,
        cols: 6,
    });
    let y = random(&[4], &mut rng);
    let x = random(&[6], &mut rng);
    let build: Box<Build> = Box::new(move |t, v| {
        let ax = t.linear_map(v[0], op.clone())?;
        let yv = t.constant(y.clone());
        let r = t.sub(ax, yv)?;
        let l = t.sum_sq(r)?;
        t.scale(l, 0.5)
    });
    let err = max_rel_err(&*build, &[x]);
    assert!(err < 1e-6, "linear_map rel err {err}");
}
