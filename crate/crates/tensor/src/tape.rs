//! Explicit recording tape for reverse-mode differentiation.
//!
//! Every differentiable operation appends a node holding its forward value and
//! the indices of its operands. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid topological order because operands always
//! precede their consumers.

use std::sync::Arc;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A linear operator whose adjoint is supplied explicitly, so it can sit
/// inside a recorded graph (e.g. a projector and its backprojector).
pub trait LinearMap<T: Real>: Send + Sync {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn apply_adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    Mse(Var, Var),
    Reshape(Var),
    Slice(Var, usize),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Film {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Map(Var, Arc<dyn LinearMap<T>>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Tensor<T>>,
}

/// Owns one computation graph. Not shared between threads; each simulated
/// client builds its own.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) {
    match slot {
        Some(g) => {
            for (a, &b) in g.data_mut().iter_mut().zip(contrib.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    /// Clears accumulated gradients so `backward` may run again on the same graph.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; zeros when `v` was unreachable.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, deps: &[Var], op: Op<T>) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = self.any_grad(deps);
        Ok(self.push(value, rg, op))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("congruent operands")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.record("add", v, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.record("sub", v, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.record("mul", v, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.record("scale", v, &[a], Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.record("add_scalar", v, &[a], Op::AddScalar(a))
    }

    /// `x * s` where `s` is a single-element variable.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar_var", &[1], self.value(s).shape()));
        }
        let c = self.value(s).data()[0];
        let v = self.value(x).map(|e| e * c);
        self.record("mul_scalar_var", v, &[x, s], Op::MulScalarVar(x, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.record("relu", v, &[a], Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.record("sum", v, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        self.record("mean", v, &[a], Op::Mean(a))
    }

    /// Sum of squared entries.
    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().map(|&x| x * x).sum());
        self.record("sum_sq", v, &[a], Op::SumSq(a))
    }

    /// Mean squared error without the 1/2 factor; only `pred` is differentiated
    /// unless `target` also requires grad.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = T::of(p.len() as f64);
        let s: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        self.record("mse_loss", Tensor::scalar(s / n), &[pred, target], Op::Mse(pred, target))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.record("reshape", v, &[a], Op::Reshape(a))
    }

    /// Contiguous range of the flattened values, as a 1-D tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if len == 0 || start + len > t.len() {
            return Err(TensorError::Contract(format!(
                "slice [{start}, {}) out of range for {} values",
                start + len,
                t.len()
            )));
        }
        let v = Tensor::new(&[len], t.data()[start..start + len].to_vec())?;
        self.record("slice", v, &[a], Op::Slice(a, start))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::infer(
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
            stride,
            padding,
        )?;
        check_finite("conv2d", self.value(input))?;
        let v = conv2d_forward(&geom, self.value(input), self.value(kernel), self.value(bias));
        self.record(
            "conv2d",
            v,
            &[input, kernel, bias],
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        )
    }

    /// Per-channel affine modulation `gamma[c] * x[n, c, ..] + beta[c]`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(shape_err("film", &[0, 0], &xs));
        }
        let c = xs[1];
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(shape_err("film", &[c], self.value(p).shape()));
            }
        }
        let plane: usize = xs[2..].iter().product();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = g[ch] * *v + b[ch];
            }
        }
        self.record("film", out, &[x, gamma, beta], Op::Film { x, gamma, beta })
    }

    /// Fully connected layer: `x[B, in] * W[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape_err("linear", &[0, xs.get(1).copied().unwrap_or(0)], ws));
        }
        if bs != [ws[0]] {
            return Err(shape_err("linear bias", &[ws[0]], bs));
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[batch, fan_out]);
        for row in out.data_mut().chunks_mut(fan_out) {
            row.copy_from_slice(self.value(bias).data());
        }
        T::gemm(
            batch,
            fan_in,
            fan_out,
            T::one(),
            self.value(x).data(),
            (fan_in, 1),
            self.value(weight).data(),
            (1, fan_in),
            T::one(),
            out.data_mut(),
            (fan_out, 1),
        );
        self.record("linear", out, &[x, weight, bias], Op::Linear { x, weight, bias })
    }

    /// Applies a linear operator; the backward pass uses its adjoint.
    pub fn linear_map(&mut self, x: Var, map: Arc<dyn LinearMap<T>>) -> Result<Var> {
        let v = map.apply(self.value(x))?;
        self.record("linear_map", v, &[x], Op::Map(x, map))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward called twice without zero_grad".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            check_finite("backward", &g)?;
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut send = |v: Var, t: Tensor<T>| {
            if self.wants(v) {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    send(*a, zip(g, vb, |x, y| x * y));
                }
                if self.wants(*b) {
                    send(*b, zip(g, va, |x, y| x * y));
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|x| x * *c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.value(*a).shape();
                send(*a, g.clone().reshape(shape)?);
            }
            Op::MulScalarVar(x, s) => {
                let c = self.value(*s).data()[0];
                if self.wants(*x) {
                    send(*x, g.map(|v| v * c));
                }
                if self.wants(*s) {
                    send(*s, Tensor::scalar(g.dot(self.value(*x))?));
                }
            }
            Op::Relu(a) => {
                let out = &self.nodes[i].value;
                send(*a, zip(g, out, |d, y| if y > T::zero() { d } else { T::zero() }));
            }
            Op::Sum(a) => send(*a, Tensor::full(self.value(*a).shape(), g.data()[0])),
            Op::Mean(a) => {
                let t = self.value(*a);
                send(*a, Tensor::full(t.shape(), g.data()[0] / T::of(t.len() as f64)));
            }
            Op::SumSq(a) => {
                let two = T::of(2.0) * g.data()[0];
                send(*a, self.value(*a).map(|x| two * x));
            }
            Op::Mse(p, t) => {
                let (vp, vt) = (self.value(*p), self.value(*t));
                let k = T::of(2.0) * g.data()[0] / T::of(vp.len() as f64);
                let d = zip(vp, vt, |a, b| k * (a - b));
                if self.wants(*t) {
                    send(*t, d.map(|x| -x));
                }
                send(*p, d);
            }
            Op::Slice(a, start) => {
                let src = self.value(*a);
                let mut full = Tensor::zeros(src.shape());
                full.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                send(*a, full);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut gi = self.wants(*input).then(|| Tensor::zeros(self.value(*input).shape()));
                let mut gk = self.wants(*kernel).then(|| Tensor::zeros(self.value(*kernel).shape()));
                let mut gb = self.wants(*bias).then(|| Tensor::zeros(self.value(*bias).shape()));
                conv2d_backward(
                    geom,
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    gi.as_mut(),
                    gk.as_mut(),
                    gb.as_mut(),
                );
                for (v, t) in [(*input, gi), (*kernel, gk), (*bias, gb)] {
                    if let Some(t) = t {
                        send(v, t);
                    }
                }
            }
            Op::Film { x, gamma, beta } => {
                let vx = self.value(*x);
                let c = vx.shape()[1];
                let plane: usize = vx.shape()[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut dx = g.clone();
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (idx, (dchunk, xchunk)) in dx
                    .data_mut()
                    .chunks_mut(plane)
                    .zip(vx.data().chunks(plane))
                    .enumerate()
                {
                    let ch = idx % c;
                    for (d, &xv) in dchunk.iter_mut().zip(xchunk) {
                        dg[ch] = dg[ch] + *d * xv;
                        db[ch] = db[ch] + *d;
                        *d = *d * gam[ch];
                    }
                }
                send(*x, dx);
                send(*gamma, Tensor::new(&[c], dg)?);
                send(*beta, Tensor::new(&[c], db)?);
            }
            Op::Linear { x, weight, bias } => {
                let (vx, vw) = (self.value(*x), self.value(*weight));
                let (batch, fan_in, fan_out) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(vx.shape());
                    T::gemm(
                        batch,
                        fan_out,
                        fan_in,
                        T::one(),
                        g.data(),
                        (fan_out, 1),
                        vw.data(),
                        (fan_in, 1),
                        T::zero(),
                        dx.data_mut(),
                        (fan_in, 1),
                    );
                    send(*x, dx);
                }
                if self.wants(*weight) {
                    let mut dw = Tensor::zeros(vw.shape());
                    T::gemm(
                        fan_out,
                        batch,
                        fan_in,
                        T::one(),
                        g.data(),
                        (1, fan_out),
                        vx.data(),
                        (fan_in, 1),
                        T::zero(),
                        dw.data_mut(),
                        (fan_in, 1),
                    );
                    send(*weight, dw);
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); fan_out];
                    for row in g.data().chunks(fan_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    send(*bias, Tensor::new(&[fan_out], db)?);
                }
            }
            Op::Map(x, map) => {
                let dx = map.apply_adjoint(g)?;
                let expected = self.value(*x).shape();
                if dx.shape() != expected {
                    return Err(shape_err("linear_map adjoint", expected, dx.shape()));
                }
                send(*x, dx);
            }
        }
        Ok(())
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("congruent operands")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 1, 4, 5], |i| i as f64 * 0.3 - 1.0));
        let k = tape.constant(t(&[1, 1, 1, 1], vec![1.0]));
        let b = tape.constant(t(&[1], vec![0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn ones_kernel_on_constant_input_gives_nine_c() {
        let c = 0.37;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 6, 6], c));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(t(&[1], vec![0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
        for v in tape.value(y).data() {
            assert!((v - 9.0 * c).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_output_extent_follows_stride_and_padding() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 9, 8]));
        let k = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 5, 4]);
    }

    #[test]
    fn conv_rejects_bad_shapes_and_non_finite_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, k, b, 1, 0), Err(TensorError::Shape { .. })));

        let big = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
        let k2 = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
        assert!(matches!(tape.conv2d(x, k2, b, 1, 1), Err(TensorError::Shape { .. })));
        assert!(tape.conv2d(big, k2, b, 1, 0).is_ok());

        let mut bad = Tensor::zeros(&[1, 2, 4, 4]);
        bad.data_mut()[3] = f64::NAN;
        let xb = tape.constant(bad);
        let k3 = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(matches!(tape.conv2d(xb, k3, b, 1, 0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], vec![0.0, 0.0]));
        let b = tape.constant(t(&[2], vec![2.0, 2.0]));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).data(), &[4.0]);
        let same = tape.mse(b, b).unwrap();
        assert_eq!(tape.value(same).data(), &[0.0]);
        let c = tape.constant(t(&[3], vec![0.0; 3]));
        assert!(matches!(tape.mse(a, c), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn detached_and_unreachable_leaves_get_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], vec![1.0, 2.0]));
        let unused = tape.param(t(&[3], vec![1.0, 1.0, 1.0]));
        let d = tape.detach(x);
        let p = tape.mul(x, d).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 2.0]);
        assert_eq!(tape.grad(d).data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(TensorError::Contract(_))));
        tape.zero_grad();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn film_identity_and_degenerate_scale() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64).sin()));
        let ones = tape.constant(Tensor::full(&[3], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[3]));
        let y = tape.film(x, ones, zeros).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let b = tape.constant(t(&[3], vec![0.1, 0.2, 0.3]));
        let z = tape.film(x, zeros, b).unwrap();
        for (i, chunk) in tape.value(z).data().chunks(4).enumerate() {
            assert!(chunk.iter().all(|&v| v == [0.1, 0.2, 0.3][i % 3]));
        }
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.film(x, bad, b).is_err());
    }

    proptest! {
        #[test]
        fn backward_is_linear_in_the_loss(
            xs in proptest::collection::vec(-2.0f64..2.0, 6),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let x0 = t(&[2, 3], xs);
            let grad_of = |ca: f64, cb: f64| {
                let mut tape = Tape::new();
                let x = tape.param(x0.clone());
                let l1 = tape.sum_sq(x).unwrap();
                let sq = tape.mul(x, x).unwrap();
                let cube = tape.mul(sq, x).unwrap();
                let l2 = tape.sum(cube).unwrap();
                let s1 = tape.scale(l1, ca).unwrap();
                let s2 = tape.scale(l2, cb).unwrap();
                let l = tape.add(s1, s2).unwrap();
                tape.backward(l).unwrap();
                tape.grad(x)
            };
            let combined = grad_of(a, b);
            let g1 = grad_of(1.0, 0.0);
            let g2 = grad_of(0.0, 1.0);
            for ((c, u), v) in combined.data().iter().zip(g1.data()).zip(g2.data()) {
                prop_assert!((c - (a * u + b * v)).abs() <= 1e-12 * (1.0 + c.abs()));
            }
        }

        #[test]
        fn identical_inputs_give_bit_identical_gradients(seed in 0u64..1000) {
            let x0 = Tensor::from_fn(&[1, 2, 5, 5], |i| ((i as u64 * 31 + seed) % 17) as f32 / 17.0);
            let k0 = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i as u64 * 7 + seed) % 13) as f32 / 13.0 - 0.5);
            let run = || {
                let mut tape = Tape::new();
                let x = tape.param(x0.clone());
                let k = tape.param(k0.clone());
                let b = tape.param(Tensor::zeros(&[3]));
                let y = tape.conv2d(x, k, b, 1, 1).unwrap();
                let y = tape.relu(y).unwrap();
                let l = tape.sum_sq(y).unwrap();
                tape.backward(l).unwrap();
                (tape.value(l).clone(), tape.grad(x), tape.grad(k))
            };
            prop_assert_eq!(run(), run());
        }
    }
}
