use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Bias-corrected Adam. Moment buffers are created lazily on the first step
/// and must stay congruent with the parameter list afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step_count: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(learning_rate: T) -> Self {
        Self {
            learning_rate,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor<T>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor<T>] {
        &self.second_moment
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::Contract(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err("adam_step", p.shape(), g.shape()));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != grads.len()
            || self
                .first_moment
                .iter()
                .zip(grads)
                .any(|(m, g)| m.shape() != g.shape())
        {
            return Err(TensorError::Contract(
                "adam: parameter layout changed between steps".into(),
            ));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
