//! Feature-wise affine modulation and the injection-site layout shared by
//! the imaging networks and the hypernetwork.

use hyperfed_tensor::{Real, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Channel count of every injection site, in forward order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteLayout(pub Vec<usize>);

impl SiteLayout {
    pub fn sites(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Hypernetwork output width: a scale and a shift per channel per site.
    pub fn film_width(&self) -> usize {
        2 * self.0.iter().sum::<usize>()
    }
}

/// `(gamma, beta)` per injection site.
#[derive(Debug, Clone, PartialEq)]
pub struct FiLMParams<T> {
    pub sites: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> FiLMParams<T> {
    pub fn identity(layout: &SiteLayout) -> Self {
        Self {
            sites: layout
                .sites()
                .iter()
                .map(|&c| (Tensor::full(&[c], T::one()), Tensor::zeros(&[c])))
                .collect(),
        }
    }

    pub fn check(&self, layout: &SiteLayout) -> Result<()> {
        if self.sites.len() != layout.len() {
            return Err(dim_err(format!(
                "{} FiLM sites for a network with {}",
                self.sites.len(),
                layout.len()
            )));
        }
        for (i, ((g, b), &c)) in self.sites.iter().zip(layout.sites()).enumerate() {
            if g.shape() != [c] || b.shape() != [c] {
                return Err(dim_err(format!("FiLM site {i} expects {c} channels")));
            }
        }
        Ok(())
    }

    /// Records the modulation as constants (no gradient flows into it).
    pub fn register(&self, tape: &mut Tape<T>) -> FilmVars {
        FilmVars(
            self.sites
                .iter()
                .map(|(g, b)| (tape.constant(g.clone()), tape.constant(b.clone())))
                .collect(),
        )
    }
}

/// Tape handles of `(gamma, beta)` per site.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmVars(pub Vec<(Var, Var)>);

impl FilmVars {
    pub fn site(&self, i: usize) -> Result<(Var, Var)> {
        self.0
            .get(i)
            .copied()
            .ok_or_else(|| dim_err(format!("missing FiLM site {i}")))
    }

    pub fn values<T: Real>(&self, tape: &Tape<T>) -> FiLMParams<T> {
        FiLMParams {
            sites: self
                .0
                .iter()
                .map(|&(g, b)| (tape.value(g).clone(), tape.value(b).clone()))
                .collect(),
        }
    }
}

fn shape_to_dim(e: TensorError) -> Error {
    match e {
        TensorError::Shape { .. } => dim_err(e.to_string()),
        other => other.into(),
    }
}

/// `out[n, c, ..] = gamma[c] * feature[n, c, ..] + beta[c]` on the tape.
pub fn film_modulate<T: Real>(tape: &mut Tape<T>, feature: Var, gamma: Var, beta: Var) -> Result<Var> {
    tape.film(feature, gamma, beta).map_err(shape_to_dim)
}

/// Eager version of [`film_modulate`] on `[N, C, H, W]` tensors.
pub fn film_apply<T: Real>(feature: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, g, b) = (
        tape.constant(feature.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let y = film_modulate(&mut tape, x, g, b)?;
    Ok(tape.value(y).clone())
}
