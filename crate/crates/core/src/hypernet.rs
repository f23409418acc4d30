//! Geometry conditioning vector and the two-layer hypernetwork that maps it
//! to FiLM scales and shifts.

use hyperfed_tensor::{Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::film::{FiLMParams, FilmVars, SiteLayout};
use crate::nets::fan_in_normal;
use crate::physics::FanBeamGeometry;

pub const GEOMETRY_DIM: usize = 7;

/// Elements normalized in the log domain: view count, bin count, intensity.
pub const LOG_SCALED: [bool; GEOMETRY_DIM] = [true, true, false, false, false, false, true];

pub const GEOMETRY_NAMES: [&str; GEOMETRY_DIM] = [
    "n_views",
    "n_bins",
    "pixel_length_mm",
    "bin_length_mm",
    "source_to_center_mm",
    "detector_to_center_mm",
    "incident_intensity",
];

/// Per-element `(min, max)` of the raw parameters, shared by every
/// institution of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryBounds {
    pub min: [f64; GEOMETRY_DIM],
    pub max: [f64; GEOMETRY_DIM],
}

impl GeometryBounds {
    pub fn new(min: [f64; GEOMETRY_DIM], max: [f64; GEOMETRY_DIM]) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..GEOMETRY_DIM {
            let (lo, hi) = (self.min[k], self.max[k]);
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(config_err(format!(
                    "bounds for {} are invalid: ({lo}, {hi})",
                    GEOMETRY_NAMES[k]
                )));
            }
            if LOG_SCALED[k] && lo <= 0.0 {
                return Err(config_err(format!(
                    "log-scaled bound for {} must be positive, got {lo}",
                    GEOMETRY_NAMES[k]
                )));
            }
        }
        Ok(())
    }

    /// Elementwise union over the given acquisitions.
    pub fn from_geometries<'a>(geoms: impl IntoIterator<Item = &'a FanBeamGeometry>) -> Result<Self> {
        let mut min = [f64::INFINITY; GEOMETRY_DIM];
        let mut max = [f64::NEG_INFINITY; GEOMETRY_DIM];
        let mut any = false;
        for g in geoms {
            any = true;
            for (k, v) in g.raw_vector().into_iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        if !any {
            return Err(config_err("no geometries to derive bounds from"));
        }
        Self::new(min, max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryVector {
    values: [f64; GEOMETRY_DIM],
}

impl GeometryVector {
    pub fn values(&self) -> &[f64; GEOMETRY_DIM] {
        &self.values
    }
}

/// Min-max normalization to `[0, 1]`, after a logarithm for the
/// large-magnitude elements. An element whose bounds coincide carries no
/// information and encodes to 0. Values outside the bounds are rejected.
pub fn encode_geometry(raw: &[f64; GEOMETRY_DIM], bounds: &GeometryBounds) -> Result<GeometryVector> {
    bounds.validate()?;
    let mut values = [0.0; GEOMETRY_DIM];
    for k in 0..GEOMETRY_DIM {
        let (lo, hi, v) = (bounds.min[k], bounds.max[k], raw[k]);
        if !(lo..=hi).contains(&v) {
            return Err(Error::Range(format!(
                "{} = {v} outside bounds [{lo}, {hi}]",
                GEOMETRY_NAMES[k]
            )));
        }
        if lo == hi {
            continue;
        }
        values[k] = if LOG_SCALED[k] {
            (v.ln() - lo.ln()) / (hi.ln() - lo.ln())
        } else {
            (v - lo) / (hi - lo)
        };
    }
    Ok(GeometryVector { values })
}

/// Hypernetwork weights: `7 -> hidden` (rectified) `-> film width`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl<T: Real> HyperParams<T> {
    /// Fan-in scaled first layer; zero second layer, so the initial
    /// modulation is the identity.
    pub fn init<R: Rng>(hidden: usize, layout: &SiteLayout, rng: &mut R) -> Result<Self> {
        if hidden == 0 {
            return Err(config_err("hypernetwork hidden width must be positive"));
        }
        let out = layout.film_width();
        Ok(Self {
            w1: fan_in_normal(&[hidden, GEOMETRY_DIM], GEOMETRY_DIM, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[out, hidden]),
            b2: Tensor::zeros(&[out]),
        })
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn output_width(&self) -> usize {
        self.b2.len()
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> HyperVars {
        HyperVars {
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Records the hypernetwork on `tape`; per site the output holds the scale
/// residual then the shift, and the scale is `1 + residual`.
pub fn hyper_forward_tape<T: Real>(
    tape: &mut Tape<T>,
    xi: &HyperVars,
    g: &GeometryVector,
    layout: &SiteLayout,
) -> Result<FilmVars> {
    let w2_shape = tape.value(xi.w2).shape().to_vec();
    if w2_shape.first() != Some(&layout.film_width()) {
        return Err(dim_err(format!(
            "hypernetwork emits {:?} values, layout needs {}",
            w2_shape.first(),
            layout.film_width()
        )));
    }
    let gv = Tensor::new(&[1, GEOMETRY_DIM], g.values.iter().map(|&v| T::of(v)).collect())?;
    let x = tape.constant(gv);
    let h = tape.linear(x, xi.w1, xi.b1)?;
    let h = tape.relu(h)?;
    let out = tape.linear(h, xi.w2, xi.b2)?;
    let mut sites = Vec::with_capacity(layout.len());
    let mut off = 0;
    for &c in layout.sites() {
        let raw_gamma = tape.slice(out, off, c)?;
        let gamma = tape.add_scalar(raw_gamma, T::one())?;
        let beta = tape.slice(out, off + c, c)?;
        sites.push((gamma, beta));
        off += 2 * c;
    }
    Ok(FilmVars(sites))
}

/// Eager evaluation of the hypernetwork.
pub fn hyper_forward<T: Real>(g: &GeometryVector, xi: &HyperParams<T>, layout: &SiteLayout) -> Result<FiLMParams<T>> {
    let mut tape = Tape::new();
    let vars = xi.register(&mut tape, false);
    let film = hyper_forward_tape(&mut tape, &vars, g, layout)?;
    Ok(film.values(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_bounds_and_width_mismatch() {
        let raw = [100.0, 50.0, 1.0, 1.0, 300.0, 300.0, 1e5];
        let b = GeometryBounds::new(raw, raw).unwrap();
        assert_eq!(encode_geometry(&raw, &b).unwrap().values(), &[0.0; 7]);
        let mut bad = b.clone();
        bad.min[2] = 2.0;
        assert!(bad.validate().is_err());

        let layout = SiteLayout(vec![3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xi = HyperParams::<f64>::init(8, &layout, &mut rng).unwrap();
        let g = encode_geometry(&raw, &b).unwrap();
        assert!(matches!(
            hyper_forward(&g, &xi, &SiteLayout(vec![3])),
            Err(Error::Dimension(_))
        ));
    }
}
