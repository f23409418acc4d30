//! Shared imaging networks with FiLM injection sites: a residual
//! encoder-decoder denoiser and an unrolled gradient-descent reconstructor.

use std::sync::Arc;

use hyperfed_tensor::{LinearMap, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::film::{film_modulate, FiLMParams, FilmVars, SiteLayout};
use crate::physics::{BackprojectionOp, FanBeamGeometry, ProjectionOp, Projector};

const KERNEL: usize = 3;
const PAD: usize = 1;

/// Normal samples with standard deviation `sqrt(2 / fan_in)`.
pub(crate) fn fan_in_normal<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// Encoder-decoder denoiser: `depth` encoder convolutions, `depth - 1`
/// decoder convolutions with symmetric skips, a one-channel output
/// convolution and a global residual. Every convolution is followed by a
/// FiLM site (before the rectifier).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostProcNet {
    pub channels: usize,
    pub depth: usize,
}

/// Unrolled gradient descent: per iteration a learned step on the data
/// fidelity gradient plus a two-convolution regularizer with a FiLM site
/// after its first convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnrolledNet {
    pub iterations: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImagingNet {
    PostProc(PostProcNet),
    Unrolled(UnrolledNet),
}

/// Shared imaging weights: blocks in a fixed order plus the site layout
/// they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagingParams<T> {
    pub blocks: Vec<Tensor<T>>,
    pub layout: SiteLayout,
}

impl<T: Real> ImagingParams<T> {
    pub fn flat_len(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.blocks.iter().flat_map(|b| b.data().iter().copied()).collect()
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.blocks.iter().map(|b| tape.leaf(b.clone(), trainable)).collect()
    }

    /// True when both hold the same block shapes and layout.
    pub fn congruent(&self, other: &Self) -> bool {
        self.layout == other.layout
            && self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.shape() == b.shape())
    }
}

/// Data-fidelity operator of one acquisition with its fixed step scale
/// `0.8 / ‖A‖²`; the learned per-iteration step multiplies this scale.
#[derive(Debug, Clone)]
pub struct ReconOperator {
    pub projector: Arc<Projector>,
    pub step_scale: f64,
    forward: Arc<ProjectionOp>,
    adjoint: Arc<BackprojectionOp>,
}

pub const POWER_ITERATIONS: usize = 20;

impl ReconOperator {
    pub fn new(geom: &FanBeamGeometry) -> Result<Self> {
        let proj = Arc::new(Projector::new(geom)?);
        let norm_sq = proj.norm_sq_estimate(POWER_ITERATIONS);
        if !(norm_sq > 0.0) {
            return Err(config_err("projector norm estimate is zero"));
        }
        Ok(Self::with_step_scale(proj, 0.8 / norm_sq))
    }

    pub fn with_step_scale(projector: Arc<Projector>, step_scale: f64) -> Self {
        Self {
            forward: Arc::new(ProjectionOp::new(projector.clone())),
            adjoint: Arc::new(BackprojectionOp::new(projector.clone())),
            projector,
            step_scale,
        }
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        self.projector.geometry()
    }
}

/// One network input, batched as `[1, 1, h, w]`.
#[derive(Debug, Clone)]
pub enum NetInput<T> {
    Image(Tensor<T>),
    Sinogram {
        y: Tensor<T>,
        init: Tensor<T>,
        operator: Arc<ReconOperator>,
    },
}

fn as_batch<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape();
    match s.len() {
        2 => Ok(t.clone().reshape(&[1, 1, s[0], s[1]])?),
        4 if s[0] == 1 && s[1] == 1 => Ok(t.clone()),
        _ => Err(dim_err(format!("expected a single-channel image, got {s:?}"))),
    }
}

impl<T: Real> NetInput<T> {
    pub fn image(x: &Tensor<T>) -> Result<Self> {
        Ok(Self::Image(as_batch(x)?))
    }

    /// `init` is typically the FBP of `y`.
    pub fn sinogram(y: &Tensor<T>, init: &Tensor<T>, operator: Arc<ReconOperator>) -> Result<Self> {
        let g = operator.geometry();
        let (y, init) = (as_batch(y)?, as_batch(init)?);
        if y.shape()[2..] != [g.n_views, g.n_bins] {
            return Err(dim_err(format!(
                "sinogram {:?} does not match {} views x {} bins",
                y.shape(),
                g.n_views,
                g.n_bins
            )));
        }
        if init.shape()[2..] != [g.image_size, g.image_size] {
            return Err(dim_err(format!("initial image {:?} off the {} grid", init.shape(), g.image_size)));
        }
        Ok(Self::Sinogram { y, init, operator })
    }

    /// Spatial size of the output image.
    pub fn output_shape(&self) -> [usize; 4] {
        let t = match self {
            Self::Image(x) => x,
            Self::Sinogram { init, .. } => init,
        };
        [1, 1, t.shape()[2], t.shape()[3]]
    }
}

impl ImagingNet {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::PostProc(p) if p.channels == 0 || p.depth == 0 => {
                Err(config_err("post-processing net needs positive channels and depth"))
            }
            Self::Unrolled(u) if u.channels == 0 => Err(config_err("unrolled net needs positive channels")),
            _ => Ok(()),
        }
    }

    pub fn layout(&self) -> SiteLayout {
        match *self {
            Self::PostProc(p) => {
                let mut s = vec![p.channels; 2 * p.depth - 1];
                s.push(1);
                SiteLayout(s)
            }
            Self::Unrolled(u) => SiteLayout(vec![u.channels; u.iterations]),
        }
    }

    pub fn block_shapes(&self) -> Vec<Vec<usize>> {
        let k = KERNEL;
        match *self {
            Self::PostProc(PostProcNet { channels: c, depth }) => {
                let mut v = Vec::new();
                for i in 0..depth {
                    let cin = if i == 0 { 1 } else { c };
                    v.push(vec![c, cin, k, k]);
                    v.push(vec![c]);
                }
                for _ in 0..depth - 1 {
                    v.push(vec![c, c, k, k]);
                    v.push(vec![c]);
                }
                v.push(vec![1, c, k, k]);
                v.push(vec![1]);
                v
            }
            Self::Unrolled(UnrolledNet { iterations, channels: c }) => (0..iterations)
                .flat_map(|_| [vec![1], vec![c, 1, k, k], vec![c], vec![1, c, k, k], vec![1]])
                .collect(),
        }
    }

    /// Fan-in scaled normal convolution kernels, zero biases, zero output
    /// convolutions (so the untrained net is the identity on its input or
    /// plain gradient descent) and unit step multipliers.
    pub fn init<T: Real, R: Rng>(&self, rng: &mut R) -> Result<ImagingParams<T>> {
        self.validate()?;
        let shapes = self.block_shapes();
        let blocks = match *self {
            Self::PostProc(_) => {
                let last_kernel = shapes.len() - 2;
                shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        if s.len() == 4 && i != last_kernel {
                            fan_in_normal(s, s[1] * s[2] * s[3], rng)
                        } else {
                            Tensor::zeros(s)
                        }
                    })
                    .collect()
            }
            Self::Unrolled(_) => shapes
                .iter()
                .enumerate()
                .map(|(i, s)| match i % 5 {
                    0 => Tensor::full(s, T::one()),
                    1 => fan_in_normal(s, s[1] * s[2] * s[3], rng),
                    _ => Tensor::zeros(s),
                })
                .collect(),
        };
        Ok(ImagingParams {
            blocks,
            layout: self.layout(),
        })
    }

    pub fn check_params<T: Real>(&self, w: &ImagingParams<T>) -> Result<()> {
        let shapes = self.block_shapes();
        if w.layout != self.layout()
            || w.blocks.len() != shapes.len()
            || w.blocks.iter().zip(&shapes).any(|(b, s)| b.shape() != s.as_slice())
        {
            return Err(dim_err("imaging parameters do not match the network layout"));
        }
        Ok(())
    }

    /// Records the forward pass. `film = None` runs the unmodulated network.
    pub fn forward_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        w: &[Var],
        film: Option<&FilmVars>,
        input: &NetInput<T>,
    ) -> Result<Var> {
        let n_blocks = self.block_shapes().len();
        if w.len() != n_blocks {
            return Err(dim_err(format!("{} parameter blocks, network needs {n_blocks}", w.len())));
        }
        if let Some(f) = film {
            if f.0.len() != self.layout().len() {
                return Err(dim_err(format!(
                    "{} FiLM sites, network has {}",
                    f.0.len(),
                    self.layout().len()
                )));
            }
        }
        let modulate = |tape: &mut Tape<T>, h: Var, site: usize| -> Result<Var> {
            match film {
                Some(f) => {
                    let (g, b) = f.site(site)?;
                    film_modulate(tape, h, g, b)
                }
                None => Ok(h),
            }
        };
        match (*self, input) {
            (Self::PostProc(p), NetInput::Image(x)) => {
                let x = tape.constant(x.clone());
                let mut h = x;
                let mut skips = Vec::with_capacity(p.depth);
                for i in 0..p.depth {
                    h = tape.conv2d(h, w[2 * i], w[2 * i + 1], 1, PAD)?;
                    h = modulate(tape, h, i)?;
                    h = tape.relu(h)?;
                    skips.push(h);
                }
                for i in 0..p.depth - 1 {
                    let j = p.depth + i;
                    h = tape.conv2d(h, w[2 * j], w[2 * j + 1], 1, PAD)?;
                    h = modulate(tape, h, j)?;
                    h = tape.add(h, skips[p.depth - 2 - i])?;
                    h = tape.relu(h)?;
                }
                let last = 2 * p.depth - 1;
                h = tape.conv2d(h, w[2 * last], w[2 * last + 1], 1, PAD)?;
                h = modulate(tape, h, last)?;
                Ok(tape.add(h, x)?)
            }
            (Self::Unrolled(u), NetInput::Sinogram { y, init, operator }) => {
                let fwd: Arc<dyn LinearMap<T>> = operator.forward.clone();
                let adj: Arc<dyn LinearMap<T>> = operator.adjoint.clone();
                let y = tape.constant(y.clone());
                let mut x = tape.constant(init.clone());
                for t in 0..u.iterations {
                    let b = &w[5 * t..5 * t + 5];
                    let ax = tape.linear_map(x, fwd.clone())?;
                    let r = tape.sub(ax, y)?;
                    let grad = tape.linear_map(r, adj.clone())?;
                    let grad = tape.mul_scalar_var(grad, b[0])?;
                    let grad = tape.scale(grad, T::of(operator.step_scale))?;
                    let f = tape.conv2d(x, b[1], b[2], 1, PAD)?;
                    let f = modulate(tape, f, t)?;
                    let f = tape.relu(f)?;
                    let reg = tape.conv2d(f, b[3], b[4], 1, PAD)?;
                    let next = tape.sub(x, grad)?;
                    x = tape.add(next, reg)?;
                }
                Ok(x)
            }
            _ => Err(dim_err("network kind and input kind differ")),
        }
    }

    /// Eager forward pass returning a `[1, 1, n, n]` image.
    pub fn forward<T: Real>(
        &self,
        w: &ImagingParams<T>,
        film: Option<&FiLMParams<T>>,
        input: &NetInput<T>,
    ) -> Result<Tensor<T>> {
        self.check_params(w)?;
        let mut tape = Tape::new();
        let vars = w.register(&mut tape, false);
        let film = match film {
            Some(f) => {
                f.check(&w.layout)?;
                Some(f.register(&mut tape))
            }
            None => None,
        };
        let out = self.forward_tape(&mut tape, &vars, film.as_ref(), input)?;
        Ok(tape.value(out).clone())
    }
}
