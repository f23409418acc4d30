//! Ray-driven fan-beam projector and its exact transpose.
//!
//! Each ray is sampled at uniform steps of at most half a pixel; at every
//! sample the image is bilinearly interpolated from its pixel centers (zero
//! outside the grid). Forward projection gathers `weight * pixel`, the
//! backprojector scatters `weight * ray value` through the same traversal, so
//! the pair is adjoint to rounding error.

use std::sync::Arc;

use hyperfed_tensor::{LinearMap, Real, Tensor};

use super::geometry::FanBeamGeometry;
use super::Sinogram;
use crate::error::{dim_err, Result};

#[derive(Debug, Clone)]
pub struct Projector {
    geom: FanBeamGeometry,
    view_trig: Vec<(f64, f64)>,
}

impl Projector {
    pub fn new(geom: &FanBeamGeometry) -> Result<Self> {
        geom.validate()?;
        let view_trig = (0..geom.n_views)
            .map(|v| {
                let a = geom.view_angle(v);
                (a.cos(), a.sin())
            })
            .collect();
        Ok(Self {
            geom: geom.clone(),
            view_trig,
        })
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geom
    }

    pub fn image_len(&self) -> usize {
        self.geom.image_size * self.geom.image_size
    }

    pub fn sino_len(&self) -> usize {
        self.geom.n_views * self.geom.n_bins
    }

    /// Visits `(pixel index, weight)` pairs of one ray; weights include the step length.
    #[inline]
    fn trace(&self, view: usize, bin: usize, mut visit: impl FnMut(usize, f64)) {
        let g = &self.geom;
        let n = g.image_size;
        let p = g.pixel_length_mm;
        let (c, s) = self.view_trig[view];
        let src = (g.source_to_center_mm * c, g.source_to_center_mm * s);
        let u = g.bin_offset(bin);
        let det = (
            -g.detector_to_center_mm * c - u * s,
            -g.detector_to_center_mm * s + u * c,
        );
        let (dx, dy) = (det.0 - src.0, det.1 - src.1);
        let len = (dx * dx + dy * dy).sqrt();
        let dir = (dx / len, dy / len);

        // Interpolation support reaches half a pixel past the outer pixel
        // centers; one full pixel of margin keeps the clip conservative.
        let half = (n as f64 / 2.0 + 1.0) * p;
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for (o, d) in [(src.0, dir.0), (src.1, dir.1)] {
            if d.abs() < 1e-15 {
                if o.abs() >= half {
                    return;
                }
                continue;
            }
            let (a, b) = ((-half - o) / d, (half - o) / d);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        if t1 <= t0 {
            return;
        }
        let steps = ((t1 - t0) / (0.5 * p)).ceil().max(1.0) as usize;
        let dt = (t1 - t0) / steps as f64;
        let center = (n as f64 - 1.0) / 2.0;
        let nn = n as isize;
        for k in 0..steps {
            let t = t0 + (k as f64 + 0.5) * dt;
            let fx = (src.0 + t * dir.0) / p + center;
            let fy = center - (src.1 + t * dir.1) / p;
            let (jf, if_) = (fx.floor(), fy.floor());
            let (wx, wy) = (fx - jf, fy - if_);
            let (j0, i0) = (jf as isize, if_ as isize);
            for (di, wyi) in [(0isize, 1.0 - wy), (1, wy)] {
                let i = i0 + di;
                if i < 0 || i >= nn {
                    continue;
                }
                for (dj, wxj) in [(0isize, 1.0 - wx), (1, wx)] {
                    let j = j0 + dj;
                    if j < 0 || j >= nn {
                        continue;
                    }
                    let w = wyi * wxj * dt;
                    if w != 0.0 {
                        visit(i as usize * n + j as usize, w);
                    }
                }
            }
        }
    }

    /// Line integrals of a row-major `image_size²` image, view-major output.
    pub fn project_slice(&self, image: &[f64], out: &mut [f64]) {
        debug_assert_eq!(image.len(), self.image_len());
        let nb = self.geom.n_bins;
        for v in 0..self.geom.n_views {
            for b in 0..nb {
                let mut acc = 0.0;
                self.trace(v, b, |idx, w| acc += w * image[idx]);
                out[v * nb + b] = acc;
            }
        }
    }

    /// Transpose of [`Projector::project_slice`]; accumulates into `out`.
    pub fn backproject_slice(&self, sino: &[f64], out: &mut [f64]) {
        debug_assert_eq!(sino.len(), self.sino_len());
        let nb = self.geom.n_bins;
        for v in 0..self.geom.n_views {
            for b in 0..nb {
                let y = sino[v * nb + b];
                if y != 0.0 {
                    self.trace(v, b, |idx, w| out[idx] += w * y);
                }
            }
        }
    }

    /// Projects every `image_size²` plane of `image` (any leading dims).
    pub fn project<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.geom.image_size;
        let shape = image.shape();
        if shape.len() < 2 || shape[shape.len() - 2..] != [n, n] {
            return Err(dim_err(format!(
                "image shape {shape:?} does not match a {n}x{n} grid"
            )));
        }
        let lead = &shape[..shape.len() - 2];
        let mut out_shape = lead.to_vec();
        out_shape.extend([self.geom.n_views, self.geom.n_bins]);
        let mut out = Tensor::zeros(&out_shape);
        let mut buf_in = vec![0.0; self.image_len()];
        let mut buf_out = vec![0.0; self.sino_len()];
        for (src, dst) in image
            .data()
            .chunks(self.image_len())
            .zip(out.data_mut().chunks_mut(self.sino_len()))
        {
            for (b, &v) in buf_in.iter_mut().zip(src) {
                *b = v.as_f64();
            }
            self.project_slice(&buf_in, &mut buf_out);
            for (d, &v) in dst.iter_mut().zip(&buf_out) {
                *d = T::of(v);
            }
        }
        Ok(out)
    }

    /// Backprojects every `n_views x n_bins` plane of `sino`.
    pub fn backproject<T: Real>(&self, sino: &Tensor<T>) -> Result<Tensor<T>> {
        let (nv, nb) = (self.geom.n_views, self.geom.n_bins);
        let shape = sino.shape();
        if shape.len() < 2 || shape[shape.len() - 2..] != [nv, nb] {
            return Err(dim_err(format!(
                "sinogram shape {shape:?} does not match {nv} views x {nb} bins"
            )));
        }
        let n = self.geom.image_size;
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([n, n]);
        let mut out = Tensor::zeros(&out_shape);
        let mut buf_in = vec![0.0; self.sino_len()];
        let mut buf_out = vec![0.0; self.image_len()];
        for (src, dst) in sino
            .data()
            .chunks(self.sino_len())
            .zip(out.data_mut().chunks_mut(self.image_len()))
        {
            for (b, &v) in buf_in.iter_mut().zip(src) {
                *b = v.as_f64();
            }
            buf_out.fill(0.0);
            self.backproject_slice(&buf_in, &mut buf_out);
            for (d, &v) in dst.iter_mut().zip(&buf_out) {
                *d = T::of(v);
            }
        }
        Ok(out)
    }

    /// Largest eigenvalue of `AᵀA` (i.e. ‖A‖²) by power iteration from a
    /// fixed positive start vector.
    pub fn norm_sq_estimate(&self, iterations: usize) -> f64 {
        let mut x = vec![1.0 / (self.image_len() as f64).sqrt(); self.image_len()];
        let mut y = vec![0.0; self.sino_len()];
        let mut lambda = 0.0;
        for _ in 0..iterations.max(1) {
            self.project_slice(&x, &mut y);
            let mut z = vec![0.0; self.image_len()];
            self.backproject_slice(&y, &mut z);
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm;
            for (a, b) in x.iter_mut().zip(&z) {
                *a = b / norm;
            }
        }
        lambda
    }
}

/// Forward projection `A x`.
pub fn forward_project<T: Real>(image: &Tensor<T>, geom: &FanBeamGeometry) -> Result<Sinogram<T>> {
    let p = Projector::new(geom)?;
    if image.shape() != [geom.image_size, geom.image_size] {
        return Err(dim_err(format!(
            "image shape {:?}, geometry grid {}",
            image.shape(),
            geom.image_size
        )));
    }
    Sinogram::new(p.project(image)?, geom.clone())
}

/// Exact adjoint `Aᵀ y` of [`forward_project`].
pub fn back_project<T: Real>(sino: &Sinogram<T>, geom: &FanBeamGeometry) -> Result<Tensor<T>> {
    if sino.geometry() != geom {
        return Err(dim_err("sinogram was acquired with a different geometry"));
    }
    Projector::new(geom)?.backproject(sino.data())
}

/// The projector as a graph operator on `[N, 1, n, n]` image batches.
#[derive(Debug, Clone)]
pub struct ProjectionOp {
    projector: Arc<Projector>,
}

impl ProjectionOp {
    pub fn new(projector: Arc<Projector>) -> Self {
        Self { projector }
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }
}

impl<T: Real> LinearMap<T> for ProjectionOp {
    fn apply(&self, x: &Tensor<T>) -> hyperfed_tensor::Result<Tensor<T>> {
        self.projector
            .project(x)
            .map_err(|e| hyperfed_tensor::TensorError::Contract(e.to_string()))
    }

    fn apply_adjoint(&self, y: &Tensor<T>) -> hyperfed_tensor::Result<Tensor<T>> {
        self.projector
            .backproject(y)
            .map_err(|e| hyperfed_tensor::TensorError::Contract(e.to_string()))
    }
}

/// `Aᵀ` as a graph operator; its adjoint is `A`.
#[derive(Debug, Clone)]
pub struct BackprojectionOp {
    projector: Arc<Projector>,
}

impl BackprojectionOp {
    pub fn new(projector: Arc<Projector>) -> Self {
        Self { projector }
    }
}

impl<T: Real> LinearMap<T> for BackprojectionOp {
    fn apply(&self, y: &Tensor<T>) -> hyperfed_tensor::Result<Tensor<T>> {
        <ProjectionOp as LinearMap<T>>::apply_adjoint(&ProjectionOp::new(self.projector.clone()), y)
    }

    fn apply_adjoint(&self, x: &Tensor<T>) -> hyperfed_tensor::Result<Tensor<T>> {
        <ProjectionOp as LinearMap<T>>::apply(&ProjectionOp::new(self.projector.clone()), x)
    }
}
