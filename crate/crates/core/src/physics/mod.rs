//! Fan-beam CT forward model, adjoint, analytic reconstruction and
//! dose/sparse-view degradation.

mod fbp;
mod geometry;
mod noise;
mod projector;

use hyperfed_tensor::{Real, Tensor};

pub use fbp::{fbp_reconstruct, FilterKind};
pub use geometry::FanBeamGeometry;
pub use noise::apply_low_dose;
pub use projector::{back_project, forward_project, BackprojectionOp, ProjectionOp, Projector};

use crate::error::{config_err, dim_err, Result};

/// Post-log line integrals indexed `[view, bin]`, tied to their geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram<T> {
    data: Tensor<T>,
    geometry: FanBeamGeometry,
}

impl<T: Real> Sinogram<T> {
    pub fn new(data: Tensor<T>, geometry: FanBeamGeometry) -> Result<Self> {
        if data.shape() != [geometry.n_views, geometry.n_bins] {
            return Err(dim_err(format!(
                "sinogram shape {:?} vs geometry {} x {}",
                data.shape(),
                geometry.n_views,
                geometry.n_bins
            )));
        }
        Ok(Self { data, geometry })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn into_parts(self) -> (Tensor<T>, FanBeamGeometry) {
        (self.data, self.geometry)
    }
}

/// Keeps `target_views` uniformly strided views; `target_views` must divide
/// the current view count so the kept angles form a uniform full scan.
pub fn sparse_view_subsample<T: Real>(sino: &Sinogram<T>, target_views: usize) -> Result<Sinogram<T>> {
    let g = sino.geometry();
    if target_views == 0 || target_views > g.n_views {
        return Err(config_err(format!(
            "cannot keep {target_views} of {} views",
            g.n_views
        )));
    }
    if g.n_views % target_views != 0 {
        return Err(config_err(format!(
            "{target_views} views do not evenly stride {} views",
            g.n_views
        )));
    }
    let stride = g.n_views / target_views;
    let nb = g.n_bins;
    let mut data = Vec::with_capacity(target_views * nb);
    for v in (0..g.n_views).step_by(stride) {
        data.extend_from_slice(&sino.data().data()[v * nb..(v + 1) * nb]);
    }
    Sinogram::new(Tensor::new(&[target_views, nb], data)?, g.with_views(target_views))
}
