//! Institution acquisition settings for the two multi-institution scenarios
//! (post-processing and reconstruction), five institutions each. Values are
//! stated for a 256² reference image; see [`FanBeamGeometry::desk_scaled`].

use crate::physics::FanBeamGeometry;

pub const REFERENCE_GRID: usize = 256;

#[allow(clippy::too_many_arguments)]
fn geom(views: usize, bins: usize, pixel: f64, bin: f64, sod: f64, dod: f64, i0: f64) -> FanBeamGeometry {
    FanBeamGeometry {
        n_views: views,
        n_bins: bins,
        pixel_length_mm: pixel,
        bin_length_mm: bin,
        source_to_center_mm: sod,
        detector_to_center_mm: dod,
        incident_intensity: i0,
        image_size: REFERENCE_GRID,
    }
}

pub fn post_processing() -> [FanBeamGeometry; 5] {
    [
        geom(512, 368, 1.33, 2.57, 595.0, 491.0, 0.5e5),
        geom(512, 315, 1.40, 3.00, 450.0, 350.0, 0.6875e5),
        geom(384, 330, 1.39, 2.60, 400.0, 300.0, 0.875e5),
        geom(400, 350, 1.20, 2.20, 400.0, 350.0, 1.0625e5),
        geom(384, 350, 1.40, 2.50, 500.0, 300.0, 1.25e5),
    ]
}

pub fn reconstruction() -> [FanBeamGeometry; 5] {
    [
        geom(1024, 512, 0.66, 0.72, 250.0, 250.0, 1e5),
        geom(88, 768, 0.78, 0.58, 350.0, 300.0, 1e6),
        geom(1024, 768, 1.00, 0.62, 500.0, 400.0, 5e4),
        geom(128, 512, 1.20, 1.40, 500.0, 500.0, 2.5e5),
        geom(108, 512, 0.50, 0.40, 400.0, 200.0, 5e5),
    ]
}

/// All ten presets rescaled to a `grid`-pixel image.
pub fn all_desk_scaled(grid: usize) -> crate::Result<Vec<FanBeamGeometry>> {
    post_processing()
        .iter()
        .chain(reconstruction().iter())
        .map(|g| g.desk_scaled(REFERENCE_GRID, grid))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_a_valid_geometry_at_reference_and_desk_scale() {
        for g in post_processing().iter().chain(reconstruction().iter()) {
            g.validate().unwrap();
        }
        assert_eq!(all_desk_scaled(64).unwrap().len(), 10);
        assert_eq!(all_desk_scaled(128).unwrap().len(), 10);
    }

    #[test]
    fn object_fits_inside_every_field_of_view() {
        for g in post_processing().iter().chain(reconstruction().iter()) {
            let d = g.source_to_center_mm;
            let half_det = g.n_bins as f64 * g.bin_length_mm / 2.0;
            let fov_radius = half_det * d / (d + g.detector_to_center_mm);
            assert!(fov_radius > g.image_extent_mm() / 2.0, "{g:?}");
        }
    }
}
