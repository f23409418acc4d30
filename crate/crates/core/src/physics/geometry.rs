use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Flat-detector fan-beam acquisition over a full 2π scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanBeamGeometry {
    pub n_views: usize,
    pub n_bins: usize,
    pub pixel_length_mm: f64,
    pub bin_length_mm: f64,
    pub source_to_center_mm: f64,
    pub detector_to_center_mm: f64,
    /// Incident photon count per detector bin (I0).
    pub incident_intensity: f64,
    /// Side of the square reconstruction grid, in pixels.
    pub image_size: usize,
}

impl FanBeamGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 || self.n_bins == 0 || self.image_size == 0 {
            return Err(config_err("geometry extents must be positive"));
        }
        let reals = [
            ("pixel_length_mm", self.pixel_length_mm),
            ("bin_length_mm", self.bin_length_mm),
            ("source_to_center_mm", self.source_to_center_mm),
            ("detector_to_center_mm", self.detector_to_center_mm),
            ("incident_intensity", self.incident_intensity),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(format!("geometry {name} must be positive, got {v}")));
            }
        }
        let diagonal = self.image_extent_mm() * std::f64::consts::SQRT_2;
        if self.source_to_center_mm + self.detector_to_center_mm <= diagonal {
            return Err(config_err(format!(
                "source/detector distances ({} + {} mm) do not clear the image diagonal ({diagonal:.1} mm)",
                self.source_to_center_mm, self.detector_to_center_mm
            )));
        }
        Ok(())
    }

    pub fn image_extent_mm(&self) -> f64 {
        self.image_size as f64 * self.pixel_length_mm
    }

    /// Unnormalized conditioning parameters in the order
    /// `[n_views, n_bins, pixel, bin, source-center, detector-center, I0]`.
    pub fn raw_vector(&self) -> [f64; 7] {
        [
            self.n_views as f64,
            self.n_bins as f64,
            self.pixel_length_mm,
            self.bin_length_mm,
            self.source_to_center_mm,
            self.detector_to_center_mm,
            self.incident_intensity,
        ]
    }

    /// Angle of view `v`, radians.
    pub fn view_angle(&self, v: usize) -> f64 {
        2.0 * std::f64::consts::PI * v as f64 / self.n_views as f64
    }

    /// Offset of bin `b`'s center from the detector center, mm.
    pub fn bin_offset(&self, b: usize) -> f64 {
        (b as f64 - (self.n_bins as f64 - 1.0) / 2.0) * self.bin_length_mm
    }

    /// Rescales a geometry described on a `reference_grid` image to a
    /// `grid`-pixel image covering the same field of view.
    ///
    /// View and bin counts scale with the grid (keeping their ratio); pixel
    /// length grows so the physical image is unchanged; bin length grows so the
    /// detector keeps its physical width, which preserves the fan angle.
    /// Distances and intensity are untouched.
    pub fn desk_scaled(&self, reference_grid: usize, grid: usize) -> Result<Self> {
        if reference_grid == 0 || grid == 0 {
            return Err(config_err("grid sizes must be positive"));
        }
        let s = grid as f64 / reference_grid as f64;
        let n_views = ((self.n_views as f64 * s).round() as usize).max(1);
        let n_bins = ((self.n_bins as f64 * s).round() as usize).max(1);
        let scaled = Self {
            n_views,
            n_bins,
            pixel_length_mm: self.pixel_length_mm / s,
            bin_length_mm: self.bin_length_mm * self.n_bins as f64 / n_bins as f64,
            source_to_center_mm: self.source_to_center_mm,
            detector_to_center_mm: self.detector_to_center_mm,
            incident_intensity: self.incident_intensity,
            image_size: grid,
        };
        scaled.validate()?;
        Ok(scaled)
    }

    /// Same acquisition with fewer, uniformly strided views.
    pub fn with_views(&self, n_views: usize) -> Self {
        Self {
            n_views,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> FanBeamGeometry {
        FanBeamGeometry {
            n_views: 512,
            n_bins: 368,
            pixel_length_mm: 1.33,
            bin_length_mm: 2.57,
            source_to_center_mm: 595.0,
            detector_to_center_mm: 491.0,
            incident_intensity: 0.5e5,
            image_size: 256,
        }
    }

    #[test]
    fn validation_rejects_degenerate_fields() {
        assert!(base().validate().is_ok());
        let mut g = base();
        g.bin_length_mm = 0.0;
        assert!(g.validate().is_err());
        let mut g = base();
        g.n_views = 0;
        assert!(g.validate().is_err());
        let mut g = base();
        g.image_size = 1024;
        assert!(g.validate().is_err(), "source inside the object");
    }

    #[test]
    fn desk_scaling_keeps_field_of_view_and_fan_angle() {
        let g = base();
        let d = g.desk_scaled(256, 64).unwrap();
        assert_eq!(d.image_size, 64);
        assert_eq!(d.n_views, 128);
        assert_eq!(d.n_bins, 92);
        assert!((d.image_extent_mm() - g.image_extent_mm()).abs() < 1e-9);
        let width = |x: &FanBeamGeometry| x.n_bins as f64 * x.bin_length_mm;
        assert!((width(&d) - width(&g)).abs() < 1e-9);
        assert_eq!(d.source_to_center_mm, g.source_to_center_mm);
        assert_eq!(g.desk_scaled(256, 256).unwrap(), g);
    }
}
