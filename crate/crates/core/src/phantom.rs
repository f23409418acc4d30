//! Synthetic attenuation phantoms on a square grid spanning `[-1, 1]²`.

use hyperfed_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};

pub const MIN_PHANTOM_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub center_x: f64,
    pub center_y: f64,
    /// Counter-clockwise rotation, degrees.
    pub angle_deg: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center_x, y - self.center_y);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }
}

/// Modified (high-contrast) Shepp-Logan table, intensities in `[0, 1]`.
pub const SHEPP_LOGAN: [Ellipse; 10] = [
    el(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    el(-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    el(-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    el(-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    el(0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    el(0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    el(0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    el(0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    el(0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    el(0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

const fn el(intensity: f64, semi_x: f64, semi_y: f64, center_x: f64, center_y: f64, angle_deg: f64) -> Ellipse {
    Ellipse {
        intensity,
        semi_x,
        semi_y,
        center_x,
        center_y,
        angle_deg,
    }
}

/// Normalized coordinate of pixel `(i, j)`: x to the right, y up.
pub fn pixel_coords(n: usize, i: usize, j: usize) -> (f64, f64) {
    let c = (n as f64 - 1.0) / 2.0;
    let h = n as f64 / 2.0;
    ((j as f64 - c) / h, (c - i as f64) / h)
}

/// Sums ellipse intensities at every pixel center and clips to `[0, 1]`.
pub fn rasterize(n: usize, ellipses: &[Ellipse]) -> Tensor<f64> {
    Tensor::from_fn(&[n, n], |idx| {
        let (x, y) = pixel_coords(n, idx / n, idx % n);
        let v: f64 = ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.intensity)
            .sum();
        v.clamp(0.0, 1.0)
    })
}

fn check_size(n: usize) -> Result<()> {
    if n < MIN_PHANTOM_SIZE {
        return Err(config_err(format!(
            "phantom size {n} below minimum {MIN_PHANTOM_SIZE}"
        )));
    }
    Ok(())
}

pub fn shepp_logan(n: usize) -> Result<Tensor<f64>> {
    check_size(n)?;
    Ok(rasterize(n, &SHEPP_LOGAN))
}

/// Ellipses of a random phantom: a body outline plus interior structures.
pub fn random_ellipses(seed: u64) -> Vec<Ellipse> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(5..=12);
    let mut out = Vec::with_capacity(count);
    out.push(Ellipse {
        intensity: rng.random_range(0.2..0.45),
        semi_x: rng.random_range(0.6..0.85),
        semi_y: rng.random_range(0.65..0.9),
        center_x: rng.random_range(-0.05..0.05),
        center_y: rng.random_range(-0.05..0.05),
        angle_deg: rng.random_range(-20.0..20.0),
    });
    for _ in 1..count {
        let r = rng.random_range(0.0..0.5f64);
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        out.push(Ellipse {
            intensity: rng.random_range(-0.2..0.6),
            semi_x: rng.random_range(0.03..0.3),
            semi_y: rng.random_range(0.03..0.3),
            center_x: r * t.cos(),
            center_y: r * t.sin(),
            angle_deg: rng.random_range(0.0..180.0),
        });
    }
    out
}

/// 5 to 12 random ellipses, values clipped to `[0, 1]`. Deterministic in `seed`.
pub fn random_phantom(n: usize, seed: u64) -> Result<Tensor<f64>> {
    check_size(n)?;
    Ok(rasterize(n, &random_ellipses(seed)))
}
