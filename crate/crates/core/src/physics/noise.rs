use hyperfed_tensor::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::Sinogram;
use crate::error::{config_err, Result};

/// Poisson photon-count noise on post-log data: `N ~ Poisson(I0 e^{-p})`,
/// clamped to `N >= 1`, returned as `ln(I0 / N)`. Deterministic in `seed`.
pub fn apply_low_dose<T: Real>(sino: &Sinogram<T>, i0: f64, seed: u64) -> Result<Sinogram<T>> {
    if !(i0.is_finite() && i0 > 0.0) {
        return Err(config_err(format!("incident intensity must be positive, got {i0}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = sino.data();
    let mut out = Vec::with_capacity(src.len());
    for &p in src.data() {
        let lambda = i0 * (-p.as_f64()).exp();
        let counts = if lambda > 0.0 && lambda.is_finite() {
            Poisson::new(lambda)
                .map_err(|e| config_err(format!("poisson rate {lambda}: {e}")))?
                .sample(&mut rng)
        } else {
            0.0
        };
        out.push(T::of((i0 / counts.max(1.0)).ln()));
    }
    Sinogram::new(Tensor::new(src.shape(), out)?, sino.geometry().clone())
}
