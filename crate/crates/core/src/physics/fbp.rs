use std::f64::consts::PI;
use std::str::FromStr;

use hyperfed_tensor::{Real, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::geometry::FanBeamGeometry;
use super::Sinogram;
use crate::error::{config_err, dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    #[default]
    RamLak,
    /// Ram-Lak apodized by a Hann window.
    Hann,
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ram-lak" | "ramlak" | "ramp" => Ok(Self::RamLak),
            "hann" => Ok(Self::Hann),
            other => Err(config_err(format!("unknown FBP filter `{other}`"))),
        }
    }
}

/// Filters every view of a cosine-weighted sinogram with the band-limited
/// ramp sampled at spacing `tau` (zero-padded linear convolution via FFT).
fn filter_views(data: &mut [f64], n_bins: usize, tau: f64, kind: FilterKind) {
    let len = (2 * n_bins).next_power_of_two();
    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    kernel[0].re = 1.0 / (4.0 * tau * tau);
    for k in 1..n_bins {
        if k % 2 == 1 {
            let v = -1.0 / ((k * k) as f64 * PI * PI * tau * tau);
            kernel[k].re = v;
            kernel[len - k].re = v;
        }
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    fwd.process(&mut kernel);
    if kind == FilterKind::Hann {
        for (i, h) in kernel.iter_mut().enumerate() {
            let f = i.min(len - i) as f64 / (len / 2) as f64;
            *h *= 0.5 * (1.0 + (PI * f).cos());
        }
    }
    // tau from the discrete convolution, 1/len from the unnormalized inverse FFT.
    let scale = tau / len as f64;
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for view in data.chunks_mut(n_bins) {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(view.iter()) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&kernel) {
            *b *= *h;
        }
        inv.process(&mut buf);
        for (v, b) in view.iter_mut().zip(&buf) {
            *v = b.re * scale;
        }
    }
}

/// Fan-beam filtered backprojection for a flat detector over 2π: cosine
/// weighting, ramp filtering on the detector rescaled to the isocenter, and
/// distance-weighted pixel-driven backprojection with linear interpolation.
pub fn fbp_reconstruct<T: Real>(
    sino: &Sinogram<T>,
    geom: &FanBeamGeometry,
    kind: FilterKind,
) -> Result<Tensor<T>> {
    if sino.geometry() != geom {
        return Err(dim_err("sinogram was acquired with a different geometry"));
    }
    geom.validate()?;
    let (nv, nb, n) = (geom.n_views, geom.n_bins, geom.image_size);
    let d = geom.source_to_center_mm;
    let mag = d / (d + geom.detector_to_center_mm);
    let tau = geom.bin_length_mm * mag;
    let mid_bin = (nb as f64 - 1.0) / 2.0;

    let mut q: Vec<f64> = sino.data().data().iter().map(|v| v.as_f64()).collect();
    for view in q.chunks_mut(nb) {
        for (b, v) in view.iter_mut().enumerate() {
            let s = geom.bin_offset(b) * mag;
            *v *= d / (d * d + s * s).sqrt();
        }
    }
    filter_views(&mut q, nb, tau, kind);

    let p = geom.pixel_length_mm;
    let center = (n as f64 - 1.0) / 2.0;
    // 1/2 for the double coverage of a full scan.
    let dbeta = 2.0 * PI / nv as f64 * 0.5;
    let mut img = vec![0.0f64; n * n];
    for v in 0..nv {
        let a = geom.view_angle(v);
        let (c, s) = (a.cos(), a.sin());
        let row = &q[v * nb..(v + 1) * nb];
        for i in 0..n {
            let y = (center - i as f64) * p;
            for j in 0..n {
                let x = (j as f64 - center) * p;
                let l = d - (x * c + y * s);
                let t = -x * s + y * c;
                let sp = d * t / l;
                let pos = sp / tau + mid_bin;
                let k = pos.floor();
                let ki = k as isize;
                if ki < -1 || ki >= nb as isize {
                    continue;
                }
                let w = pos - k;
                let at = |idx: isize| {
                    if idx >= 0 && (idx as usize) < nb {
                        row[idx as usize]
                    } else {
                        0.0
                    }
                };
                let val = (1.0 - w) * at(ki) + w * at(ki + 1);
                let u = l / d;
                img[i * n + j] += dbeta * val / (u * u);
            }
        }
    }
    Tensor::new(&[n, n], img.into_iter().map(T::of).collect()).map_err(Into::into)
}
