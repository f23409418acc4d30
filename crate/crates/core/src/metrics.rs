//! Image-quality metrics and figure data: PSNR, SSIM, line profiles and
//! boxplot summaries.

use hyperfed_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{config_err, dim_err, Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    if !(data_range > 0.0) {
        return Err(config_err(format!("data range must be positive, got {data_range}")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let m = k.len();
    let (oh, ow) = (h - m + 1, w - m + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = k.iter().enumerate().map(|(t, &kv)| kv * src[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = k.iter().enumerate().map(|(t, &kv)| kv * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over all window positions fully inside the
/// image, with a Gaussian window. Leading dimensions are treated as separate
/// planes and averaged.
pub fn ssim<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    window_size: usize,
    k1: f64,
    k2: f64,
    data_range: f64,
) -> Result<f64> {
    same_shape(a, b)?;
    let shape = a.shape();
    if shape.len() < 2 {
        return Err(dim_err(format!("ssim needs a 2-D image, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if window_size == 0 || window_size > h || window_size > w {
        return Err(config_err(format!(
            "SSIM window {window_size} does not fit a {h}x{w} image"
        )));
    }
    let c1 = (k1 * data_range).powi(2);
    let c2 = (k2 * data_range).powi(2);
    let k = gaussian_window(window_size, SSIM_SIGMA);
    let plane = h * w;
    let (mut total, mut count) = (0.0, 0usize);
    for (pa, pb) in a.data().chunks(plane).zip(b.data().chunks(plane)) {
        let x: Vec<f64> = pa.iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = pb.iter().map(|v| v.as_f64()).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let mxx = filter_valid(&prod(&x, &x), h, w, &k);
        let myy = filter_valid(&prod(&y, &y), h, w, &k);
        let mxy = filter_valid(&prod(&x, &y), h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the standard window and constants.
pub fn ssim_default<T: Real>(a: &Tensor<T>, b: &Tensor<T>, data_range: f64) -> Result<f64> {
    ssim(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2, data_range)
}

/// Values of `row` in the last plane of `img`.
pub fn line_profile<T: Real>(img: &Tensor<T>, row: usize) -> Result<Vec<f64>> {
    let shape = img.shape();
    if shape.len() < 2 {
        return Err(dim_err(format!("line profile needs a 2-D image, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if row >= h {
        return Err(Error::Index(format!("row {row} outside an image of height {h}")));
    }
    let start = img.len() - h * w + row * w;
    Ok(img.data()[start..start + w].iter().map(|v| v.as_f64()).collect())
}

/// Writes non-finite values as strings (`"inf"`, `"-inf"`, `"nan"`) so JSON
/// stays valid.
pub fn serialize_real<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

pub fn deserialize_real<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) => match s.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(serde::de::Error::custom(format!("invalid real `{other}`"))),
        },
    }
}

/// Boxplot statistics; quartiles by linear interpolation between order
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    #[serde(serialize_with = "serialize_real", deserialize_with = "deserialize_real")]
    pub min: f64,
    #[serde(serialize_with = "serialize_real", deserialize_with = "deserialize_real")]
    pub q1: f64,
    #[serde(serialize_with = "serialize_real", deserialize_with = "deserialize_real")]
    pub median: f64,
    #[serde(serialize_with = "serialize_real", deserialize_with = "deserialize_real")]
    pub q3: f64,
    #[serde(serialize_with = "serialize_real", deserialize_with = "deserialize_real")]
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() || values.iter().any(|v| v.is_nan()) {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            if lo == hi || v[lo] == v[hi] {
                v[lo]
            } else {
                v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
            }
        };
        Some(Self {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetric {
    pub institution: u32,
    pub sample: usize,
    #[serde(serialize_with = "serialize_real", deserialize_with = "deserialize_real")]
    pub psnr: f64,
    #[serde(serialize_with = "serialize_real", deserialize_with = "deserialize_real")]
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstitutionSummary {
    pub institution: u32,
    pub n_samples: usize,
    #[serde(serialize_with = "serialize_real", deserialize_with = "deserialize_real")]
    pub mean_psnr: f64,
    #[serde(serialize_with = "serialize_real", deserialize_with = "deserialize_real")]
    pub mean_ssim: f64,
    pub psnr_box: Option<FiveNumber>,
    pub ssim_box: Option<FiveNumber>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanPair {
    #[serde(serialize_with = "serialize_real", deserialize_with = "deserialize_real")]
    pub psnr: f64,
    #[serde(serialize_with = "serialize_real", deserialize_with = "deserialize_real")]
    pub ssim: f64,
}

/// Per-sample metrics with per-institution summaries. `overall` is the mean
/// over all samples; `overall_institution_mean` is the mean of the
/// institution means and is reported alongside for comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetric>,
    pub institutions: Vec<InstitutionSummary>,
    pub overall: MeanPair,
    pub overall_institution_mean: MeanPair,
    pub overall_psnr_box: Option<FiveNumber>,
    pub overall_ssim_box: Option<FiveNumber>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl MetricReport {
    /// Institutions appear in order of first occurrence.
    pub fn from_samples(samples: Vec<SampleMetric>) -> Self {
        let mut ids: Vec<u32> = Vec::new();
        for s in &samples {
            if !ids.contains(&s.institution) {
                ids.push(s.institution);
            }
        }
        let institutions: Vec<InstitutionSummary> = ids
            .iter()
            .map(|&id| {
                let p: Vec<f64> = samples.iter().filter(|s| s.institution == id).map(|s| s.psnr).collect();
                let q: Vec<f64> = samples.iter().filter(|s| s.institution == id).map(|s| s.ssim).collect();
                InstitutionSummary {
                    institution: id,
                    n_samples: p.len(),
                    mean_psnr: mean(&p),
                    mean_ssim: mean(&q),
                    psnr_box: FiveNumber::of(&p),
                    ssim_box: FiveNumber::of(&q),
                }
            })
            .collect();
        let all_p: Vec<f64> = samples.iter().map(|s| s.psnr).collect();
        let all_q: Vec<f64> = samples.iter().map(|s| s.ssim).collect();
        let inst_p: Vec<f64> = institutions.iter().map(|i| i.mean_psnr).collect();
        let inst_q: Vec<f64> = institutions.iter().map(|i| i.mean_ssim).collect();
        Self {
            overall: MeanPair {
                psnr: mean(&all_p),
                ssim: mean(&all_q),
            },
            overall_institution_mean: MeanPair {
                psnr: mean(&inst_p),
                ssim: mean(&inst_q),
            },
            overall_psnr_box: FiveNumber::of(&all_p),
            overall_ssim_box: FiveNumber::of(&all_q),
            institutions,
            samples,
        }
    }

    pub fn institution(&self, id: u32) -> Option<&InstitutionSummary> {
        self.institutions.iter().find(|i| i.institution == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_number_summary_interpolates() {
        let f = FiveNumber::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((f.min, f.q1, f.median, f.q3, f.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        let g = FiveNumber::of(&[1.0, 2.0]).unwrap();
        assert_eq!(g.median, 1.5);
        assert!(FiveNumber::of(&[]).is_none());
    }

    #[test]
    fn infinite_psnr_serializes_as_string() {
        let s = SampleMetric {
            institution: 1,
            sample: 0,
            psnr: f64::INFINITY,
            ssim: 1.0,
        };
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"inf\""));
        let back: SampleMetric = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
