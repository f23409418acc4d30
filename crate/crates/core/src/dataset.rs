//! Per-institution dataset simulation and the HFDS binary format.
//!
//! HFDS layout (little-endian): magic `HFDS`, version `u8`, task tag `u8`,
//! seven `f64` geometry values in conditioning order, `u32` image size, `u32`
//! institution id, `u32` record count, then per record the degraded input and
//! the target, each as `u32 ndim`, `u32` dims and `f32` values.

use std::fs;
use std::path::Path;

use hyperfed_tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{put_f64, put_len, put_tensor, put_u32, put_u8, Reader};
use crate::error::{config_err, dim_err, Error, Result};
use crate::phantom::random_phantom;
use crate::physics::{apply_low_dose, fbp_reconstruct, forward_project, sparse_view_subsample, FanBeamGeometry, FilterKind};

pub const HFDS_MAGIC: &[u8; 4] = b"HFDS";
pub const HFDS_VERSION: u8 = 1;

/// Attenuation (mm⁻¹) of a phantom value of 1, roughly water.
pub const ATTENUATION_PER_UNIT: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PostProcessing,
    Reconstruction,
}

impl Task {
    fn tag(self) -> u8 {
        match self {
            Task::PostProcessing => 0,
            Task::Reconstruction => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Task::PostProcessing),
            1 => Ok(Task::Reconstruction),
            t => Err(Error::Format(format!("unknown task tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstitutionConfig {
    pub id: u32,
    /// Acquisition on the simulation grid (already desk-scaled).
    pub geometry: FanBeamGeometry,
    pub task: Task,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Keep only this many uniformly strided views after noise insertion.
    pub sparse_views: Option<usize>,
    pub fbp_filter: FilterKind,
}

impl InstitutionConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if let Some(k) = self.sparse_views {
            if k == 0 || k > self.geometry.n_views || self.geometry.n_views % k != 0 {
                return Err(config_err(format!(
                    "institution {}: sparse_views {k} must divide n_views {}",
                    self.id, self.geometry.n_views
                )));
            }
        }
        Ok(())
    }

    /// Geometry the degraded data is actually acquired with.
    pub fn acquisition(&self) -> FanBeamGeometry {
        match self.sparse_views {
            Some(k) => self.geometry.with_views(k),
            None => self.geometry.clone(),
        }
    }
}

/// One training triple: degraded input, clean target and the raw
/// conditioning parameters of the acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `[n, n]` FBP image (post-processing) or `[views, bins]` sinogram.
    pub degraded_input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub geometry_raw: [f64; 7],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub institution_id: u32,
    pub geometry: FanBeamGeometry,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Shape every degraded input must have for this task and geometry.
    pub fn input_shape(&self) -> [usize; 2] {
        input_shape(self.task, &self.geometry)
    }

    fn check(&self) -> Result<()> {
        let n = self.geometry.image_size;
        let raw = self.geometry.raw_vector();
        for (i, r) in self.records.iter().enumerate() {
            if r.degraded_input.shape() != self.input_shape() || r.target.shape() != [n, n] {
                return Err(dim_err(format!(
                    "record {i}: input {:?} / target {:?} do not fit the dataset geometry",
                    r.degraded_input.shape(),
                    r.target.shape()
                )));
            }
            if r.geometry_raw != raw {
                return Err(dim_err(format!("record {i}: geometry differs from the dataset header")));
            }
        }
        Ok(())
    }
}

fn input_shape(task: Task, g: &FanBeamGeometry) -> [usize; 2] {
    match task {
        Task::PostProcessing => [g.image_size, g.image_size],
        Task::Reconstruction => [g.n_views, g.n_bins],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstitutionData {
    pub train: Dataset,
    pub test: Dataset,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    stream
        .bytes()
        .fold(mix64(seed), |acc, b| mix64(acc ^ u64::from(b)))
}

/// Distinct `(institution, index)` pairs map to distinct seeds: the key is
/// injective and the mixer is a bijection of `u64`.
fn record_seed(seed: u64, stream: &str, id: u32, index: u32) -> u64 {
    let key = (u64::from(id) << 32) | u64::from(index);
    mix64(key ^ derive_seed(seed, stream))
}

/// Degrades one clean image (values in `[0, 1]`) under the institution's
/// acquisition: projection, Poisson noise, optional view reduction and, for
/// post-processing, FBP. Outputs stay in phantom units.
pub fn simulate_record(cfg: &InstitutionConfig, target: &Tensor<f64>, noise_seed: u64) -> Result<SampleRecord> {
    let g = &cfg.geometry;
    if target.shape() != [g.image_size, g.image_size] {
        return Err(dim_err(format!(
            "image {:?} does not match the {} grid",
            target.shape(),
            g.image_size
        )));
    }
    let mu = target.map(|v| v * ATTENUATION_PER_UNIT);
    let clean = forward_project(&mu, g)?;
    let mut noisy = apply_low_dose(&clean, g.incident_intensity, noise_seed)?;
    if let Some(k) = cfg.sparse_views {
        noisy = sparse_view_subsample(&noisy, k)?;
    }
    let degraded = match cfg.task {
        Task::PostProcessing => fbp_reconstruct(&noisy, noisy.geometry(), cfg.fbp_filter)?,
        Task::Reconstruction => noisy.data().clone(),
    };
    let degraded = degraded.map(|v| v / ATTENUATION_PER_UNIT);
    Ok(SampleRecord {
        degraded_input: degraded.cast(),
        target: target.cast(),
        geometry_raw: cfg.acquisition().raw_vector(),
    })
}

fn simulate_range(cfg: &InstitutionConfig, range: std::ops::Range<usize>) -> Result<Vec<SampleRecord>> {
    range
        .into_par_iter()
        .map(|i| {
            let idx = u32::try_from(i).map_err(|_| config_err("too many records"))?;
            let phantom = random_phantom(cfg.geometry.image_size, record_seed(cfg.seed, "phantom", cfg.id, idx))?;
            simulate_record(cfg, &phantom, record_seed(cfg.seed, "noise", cfg.id, idx))
        })
        .collect()
}

/// Simulates the train and test splits. A pure function of `cfg`; records
/// are independent, so they are generated in parallel.
pub fn simulate_dataset(cfg: &InstitutionConfig) -> Result<InstitutionData> {
    cfg.validate()?;
    let total = cfg.n_train + cfg.n_test;
    let make = |records| Dataset {
        task: cfg.task,
        institution_id: cfg.id,
        geometry: cfg.acquisition(),
        records,
    };
    Ok(InstitutionData {
        train: make(simulate_range(cfg, 0..cfg.n_train)?),
        test: make(simulate_range(cfg, cfg.n_train..total)?),
    })
}

/// Like [`simulate_dataset`] for caller-supplied clean images (e.g. ingested
/// scans); the image order defines record indices.
pub fn simulate_from_images(cfg: &InstitutionConfig, images: &[Tensor<f64>]) -> Result<Dataset> {
    cfg.validate()?;
    let records = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| simulate_record(cfg, img, record_seed(cfg.seed, "noise", cfg.id, i as u32)))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        task: cfg.task,
        institution_id: cfg.id,
        geometry: cfg.acquisition(),
        records,
    })
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.check()?;
    let mut out = Vec::new();
    out.extend_from_slice(HFDS_MAGIC);
    put_u8(&mut out, HFDS_VERSION);
    put_u8(&mut out, ds.task.tag());
    for v in ds.geometry.raw_vector() {
        put_f64(&mut out, v);
    }
    put_len(&mut out, ds.geometry.image_size, "image size")?;
    put_u32(&mut out, ds.institution_id);
    put_len(&mut out, ds.records.len(), "record count")?;
    for r in &ds.records {
        put_tensor(&mut out, &r.degraded_input)?;
        put_tensor(&mut out, &r.target)?;
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut rd = Reader::new(bytes);
    if rd.take(4, "magic")? != HFDS_MAGIC {
        return Err(Error::Format("not an HFDS file (bad magic)".into()));
    }
    let version = rd.u8("version")?;
    if version != HFDS_VERSION {
        return Err(Error::Format(format!("unsupported HFDS version {version}")));
    }
    let task = Task::from_tag(rd.u8("task tag")?)?;
    let mut raw = [0.0; 7];
    for v in &mut raw {
        *v = rd.f64("geometry")?;
    }
    let image_size = rd.u32("image size")? as usize;
    let institution_id = rd.u32("institution id")?;
    let count = rd.u32("record count")? as usize;
    let count_of = |v: f64, what: &str| -> Result<usize> {
        if v.fract() != 0.0 || !(1.0..=u32::MAX as f64).contains(&v) {
            return Err(Error::Format(format!("{what} {v} is not a positive integer")));
        }
        Ok(v as usize)
    };
    let geometry = FanBeamGeometry {
        n_views: count_of(raw[0], "view count")?,
        n_bins: count_of(raw[1], "bin count")?,
        pixel_length_mm: raw[2],
        bin_length_mm: raw[3],
        source_to_center_mm: raw[4],
        detector_to_center_mm: raw[5],
        incident_intensity: raw[6],
        image_size,
    };
    let mut records = Vec::with_capacity(count.min(rd.remaining() / 16));
    for i in 0..count {
        let degraded_input = rd.tensor(&format!("record {i} input"))?;
        let target = rd.tensor(&format!("record {i} target"))?;
        records.push(SampleRecord {
            degraded_input,
            target,
            geometry_raw: raw,
        });
    }
    rd.finish("records")?;
    let ds = Dataset {
        task,
        institution_id,
        geometry,
        records,
    };
    ds.check().map_err(|e| Error::Format(e.to_string()))?;
    Ok(ds)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Reads a binary (P5) PGM; 16-bit samples are big-endian. Values are
/// divided by the declared maximum, giving `[0, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    parse_pgm(&fs::read(path)?)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let bad = |m: &str| Error::Format(format!("PGM: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<&[u8]> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| !c.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P5" {
        return Err(bad("only binary P5 images are supported"));
    }
    let mut num = |what: &str| -> Result<usize> {
        std::str::from_utf8(token()?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(&format!("invalid {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid dimensions or maxval"));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    let wide = maxval > 255;
    let need = w * h * if wide { 2 } else { 1 };
    if body.len() < need {
        return Err(bad("truncated pixel data"));
    }
    let data = (0..w * h)
        .map(|i| {
            let v = if wide {
                u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as f64
            } else {
                body[i] as f64
            };
            (v / maxval as f64).min(1.0)
        })
        .collect();
    Ok(Tensor::new(&[h, w], data)?)
}

/// Bilinear resampling of a `[h, w]` image onto an `n x n` grid spanning the
/// same extent (pixel centers aligned at the borders).
pub fn resample(img: &Tensor<f64>, n: usize) -> Result<Tensor<f64>> {
    let &[h, w] = img.shape() else {
        return Err(dim_err(format!("expected a 2-D image, got {:?}", img.shape())));
    };
    if n == 0 {
        return Err(config_err("target size must be positive"));
    }
    let src = img.data();
    let coord = |k: usize, len: usize| {
        if n == 1 {
            (len as f64 - 1.0) / 2.0
        } else {
            k as f64 * (len as f64 - 1.0) / (n as f64 - 1.0)
        }
    };
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (y, x) = (coord(idx / n, h), coord(idx % n, w));
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |i: usize, j: usize| src[i * w + j];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    }))
}
