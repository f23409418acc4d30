//! HFCK parameter files, also used as the federation wire payload.
//!
//! Layout (little-endian): magic `HFCK`, version `u8`, element width `u8`
//! (4 or 8), content kind `u8` (0 shared imaging weights, 1 hypernetwork),
//! `u32` site count and one `u32` channel count per site, `u32` block count,
//! then each block as `u32 ndim`, `u32` dims and the values.

use std::fs;
use std::path::Path;

use hyperfed_tensor::Real;

use crate::codec::{put_len, put_tensor, put_u8, Reader};
use crate::error::{Error, Result};
use crate::film::SiteLayout;
use crate::hypernet::HyperParams;
use crate::nets::ImagingParams;

pub const HFCK_MAGIC: &[u8; 4] = b"HFCK";
pub const HFCK_VERSION: u8 = 1;

const KIND_SHARED: u8 = 0;
const KIND_HYPER: u8 = 1;

fn encode_blocks<'a, T: Real>(
    kind: u8,
    layout: &SiteLayout,
    blocks: impl ExactSizeIterator<Item = &'a hyperfed_tensor::Tensor<T>>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(HFCK_MAGIC);
    put_u8(&mut out, HFCK_VERSION);
    put_u8(&mut out, T::BYTES as u8);
    put_u8(&mut out, kind);
    put_len(&mut out, layout.len(), "site count")?;
    for &c in layout.sites() {
        put_len(&mut out, c, "channel count")?;
    }
    put_len(&mut out, blocks.len(), "block count")?;
    for b in blocks {
        put_tensor(&mut out, b)?;
    }
    Ok(out)
}

fn decode_blocks<T: Real>(bytes: &[u8], kind: u8) -> Result<(SiteLayout, Vec<hyperfed_tensor::Tensor<T>>)> {
    let mut rd = Reader::new(bytes);
    if rd.take(4, "magic")? != HFCK_MAGIC {
        return Err(Error::Format("not an HFCK file (bad magic)".into()));
    }
    let version = rd.u8("version")?;
    if version != HFCK_VERSION {
        return Err(Error::Format(format!("unsupported HFCK version {version}")));
    }
    let width = rd.u8("element width")?;
    if width as usize != T::BYTES {
        return Err(Error::Format(format!(
            "checkpoint holds {width}-byte reals, expected {}",
            T::BYTES
        )));
    }
    let found = rd.u8("content kind")?;
    if found != kind {
        return Err(Error::Format(format!("checkpoint kind {found}, expected {kind}")));
    }
    let n_sites = rd.u32("site count")? as usize;
    let mut sites = Vec::with_capacity(n_sites.min(rd.remaining() / 4));
    for _ in 0..n_sites {
        sites.push(rd.u32("channel count")? as usize);
    }
    let n_blocks = rd.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(n_blocks.min(rd.remaining() / 8));
    for i in 0..n_blocks {
        blocks.push(rd.tensor(&format!("block {i}"))?);
    }
    rd.finish("blocks")?;
    Ok((SiteLayout(sites), blocks))
}

pub fn encode_params<T: Real>(w: &ImagingParams<T>) -> Result<Vec<u8>> {
    encode_blocks(KIND_SHARED, &w.layout, w.blocks.iter())
}

pub fn decode_params<T: Real>(bytes: &[u8]) -> Result<ImagingParams<T>> {
    let (layout, blocks) = decode_blocks(bytes, KIND_SHARED)?;
    Ok(ImagingParams { blocks, layout })
}

/// Hypernetwork weights with the layout of the sites they modulate.
pub fn encode_hyper<T: Real>(xi: &HyperParams<T>, layout: &SiteLayout) -> Result<Vec<u8>> {
    encode_blocks(KIND_HYPER, layout, xi.tensors().into_iter())
}

pub fn decode_hyper<T: Real>(bytes: &[u8]) -> Result<(HyperParams<T>, SiteLayout)> {
    let (layout, blocks) = decode_blocks(bytes, KIND_HYPER)?;
    let [w1, b1, w2, b2]: [_; 4] = blocks
        .try_into()
        .map_err(|b: Vec<_>| Error::Format(format!("hypernetwork needs 4 blocks, found {}", b.len())))?;
    let ok = w1.ndim() == 2
        && w2.ndim() == 2
        && b1.shape() == [w1.shape()[0]]
        && w2.shape()[1] == w1.shape()[0]
        && b2.shape() == [w2.shape()[0]]
        && w2.shape()[0] == layout.film_width();
    if !ok {
        return Err(Error::Format("inconsistent hypernetwork block shapes".into()));
    }
    Ok((HyperParams { w1, b1, w2, b2 }, layout))
}

pub fn save_params<T: Real>(path: impl AsRef<Path>, w: &ImagingParams<T>) -> Result<()> {
    fs::write(path, encode_params(w)?)?;
    Ok(())
}

pub fn load_params<T: Real>(path: impl AsRef<Path>) -> Result<ImagingParams<T>> {
    decode_params(&fs::read(path)?)
}

pub fn save_hyper<T: Real>(path: impl AsRef<Path>, xi: &HyperParams<T>, layout: &SiteLayout) -> Result<()> {
    fs::write(path, encode_hyper(xi, layout)?)?;
    Ok(())
}

pub fn load_hyper<T: Real>(path: impl AsRef<Path>) -> Result<(HyperParams<T>, SiteLayout)> {
    decode_hyper(&fs::read(path)?)
}
