//! Little-endian primitives for the binary dataset and checkpoint formats.

use hyperfed_tensor::{Real, Tensor};

use crate::error::{Error, Result};

/// Upper bound on tensor rank accepted when decoding.
const MAX_RANK: usize = 8;

pub(crate) fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_len(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))?;
    put_u32(out, v);
    Ok(())
}

/// `u32 ndim`, `u32` dims, then the values as `T` little-endian.
pub(crate) fn put_tensor<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) -> Result<()> {
    put_len(out, t.ndim(), "tensor rank")?;
    for &d in t.shape() {
        put_len(out, d, "tensor dimension")?;
    }
    out.reserve(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

/// Bounds-checked cursor; every short read is a format error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(self.take(8, what)?);
        Ok(f64::from_le_bytes(buf))
    }

    pub(crate) fn tensor<T: Real>(&mut self, what: &str) -> Result<Tensor<T>> {
        let ndim = self.u32(what)? as usize;
        if ndim == 0 || ndim > MAX_RANK {
            return Err(Error::Format(format!("{what}: unsupported rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for _ in 0..ndim {
            let d = self.u32(what)? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("{what}: element count overflows")))?;
            shape.push(d);
        }
        // Checked before allocating so a corrupt header cannot request huge buffers.
        let raw = self.take(count.saturating_mul(T::BYTES), what)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{what}: {e}")))
    }

    pub(crate) fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after {what}",
                self.remaining()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_and_truncation() {
        let t = Tensor::new(&[2, 3], vec![1.5f32, -2.0, 0.0, 7.25, f32::MIN_POSITIVE, 3.0]).unwrap();
        let mut buf = Vec::new();
        put_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f32> = Reader::new(&buf).tensor("t").unwrap();
        assert_eq!(back, t);
        for cut in 0..buf.len() {
            assert!(matches!(
                Reader::new(&buf[..cut]).tensor::<f32>("t"),
                Err(Error::Format(_))
            ));
        }
    }
}
