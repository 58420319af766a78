//! `MFW1` weight snapshot container.
//!
//! Layout (all little-endian): magic `b"MFW1"`, `u16` version, `u32` n, d, L,
//! `f64` R and t, then row-major `f64` arrays W_xh (n*d), W_hh (n*n), W_hy (n).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{Activation, NetConfig, WeightSet};

pub const MAGIC: &[u8; 4] = b"MFW1";
pub const VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 3 * 4 + 2 * 8;

pub fn encode(w: &WeightSet) -> Result<Vec<u8>> {
    w.check_shapes()?;
    let (n, d) = (w.config.n, w.config.d);
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * (n * d + n * n + n));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [n, d, w.config.memory] {
        let v = u32::try_from(dim)
            .map_err(|_| Error::Format(format!("dimension {dim} does not fit in u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&w.config.radius.to_le_bytes());
    buf.extend_from_slice(&w.t.to_le_bytes());
    // `iter()` walks in logical row-major order regardless of memory layout.
    for v in w.w_xh.iter().chain(w.w_hh.iter()).chain(w.w_hy.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        let out = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::Format(format!(
                "truncated snapshot: needed {end} bytes, have {}",
                self.bytes.len()
            ))
        })?;
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightSet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected MFW1".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported MFW1 version {version}")));
    }
    let n = r.u32()?;
    let d = r.u32()?;
    let memory = r.u32()?;
    let radius = r.f64()?;
    let t = r.f64()?;
    let config = NetConfig {
        n,
        d,
        memory,
        radius,
        activation: Activation::Tanh,
    };
    config.validate()?;
    let expected = HEADER_LEN + 8 * (n * d + n * n + n);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "snapshot length {} does not match header (expected {expected})",
            bytes.len()
        )));
    }
    let shape_err = |e: ndarray::ShapeError| Error::Format(e.to_string());
    let w_xh = Array2::from_shape_vec((n, d), r.f64s(n * d)?).map_err(shape_err)?;
    let w_hh = Array2::from_shape_vec((n, n), r.f64s(n * n)?).map_err(shape_err)?;
    let w_hy = Array1::from(r.f64s(n)?);
    Ok(WeightSet {
        config,
        w_xh,
        w_hh,
        w_hy,
        t,
    })
}

pub fn save(path: impl AsRef<Path>, w: &WeightSet) -> Result<()> {
    fs::write(path, encode(w)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<WeightSet> {
    decode(&fs::read(path)?)
}
