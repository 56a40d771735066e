//! `MTSC1` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MTSC1"  u32 count
//! repeat count:
//!     u32 name_len  name (UTF-8)  u32 rank  u32 dims[rank]  f64 payload[prod(dims)]
//! ```
//!
//! Extra sections may follow the tensor directory; [`read_tensors`] stops at
//! the end of the directory and leaves the reader positioned there.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MTSC1";

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str<R: Read>(r: &mut R, format: &'static str) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::format(format, format!("name length {n} too large")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::format(format, e.to_string()))
}

pub(crate) fn write_shape<W: Write>(w: &mut W, shape: &[usize]) -> Result<()> {
    write_u32(w, shape.len() as u32)?;
    for &d in shape {
        write_u32(w, d as u32)?;
    }
    Ok(())
}

pub(crate) fn read_shape<R: Read>(r: &mut R, format: &'static str) -> Result<Vec<usize>> {
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(format, format!("bad rank {rank}")));
    }
    (0..rank).map(|_| Ok(read_u32(r)? as usize)).collect()
}

pub fn write_tensors<'a, W, I>(w: &mut W, tensors: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    I::IntoIter: ExactSizeIterator,
{
    let it = tensors.into_iter();
    w.write_all(MAGIC)?;
    write_u32(w, it.len() as u32)?;
    for (name, t) in it {
        write_str(w, name)?;
        write_shape(w, t.shape())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("MTSC1", "bad magic"));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = read_str(r, "MTSC1")?;
        let shape = read_shape(r, "MTSC1")?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save<'a, I>(path: &std::path::Path, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    I::IntoIter: ExactSizeIterator,
{
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let bytes = std::fs::read(path)?;
    read_tensors(&mut bytes.as_slice())
}
