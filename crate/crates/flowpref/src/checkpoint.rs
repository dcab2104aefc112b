//! Binary tensor container.
//!
//! Layout (all integers little-endian u32 unless noted):
//!
//! ```text
//! magic   b"FPLB"
//! version u32 (currently 1)
//! count   u32
//! count * { name_len u32, name utf8, ndim u32, dims u32... }
//! all tensor payloads in order, little-endian f64 each
//! ```
//!
//! Round-trips are bit-exact: floats are copied via `to_le_bytes`, never
//! reformatted. The same container backs model checkpoints, dataset video
//! blocks, and pair blocks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FPLB";
pub const VERSION: u32 = 1;

pub fn write_tensors<P: AsRef<Path>>(path: P, tensors: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in tensors {
        t.check_finite(&format!("tensor '{name}' before write"))?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensors<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;

    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = take_u32(&mut pos)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = take_u32(&mut pos)? as usize;

    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = take_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid tensor name".into()))?;
        let ndim = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u32(&mut pos)? as usize);
        }
        headers.push((name, shape));
    }

    let mut out = Vec::with_capacity(count);
    for (name, shape) in headers {
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(out)
}
