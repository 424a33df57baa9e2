//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "MRCK"
//! version      u32
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON:
//!              {"config": NetConfig, "dtype": "f32"|"f64", "shapes": [[..], ..]}
//! tensors      for each shape in order:
//!                rank u32, rank x u32 extents, then the elements
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetConfig, NetParams};
use crate::error::{RegError, Result};
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    dtype: String,
    shapes: Vec<Vec<usize>>,
}

/// Serialises parameters into the checkpoint container.
pub fn write_checkpoint<T: Real>(params: &NetParams<T>, out: &mut impl Write) -> Result<()> {
    let header = Header {
        config: params.config().clone(),
        dtype: T::TYPE_TAG.to_string(),
        shapes: params.config().tensor_shapes(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| RegError::Header(e.to_string()))?;
    let mut buf = Vec::with_capacity(12 + json.len() + params.num_params() * T::BYTES);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (shape, t) in header.shapes.iter().zip(params.tensors()) {
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t {
            v.write_le(&mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(RegError::Truncated { offset: self.pos, needed: n, len: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_elements<T: Real, S: Real>(cur: &mut Cursor<'_>, n: usize) -> Result<Vec<T>> {
    let raw = cur.take(n * S::BYTES)?;
    Ok(raw.chunks_exact(S::BYTES).map(|c| T::c(S::read_le(c).f64())).collect())
}

/// Parses a checkpoint, converting elements to `T` if the stored type differs.
pub fn read_checkpoint<T: Real>(input: &mut impl Read) -> Result<NetParams<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(RegError::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(RegError::Unsupported(format!("checkpoint version {version}")));
    }
    let hlen = cur.u32()? as usize;
    let header: Header =
        serde_json::from_slice(cur.take(hlen)?).map_err(|e| RegError::Header(e.to_string()))?;
    header.config.validate()?;
    if header.shapes != header.config.tensor_shapes() {
        return Err(RegError::Header("tensor shapes disagree with the network config".into()));
    }
    let mut tensors = Vec::with_capacity(header.shapes.len());
    for shape in &header.shapes {
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        if &dims != shape {
            return Err(RegError::Header(format!("tensor tagged {dims:?}, header says {shape:?}")));
        }
        let n = dims.iter().product();
        let t = match header.dtype.as_str() {
            "f32" => read_elements::<T, f32>(&mut cur, n)?,
            "f64" => read_elements::<T, f64>(&mut cur, n)?,
            other => return Err(RegError::Unsupported(format!("element type {other}"))),
        };
        tensors.push(t);
    }
    NetParams::from_tensors(header.config, tensors)
}

pub fn save_checkpoint<T: Real>(params: &NetParams<T>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(params, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<NetParams<T>> {
    read_checkpoint(&mut std::fs::File::open(path)?)
}
