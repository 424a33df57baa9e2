//! Tensor container and PGM input.
//!
//! Container layout (integers little-endian):
//!
//! ```text
//! magic        4 bytes  "MFT1"
//! version      u32
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (see `Header`)
//! payload      contiguous elements; fields are component-major (x, y[, z])
//! ```

use std::io::Write;
use std::path::Path;

use msreg::evalkit::LabelMap;
use msreg::{Dims, DisplacementField, Image, Mask, Real, RegError, Result, Scale};
use serde::{Deserialize, Serialize};

pub const TENSOR_MAGIC: &[u8; 4] = b"MFT1";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Image,
    Field,
    Mask,
    Labels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub ndim: usize,
    /// Row-major extents.
    pub dims: Vec<usize>,
    /// "f32", "f64", "u8" (masks) or "u32" (labels).
    pub dtype: String,
    pub role: String,
    /// Resolution tag, e.g. "1" or "1/4".
    pub scale: String,
    pub layout: String,
    /// Class count, labels only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<u32>,
}

/// Any object stored in a tensor file.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor<T> {
    Image(Image<T>),
    Field(DisplacementField<T>),
    Mask(Mask),
    Labels(LabelMap),
}

impl<T: Real> Tensor<T> {
    pub fn role(&self) -> Role {
        match self {
            Tensor::Image(_) => Role::Image,
            Tensor::Field(_) => Role::Field,
            Tensor::Mask(_) => Role::Mask,
            Tensor::Labels(_) => Role::Labels,
        }
    }

    pub fn into_image(self) -> Result<Image<T>> {
        match self {
            Tensor::Image(i) => Ok(i),
            other => Err(wrong_role(Role::Image, other.role())),
        }
    }

    pub fn into_field(self) -> Result<DisplacementField<T>> {
        match self {
            Tensor::Field(f) => Ok(f),
            other => Err(wrong_role(Role::Field, other.role())),
        }
    }

    pub fn into_mask(self) -> Result<Mask> {
        match self {
            Tensor::Mask(m) => Ok(m),
            other => Err(wrong_role(Role::Mask, other.role())),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            Tensor::Labels(l) => Ok(l),
            other => Err(wrong_role(Role::Labels, other.role())),
        }
    }
}

fn wrong_role(want: Role, got: Role) -> RegError {
    RegError::Unsupported(format!("expected a {want:?} tensor, file holds {got:?}"))
}

fn header_for(dims: Dims, dtype: &str, role: &str, scale: Scale, classes: Option<u32>) -> Header {
    Header {
        version: TENSOR_VERSION,
        ndim: dims.ndim(),
        dims: dims.extents().to_vec(),
        dtype: dtype.into(),
        role: role.into(),
        scale: scale.to_string(),
        layout: "component-major".into(),
        classes,
    }
}

/// Serialises a tensor into container bytes.
pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let (header, mut payload) = match t {
        Tensor::Image(img) => {
            let mut p = Vec::with_capacity(img.data().len() * T::BYTES);
            img.data().iter().for_each(|v| v.write_le(&mut p));
            (header_for(img.dims(), T::TYPE_TAG, "image", Scale::ONE, None), p)
        }
        Tensor::Field(f) => {
            let mut p = Vec::with_capacity(f.data().len() * T::BYTES);
            f.data().iter().for_each(|v| v.write_le(&mut p));
            (header_for(f.dims(), T::TYPE_TAG, "field", f.scale(), None), p)
        }
        Tensor::Mask(m) => {
            let p = m.flags().iter().map(|&b| b as u8).collect();
            (header_for(m.dims(), "u8", "mask", Scale::ONE, None), p)
        }
        Tensor::Labels(l) => {
            let p = l.labels().iter().flat_map(|v| v.to_le_bytes()).collect();
            (header_for(l.dims(), "u32", "labels", Scale::ONE, Some(l.classes())), p)
        }
    };
    let json = serde_json::to_vec(&header).map_err(|e| RegError::Header(e.to_string()))?;
    let mut buf = Vec::with_capacity(12 + json.len() + payload.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.append(&mut payload);
    Ok(buf)
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

fn read_reals<T: Real, S: Real>(cur: &mut Cursor<'_>, n: usize) -> Result<Vec<T>> {
    let raw = cur.take(n * S::BYTES)?;
    Ok(raw.chunks_exact(S::BYTES).map(|c| T::c(S::read_le(c).f64())).collect())
}

fn reals<T: Real>(cur: &mut Cursor<'_>, dtype: &str, n: usize) -> Result<Vec<T>> {
    match dtype {
        "f32" => read_reals::<T, f32>(cur, n),
        "f64" => read_reals::<T, f64>(cur, n),
        other => Err(RegError::Unsupported(format!("element type {other} for real data"))),
    }
}

/// Parses container bytes; real data is converted to `T` when stored at the
/// other precision.
pub fn decode_tensor<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != TENSOR_MAGIC {
        return Err(RegError::BadMagic {
            expected: String::from_utf8_lossy(TENSOR_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = cur.u32()?;
    if version != TENSOR_VERSION {
        return Err(RegError::Unsupported(format!("tensor container version {version}")));
    }
    let hlen = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen)?).map_err(|e| RegError::Header(e.to_string()))?;
    if header.layout != "component-major" {
        return Err(RegError::Unsupported(format!("layout {}", header.layout)));
    }
    let dims = Dims::new(&header.dims).map_err(|e| RegError::Header(e.to_string()))?;
    if dims.ndim() != header.ndim {
        return Err(RegError::Header(format!("ndim {} but {} extents", header.ndim, header.dims.len())));
    }
    let n = dims.len();
    let t = match header.role.as_str() {
        "image" => Tensor::Image(Image::new(dims, reals(&mut cur, &header.dtype, n)?)?),
        "field" => {
            let scale: Scale = header.scale.parse().map_err(|e: RegError| RegError::Header(e.to_string()))?;
            let data = reals(&mut cur, &header.dtype, n * dims.ndim())?;
            Tensor::Field(DisplacementField::new(dims, data, scale)?)
        }
        "mask" => {
            if header.dtype != "u8" {
                return Err(RegError::Unsupported(format!("mask element type {}", header.dtype)));
            }
            let flags = cur.take(n)?.iter().map(|&b| b != 0).collect();
            Tensor::Mask(Mask::new(dims, flags)?)
        }
        "labels" => {
            if header.dtype != "u32" {
                return Err(RegError::Unsupported(format!("label element type {}", header.dtype)));
            }
            let classes = header.classes.ok_or_else(|| RegError::Header("labels without class count".into()))?;
            let labels = cur
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::Labels(LabelMap::new(dims, labels, classes)?)
        }
        other => return Err(RegError::Unsupported(format!("tensor role {other:?}"))),
    };
    if cur.pos != bytes.len() {
        return Err(RegError::Header(format!(
            "{} trailing bytes after payload at offset {}",
            bytes.len() - cur.pos,
            cur.pos
        )));
    }
    Ok(t)
}

pub fn save_tensor<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let bytes = encode_tensor(t)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a tensor container, or a binary PGM (`P5`) as a 2D image.
pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"P5") {
        return decode_pgm(&bytes).map(Tensor::Image);
    }
    decode_tensor(&bytes)
}

/// Binary greyscale PGM with 8- or 16-bit samples, scaled by `1 / maxval`.
pub fn decode_pgm<T: Real>(bytes: &[u8]) -> Result<Image<T>> {
    if !bytes.starts_with(b"P5") {
        return Err(RegError::BadMagic {
            expected: "P5".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(RegError::Header(format!("PGM header: expected a number at offset {start}")));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| RegError::Header(format!("PGM header: number too large at offset {start}")))?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(RegError::Header(format!("PGM header: missing separator at offset {pos}")));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(RegError::Unsupported(format!("PGM maxval {maxval}")));
    }
    let dims = Dims::d2(height, width);
    let bps = if maxval < 256 { 1 } else { 2 };
    let mut cur = Cursor { bytes, pos };
    let raster = cur.take(width * height * bps)?;
    let scale = 1.0 / maxval as f64;
    let data = if bps == 1 {
        raster.iter().map(|&v| T::c(v as f64 * scale)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| T::c(u16::from_be_bytes([c[0], c[1]]) as f64 * scale))
            .collect()
    };
    Image::new(dims, data)
}
