//! Binary file formats and portable pixmaps.
//!
//! | magic  | header (u32 LE)        | payload (LE)                          |
//! |--------|------------------------|---------------------------------------|
//! | `PFF1` | height, width          | `f32` dx, dy per pixel                 |
//! | `PAF1` | height, width          | `f32` a11 a12 tx a21 a22 ty per pixel  |
//! | `PFM1` | height, width, depth   | `f32`, channel-fastest                 |
//! | `PNP1` | block count            | per block: name, shape, `f64` payload  |
//!
//! All payloads are row-major. Decoders report the byte offset of the first
//! problem they find.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::features::DescriptorMap;
use crate::geometry::{Affine2D, AffineField, FlowField};
use crate::image::Image;

pub const FLOW_MAGIC: &[u8; 4] = b"PFF1";
pub const AFFINE_MAGIC: &[u8; 4] = b"PAF1";
pub const FEATURE_MAGIC: &[u8; 4] = b"PFM1";
pub const PARAMS_MAGIC: &[u8; 4] = b"PNP1";

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or_else(|| {
            FormatError::DimensionOverflow(format!("{n} bytes at offset {}", self.pos))
        })?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated {
                offset: self.pos,
                expected: end,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> std::result::Result<(), FormatError> {
        let found = self.buf.get(..4).unwrap_or(self.buf);
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        self.pos = 4;
        Ok(())
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Checks that `count` items of `size` bytes remain, then returns them.
    fn payload(&mut self, count: usize, size: usize) -> std::result::Result<&'a [u8], FormatError> {
        let bytes = count
            .checked_mul(size)
            .filter(|b| *b <= isize::MAX as usize)
            .ok_or_else(|| FormatError::DimensionOverflow(format!("{count} elements of {size} bytes")))?;
        self.take(bytes)
    }

    fn finish(&self) -> std::result::Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::TrailingBytes { offset: self.pos });
        }
        Ok(())
    }
}

fn dims_product(dims: &[u32]) -> std::result::Result<usize, FormatError> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize)
            .ok_or_else(|| FormatError::DimensionOverflow(format!("dimensions {dims:?}")))
    })
}

fn f32s(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} {v} exceeds u32")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_flow(flow: &FlowField) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + flow.data.len() * 8);
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&dim_u32(flow.height, "height")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(flow.width, "width")?.to_le_bytes());
    for v in &flow.data {
        out.extend_from_slice(&(v[0] as f32).to_le_bytes());
        out.extend_from_slice(&(v[1] as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    let mut c = Cursor::new(bytes);
    c.magic(FLOW_MAGIC)?;
    let h = c.u32()?;
    let w = c.u32()?;
    let n = dims_product(&[h, w, 2])?;
    let vals: Vec<f32> = f32s(c.payload(n, 4)?).collect();
    c.finish()?;
    let data = vals
        .chunks_exact(2)
        .map(|p| [f64::from(p[0]), f64::from(p[1])])
        .collect();
    FlowField::new(h as usize, w as usize, data)
}

pub fn encode_affine_field(field: &AffineField) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + field.cells.len() * 24);
    out.extend_from_slice(AFFINE_MAGIC);
    out.extend_from_slice(&dim_u32(field.height, "height")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(field.width, "width")?.to_le_bytes());
    for t in &field.cells {
        for p in t.params() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_affine_field(bytes: &[u8]) -> Result<AffineField> {
    let mut c = Cursor::new(bytes);
    c.magic(AFFINE_MAGIC)?;
    let h = c.u32()?;
    let w = c.u32()?;
    let n = dims_product(&[h, w, 6])?;
    let vals: Vec<f32> = f32s(c.payload(n, 4)?).collect();
    c.finish()?;
    let cells = vals
        .chunks_exact(6)
        .map(|p| {
            let mut q = [0.0; 6];
            for (d, s) in q.iter_mut().zip(p) {
                *d = f64::from(*s);
            }
            Affine2D::from_params(q)
        })
        .collect();
    AffineField::new(h as usize, w as usize, cells)
}

pub fn encode_feature_map(map: &DescriptorMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + map.data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&dim_u32(map.height, "height")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(map.width, "width")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(map.depth, "depth")?.to_le_bytes());
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a feature map. The `normalized` flag is recomputed from the data.
pub fn decode_feature_map(bytes: &[u8]) -> Result<DescriptorMap> {
    let mut c = Cursor::new(bytes);
    c.magic(FEATURE_MAGIC)?;
    let h = c.u32()?;
    let w = c.u32()?;
    let d = c.u32()?;
    let n = dims_product(&[h, w, d])?;
    let data: Vec<f32> = f32s(c.payload(n, 4)?).collect();
    c.finish()?;
    let mut map = DescriptorMap::new(h as usize, w as usize, d as usize, data)?;
    map.normalized = map.check_normalized(1e-6);
    Ok(map)
}

pub fn save_feature_map(map: &DescriptorMap, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_feature_map(map)?)
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<DescriptorMap> {
    decode_feature_map(&read_file(path.as_ref())?)
}

pub fn save_flow(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_flow(flow)?)
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flow(&read_file(path.as_ref())?)
}

pub fn save_affine_field(field: &AffineField, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_affine_field(field)?)
}

pub fn load_affine_field(path: impl AsRef<Path>) -> Result<AffineField> {
    decode_affine_field(&read_file(path.as_ref())?)
}

/// A named `f64` tensor inside a parameter checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_param_blocks(blocks: &[ParamBlock]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&dim_u32(blocks.len(), "block count")?.to_le_bytes());
    for b in blocks {
        let expected: usize = b.shape.iter().product();
        if expected != b.data.len() {
            return Err(Error::Shape(format!(
                "block {} has {} values for shape {:?}",
                b.name,
                b.data.len(),
                b.shape
            )));
        }
        out.extend_from_slice(&dim_u32(b.name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&dim_u32(b.shape.len(), "rank")?.to_le_bytes());
        for d in &b.shape {
            out.extend_from_slice(&dim_u32(*d, "dimension")?.to_le_bytes());
        }
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_param_blocks(bytes: &[u8]) -> Result<Vec<ParamBlock>> {
    let mut c = Cursor::new(bytes);
    c.magic(PARAMS_MAGIC)?;
    let count = c.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_at = c.pos;
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| FormatError::Malformed {
                offset: name_at,
                message: "block name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = c.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(c.u32()?);
        }
        let n = dims_product(&dims)?;
        let data = c
            .payload(n, 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        blocks.push(ParamBlock {
            name,
            shape: dims.iter().map(|&d| d as usize).collect(),
            data,
        });
    }
    c.finish()?;
    Ok(blocks)
}

fn pnm_token<'a>(c: &mut Cursor<'a>) -> std::result::Result<(usize, &'a str), FormatError> {
    // Skip whitespace and `#` comments.
    loop {
        match c.buf.get(c.pos) {
            Some(b) if b.is_ascii_whitespace() => c.pos += 1,
            Some(b'#') => {
                while let Some(b) = c.buf.get(c.pos) {
                    c.pos += 1;
                    if *b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = c.pos;
    while c.buf.get(c.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        c.pos += 1;
    }
    if start == c.pos {
        return Err(FormatError::Truncated {
            offset: start,
            expected: start + 1,
            actual: c.buf.len(),
        });
    }
    let s = std::str::from_utf8(&c.buf[start..c.pos]).map_err(|_| FormatError::Malformed {
        offset: start,
        message: "non-ASCII header token".into(),
    })?;
    Ok((start, s))
}

fn pnm_number(c: &mut Cursor<'_>) -> std::result::Result<usize, FormatError> {
    let (at, tok) = pnm_token(c)?;
    tok.parse().map_err(|_| FormatError::Malformed {
        offset: at,
        message: format!("expected a number, found {tok:?}"),
    })
}

/// Decodes binary PGM (`P5`) or PPM (`P6`) into `[0, 1]` intensities.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut c = Cursor::new(bytes);
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        other => {
            return Err(FormatError::BadMagic {
                expected: "P5 or P6".into(),
                found: String::from_utf8_lossy(other.unwrap_or(bytes)).into_owned(),
            }
            .into())
        }
    };
    c.pos = 2;
    let w = pnm_number(&mut c)?;
    let h = pnm_number(&mut c)?;
    let max_at = c.pos;
    let maxval = pnm_number(&mut c)?;
    if maxval == 0 || maxval > 65535 {
        return Err(FormatError::Malformed {
            offset: max_at,
            message: format!("maxval {maxval} outside 1..=65535"),
        }
        .into());
    }
    // Exactly one whitespace byte separates the header from the raster.
    c.take(1)?;
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| FormatError::DimensionOverflow(format!("{w}x{h}x{channels}")))?;
    let size = if maxval < 256 { 1 } else { 2 };
    let raw = c.payload(n, size)?;
    c.finish()?;
    let scale = 1.0 / maxval as f64;
    let data = if size == 1 {
        raw.iter().map(|&v| f64::from(v) * scale).collect()
    } else {
        raw.chunks_exact(2)
            .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) * scale)
            .collect()
    };
    Image::new(h, w, channels, data)
}

/// Encodes an image as 8-bit PGM (1 channel) or PPM (3 channels).
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let tag = match img.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::InvalidInput(format!(
                "pixmaps hold 1 or 3 channels, image has {c}"
            )))
        }
    };
    let mut out = format!("{tag}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| quantize_u8(*v)));
    Ok(out)
}

/// Rounds an intensity in `[0, 1]` to 8 bits, clamping outside values.
pub fn quantize_u8(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    decode_pnm(&read_file(path.as_ref())?)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pnm(img)?)
}
