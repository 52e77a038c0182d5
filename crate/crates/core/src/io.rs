//! File formats.
//!
//! Dense tensor files (`.dtf`) are a 20-byte header followed by raw
//! little-endian `f32` values in the same row-major order as [`Tensor3`]:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SEGT"
//! 4       1     version (0x01)
//! 5       1     dtype   (0x01 = f32 LE)
//! 6       2     reserved, zero
//! 8       4     height  (u32 LE)
//! 12      4     width   (u32 LE)
//! 16      4     channels(u32 LE)
//! 20      ...   height*width*channels f32 LE
//! ```
//!
//! Label masks and drop masks are 8-bit grayscale PNG, images 8-bit RGB PNG.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{ImageRgb, LabelMask, Tensor3};

pub const DTF_MAGIC: &[u8; 4] = b"SEGT";
pub const DTF_VERSION: u8 = 0x01;
pub const DTF_DTYPE_F32: u8 = 0x01;
const DTF_HEADER: usize = 20;

pub fn encode_dtf(t: &Tensor3<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(DTF_HEADER + 4 * t.data().len());
    out.extend_from_slice(DTF_MAGIC);
    out.extend_from_slice(&[DTF_VERSION, DTF_DTYPE_F32, 0, 0]);
    for d in [t.height(), t.width(), t.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a `.dtf` buffer. `origin` only labels errors.
pub fn decode_dtf(bytes: &[u8], origin: &Path) -> Result<Tensor3<f32>> {
    if bytes.len() < DTF_HEADER {
        return Err(Error::format(origin, "truncated header"));
    }
    if &bytes[0..4] != DTF_MAGIC {
        return Err(Error::format(origin, "bad magic"));
    }
    if bytes[4] != DTF_VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported version {}", bytes[4]),
        ));
    }
    if bytes[5] != DTF_DTYPE_F32 {
        return Err(Error::format(
            origin,
            format!("unsupported dtype {}", bytes[5]),
        ));
    }
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(8), dim(12), dim(16));
    let n = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(c))
        .ok_or_else(|| Error::format(origin, "dimensions overflow"))?;
    let payload = &bytes[DTF_HEADER..];
    if payload.len() != n * 4 {
        return Err(Error::format(
            origin,
            format!("expected {} payload bytes, found {}", n * 4, payload.len()),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(origin, "non-finite value"));
    }
    Tensor3::from_vec(h, w, c, data)
}

pub fn write_dtf(path: &Path, t: &Tensor3<f32>) -> Result<()> {
    write_bytes(path, &encode_dtf(t))
}

pub fn read_dtf(path: &Path) -> Result<Tensor3<f32>> {
    decode_dtf(&read_bytes(path)?, path)
}

pub fn write_mask_png(path: &Path, mask: &LabelMask) -> Result<()> {
    write_gray_png(path, mask.width(), mask.height(), mask.labels().to_vec())
}

pub fn read_mask_png(path: &Path) -> Result<LabelMask> {
    let img = decode_png(path)?.into_luma8();
    let (w, h) = img.dimensions();
    LabelMask::from_vec(h as usize, w as usize, img.into_raw())
}

/// Writes a boolean mask as 255 (set) / 0 (unset).
pub fn write_bool_png(path: &Path, height: usize, width: usize, bits: &[bool]) -> Result<()> {
    let raw = bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_gray_png(path, width, height, raw)
}

pub fn read_bool_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = decode_png(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let bits = img.into_raw().into_iter().map(|v| v >= 128).collect();
    Ok((h as usize, w as usize, bits))
}

pub fn write_image_png(path: &Path, img: &ImageRgb) -> Result<()> {
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .expect("buffer sized from image dimensions");
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_bytes(path, &bytes)
}

pub fn read_image_png(path: &Path) -> Result<ImageRgb> {
    let img = decode_png(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    ImageRgb::from_rgb8(h as usize, w as usize, img.as_raw())
}

fn write_gray_png(path: &Path, width: usize, height: usize, raw: Vec<u8>) -> Result<()> {
    let buf = GrayImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::dim("mask buffer does not match its dimensions"))?;
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_bytes(path, &bytes)
}

fn decode_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read_bytes(path)?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
