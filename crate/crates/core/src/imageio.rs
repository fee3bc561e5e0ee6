//! Image ingestion: 8-bit grayscale PGM (P5) and raw `f64` tensor files.
//!
//! Raw tensor layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "FXT1"
//! ndims   u32
//! dims    ndims × u64
//! values  Π dims × f64
//! ```

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::ImageSample;

pub const RAW_TENSOR_MAGIC: &[u8; 4] = b"FXT1";

/// Byte value → intensity in `[0, 1]`.
pub fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 255.0
}

/// Intensity → nearest byte.
pub fn unit_to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<ImageSample> {
    let reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Pnm);
    let img = reader
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::format(
            path,
            format!("expected 8-bit grayscale, got {:?}", img.color()),
        ));
    }
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.as_raw().iter().map(|&b| byte_to_unit(b)).collect();
    ImageSample::new(Tensor::new([h as usize, w as usize], data)?)
}

pub fn read_pgm(path: &Path) -> Result<ImageSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(path, &bytes)
}

pub fn encode_pgm(img: &ImageSample) -> Result<Vec<u8>> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    let raw: Vec<u8> = img.pixels().data().iter().map(|&v| unit_to_byte(v)).collect();
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&raw, w, h, ExtendedColorType::L8)
        .map_err(|e| Error::contract(format!("PGM encoding failed: {e}")))?;
    Ok(out)
}

pub fn write_pgm(path: &Path, img: &ImageSample) -> Result<()> {
    fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e))
}

pub fn encode_raw_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(RAW_TENSOR_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw_tensor(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if bytes.len() < 8 || &bytes[..4] != RAW_TENSOR_MAGIC {
        return Err(bad("missing FXT1 magic"));
    }
    let ndims = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        let chunk = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated dims"))?;
        dims.push(u64::from_le_bytes(chunk.try_into().unwrap()) as usize);
        pos += 8;
    }
    let n: usize = dims.iter().product();
    let body = &bytes[pos..];
    if body.len() != n * 8 {
        return Err(bad(&format!("expected {n} values, found {} bytes", body.len())));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data).map_err(|e| bad(&e.to_string()))
}

pub fn read_raw_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw_tensor(path, &bytes)
}

pub fn write_raw_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_raw_tensor(t)).map_err(|e| Error::io(path, e))
}

/// Loads an image by extension: `.pgm` or a raw tensor (`.fxt`, `.bin`).
pub fn read_image(path: &Path) -> Result<ImageSample> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path),
        _ => ImageSample::new(read_raw_tensor(path)?),
    }
}
