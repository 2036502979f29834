//! PNG encodings for rasters and masks.
//!
//! Images are 8-bit RGB; masks are 8-bit single channel written as 0/255 and
//! decoded with a midpoint threshold (>= 128 is set). Decoding is strict:
//! any other color type is rejected instead of converted, except through
//! [`decode_image_png_converting`] which is meant for user uploads.

use std::io::Cursor;

use base64::Engine;
use image::{ColorType, DynamicImage, ImageFormat};

use crate::raster::{BinaryMask, RasterError, RasterImage, Result};

pub const MASK_THRESHOLD: u8 = 128;

fn encode(img: DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| RasterError::Codec(e.to_string()))?;
    Ok(buf.into_inner())
}

fn decode(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| RasterError::Codec(format!("png decode failed: {e}")))
}

pub fn encode_image_png(img: &RasterImage) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(img.width(), img.height(), img.pixels().to_vec())
        .ok_or_else(|| RasterError::Codec("rgb buffer size mismatch".into()))?;
    encode(DynamicImage::ImageRgb8(buf))
}

pub fn decode_image_png(bytes: &[u8]) -> Result<RasterImage> {
    match decode(bytes)? {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            RasterImage::new(w, h, buf.into_raw())
        }
        other => Err(RasterError::Codec(format!(
            "expected 8-bit RGB image, found {}",
            color_name(other.color())
        ))),
    }
}

/// Decode any PNG, flattening it to 8-bit RGB (alpha is dropped). The flag
/// reports whether a conversion happened.
pub fn decode_image_png_converting(bytes: &[u8]) -> Result<(RasterImage, bool)> {
    let img = decode(bytes)?;
    let converted = img.color() != ColorType::Rgb8;
    let buf = img.into_rgb8();
    let (w, h) = buf.dimensions();
    Ok((RasterImage::new(w, h, buf.into_raw())?, converted))
}

pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let raw = mask.bits().iter().map(|b| if *b { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width(), mask.height(), raw)
        .ok_or_else(|| RasterError::Codec("mask buffer size mismatch".into()))?;
    encode(DynamicImage::ImageLuma8(buf))
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask> {
    match decode(bytes)? {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            let bits = buf.into_raw().into_iter().map(|v| v >= MASK_THRESHOLD).collect();
            BinaryMask::new(w, h, bits)
        }
        other => Err(RasterError::Codec(format!(
            "expected 8-bit single-channel mask, found {}",
            color_name(other.color())
        ))),
    }
}

fn color_name(c: ColorType) -> String {
    format!("{c:?} ({} channels)", c.channel_count())
}

pub fn image_to_b64(img: &RasterImage) -> Result<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(encode_image_png(img)?))
}

pub fn mask_to_b64(mask: &BinaryMask) -> Result<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(encode_mask_png(mask)?))
}

fn unb64(s: &str) -> Result<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(s.trim())
        .map_err(|e| RasterError::Codec(format!("invalid base64: {e}")))
}

pub fn image_from_b64(s: &str) -> Result<RasterImage> {
    decode_image_png(&unb64(s)?)
}

pub fn mask_from_b64(s: &str) -> Result<BinaryMask> {
    decode_mask_png(&unb64(s)?)
}
