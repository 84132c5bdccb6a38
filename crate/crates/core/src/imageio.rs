//! 8-bit grayscale image I/O. Pixels map to f32 intensities by dividing by
//! 255; saving rounds `value * 255` back to bytes.

use std::path::Path;

use image::{GrayImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_gray(path: &Path) -> Result<Tensor> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Writes a `[0, 1]` intensity map as PNG or PGM depending on the extension.
pub fn save_gray(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3("save_gray")?;
    if c != 1 {
        return Err(Error::invalid("save_gray", "expected a single-channel image"));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::invalid("save_gray", "image buffer construction failed"))?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    img.save_with_format(path, format)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
