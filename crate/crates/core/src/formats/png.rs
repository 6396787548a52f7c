//! Frames as 8-bit RGB PNG. A stored byte v encodes intensity v/255;
//! quantization on write is round-half-up.

use std::path::Path;

use image::{DynamicImage, ImageReader, RgbImage};

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub fn write_png(path: &Path, frame: &Tensor) -> Result<()> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::contract(format!(
            "PNG frames must be [3,H,W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let mut raw = vec![0u8; 3 * plane];
    frame.with_data(|d| {
        for i in 0..plane {
            for ch in 0..3 {
                let q = (d[ch * plane + i] * 255.0 + 0.5).floor().clamp(0.0, 255.0);
                raw[i * 3 + ch] = q as u8;
            }
        }
    });
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized above");
    img.save(path)
        .map_err(|e| Error::format(path, FormatError::MalformedHeader(e.to_string())))
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let decoded = ImageReader::open(path)?
        .decode()
        .map_err(|e| Error::format(path, FormatError::MalformedHeader(e.to_string())))?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(Error::format(
                path,
                FormatError::UnsupportedVariant(format!(
                    "expected 8-bit RGB, got {:?}",
                    other.color()
                )),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f64; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px.0[ch] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}
