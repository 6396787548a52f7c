//! Middlebury `.flo` optical flow files: 4 ASCII magic bytes "PIEH",
//! 32-bit little-endian width and height, then row-major (u, v) pairs of
//! 32-bit little-endian floats.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::flow::FlowField;

const MAGIC: &[u8; 4] = b"PIEH";

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + flow.vectors().len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for [u, v] in flow.vectors() {
        bytes.extend_from_slice(&(*u as f32).to_le_bytes());
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path)?;
    let fail = |kind: FormatError| Error::format(path, kind);
    if bytes.len() < 12 {
        return Err(fail(FormatError::Truncated {
            expected: 12,
            found: bytes.len(),
        }));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(FormatError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        }));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(fail(FormatError::MalformedHeader(format!(
            "dimensions {width}x{height}"
        ))));
    }
    let (width, height) = (width as usize, height as usize);
    let expected = 12 + width * height * 8;
    if bytes.len() != expected {
        return Err(fail(FormatError::Truncated {
            expected,
            found: bytes.len(),
        }));
    }
    let mut vectors = Vec::with_capacity(width * height);
    for i in 0..width * height {
        let off = 12 + i * 8;
        let u = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let v = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
        if !u.is_finite() || !v.is_finite() {
            return Err(fail(FormatError::NonFinite(off)));
        }
        vectors.push([u as f64, v as f64]);
    }
    FlowField::new(width, height, vectors)
}
