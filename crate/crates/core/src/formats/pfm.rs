//! Grayscale PFM depth maps: "Pf" magic, a dimensions line, a scale line
//! whose sign encodes endianness (we write -1.0, little-endian), then
//! 32-bit float rows stored bottom-to-top.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::flow::DepthMap;

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            bytes.extend_from_slice(&(depth.at(x, y) as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path)?;
    let fail = |kind: FormatError| Error::format(path, kind);

    // header: three whitespace-separated tokens, one whitespace byte,
    // then the raster
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail(FormatError::MalformedHeader(format!("missing {what}"))));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token("magic")?;
    if magic == "PF" {
        return Err(fail(FormatError::UnsupportedVariant(
            "color PFM (\"PF\"); only grayscale \"Pf\" is supported".into(),
        )));
    }
    if magic != "Pf" {
        return Err(fail(FormatError::BadMagic {
            expected: "Pf".into(),
            found: magic,
        }));
    }
    let width: usize = token("width")?
        .parse()
        .map_err(|_| fail(FormatError::MalformedHeader("width".into())))?;
    let height: usize = token("height")?
        .parse()
        .map_err(|_| fail(FormatError::MalformedHeader("height".into())))?;
    let scale: f64 = token("scale")?
        .parse()
        .map_err(|_| fail(FormatError::MalformedHeader("scale".into())))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(fail(FormatError::MalformedHeader("scale must be nonzero".into())));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail(FormatError::MalformedHeader(
            "expected single whitespace before raster".into(),
        )));
    }
    pos += 1;

    let expected = pos + width * height * 4;
    if bytes.len() < expected {
        return Err(fail(FormatError::Truncated {
            expected,
            found: bytes.len(),
        }));
    }
    let little_endian = scale < 0.0;
    let mut values = vec![0.0f64; width * height];
    for row in 0..height {
        let y = height - 1 - row; // rows are stored bottom-to-top
        for x in 0..width {
            let off = pos + (row * width + x) * 4;
            let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            if !v.is_finite() {
                return Err(fail(FormatError::NonFinite(off)));
            }
            values[y * width + x] = v as f64;
        }
    }
    DepthMap::new(width, height, values)
}
