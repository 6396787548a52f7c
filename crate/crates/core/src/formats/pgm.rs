//! Masks as binary PGM ("P5", maxval 255): 255 marks occluded/invalid,
//! 0 marks clear. Values are strictly binary.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::flow::OcclusionMask;

pub fn write_pgm(path: &Path, mask: &OcclusionMask) -> Result<()> {
    let (w, h) = (mask.width(), mask.height());
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.as_slice().iter().map(|&o| if o { 255u8 } else { 0 }));
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<OcclusionMask> {
    let bytes = fs::read(path)?;
    let fail = |kind: FormatError| Error::format(path, kind);

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
    if magic == "P2" {
        return Err(fail(FormatError::UnsupportedVariant(
            "ASCII PGM (\"P2\"); only binary \"P5\" is supported".into(),
        )));
    }
    if magic != "P5" {
        return Err(fail(FormatError::BadMagic {
            expected: "P5".into(),
            found: magic,
        }));
    }
    let width: usize = token("width")?
        .parse()
        .map_err(|_| fail(FormatError::MalformedHeader("width".into())))?;
    let height: usize = token("height")?
        .parse()
        .map_err(|_| fail(FormatError::MalformedHeader("height".into())))?;
    let maxval: u32 = token("maxval")?
        .parse()
        .map_err(|_| fail(FormatError::MalformedHeader("maxval".into())))?;
    if maxval != 255 {
        return Err(fail(FormatError::UnsupportedVariant(format!(
            "maxval {maxval}; only 8-bit masks are supported"
        ))));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail(FormatError::MalformedHeader(
            "expected single whitespace before raster".into(),
        )));
    }
    pos += 1;

    let expected = pos + width * height;
    if bytes.len() < expected {
        return Err(fail(FormatError::Truncated {
            expected,
            found: bytes.len(),
        }));
    }
    let mut occluded = Vec::with_capacity(width * height);
    for (i, &b) in bytes[pos..expected].iter().enumerate() {
        match b {
            0 => occluded.push(false),
            255 => occluded.push(true),
            other => {
                return Err(fail(FormatError::UnsupportedVariant(format!(
                    "mask byte {other} at offset {} is neither 0 nor 255",
                    pos + i
                ))))
            }
        }
    }
    OcclusionMask::new(width, height, occluded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_clear_mask_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = OcclusionMask::clear(5, 3);
        write_pgm(&path, &mask).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), mask);
    }

    #[test]
    fn mixed_mask_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = OcclusionMask::new(3, 2, vec![true, false, true, true, false, false]).unwrap();
        write_pgm(&path, &mask).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), mask);
    }

    #[test]
    fn ascii_variant_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        std::fs::write(&path, b"P2\n1 1\n255\n0\n").unwrap();
        match read_pgm(&path) {
            Err(Error::Format {
                kind: FormatError::UnsupportedVariant(_),
                ..
            }) => {}
            other => panic!("expected UnsupportedVariant, got {other:?}"),
        }
    }

    #[test]
    fn non_binary_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        std::fs::write(&path, b"P5\n1 1\n255\n\x80").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
