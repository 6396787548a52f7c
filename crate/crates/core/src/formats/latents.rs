//! Optimized latents persist as one raw little-endian f64 dump per frame
//! plus a JSON sidecar recording the shape, noise level, and frame count.
//! Round trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::LatentSequence;
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const LATENT_SIDECAR_NAME: &str = "latents.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentSidecar {
    pub count: usize,
    pub shape: Vec<usize>,
    pub level: usize,
}

fn frame_file(dir: &Path, t: usize) -> std::path::PathBuf {
    dir.join(format!("latent_{t:04}.bin"))
}

pub fn write_latents(dir: &Path, latents: &LatentSequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    let sidecar = LatentSidecar {
        count: latents.len(),
        shape: latents.latent(0).shape().to_vec(),
        level: latents.level(),
    };
    fs::write(
        dir.join(LATENT_SIDECAR_NAME),
        serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    for t in 0..latents.len() {
        let mut bytes = Vec::with_capacity(latents.latent(t).len() * 8);
        latents.latent(t).with_data(|d| {
            for v in d {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        });
        fs::write(frame_file(dir, t), bytes)?;
    }
    Ok(())
}

pub fn read_latents(dir: &Path) -> Result<LatentSequence> {
    let sidecar_path = dir.join(LATENT_SIDECAR_NAME);
    let raw = fs::read(&sidecar_path)?;
    let sidecar: LatentSidecar = serde_json::from_slice(&raw)
        .map_err(|e| Error::format(&sidecar_path, FormatError::MalformedHeader(e.to_string())))?;
    if sidecar.count == 0 {
        return Err(Error::format(
            &sidecar_path,
            FormatError::MalformedHeader("count must be positive".into()),
        ));
    }
    let numel: usize = sidecar.shape.iter().product();
    let mut latents = Vec::with_capacity(sidecar.count);
    for t in 0..sidecar.count {
        let path = frame_file(dir, t);
        let bytes = fs::read(&path)?;
        if bytes.len() != numel * 8 {
            return Err(Error::format(
                &path,
                FormatError::Truncated {
                    expected: numel * 8,
                    found: bytes.len(),
                },
            ));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let v = f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(&path, FormatError::NonFinite(i * 8)));
            }
            data.push(v);
        }
        latents.push(Tensor::from_vec(&sidecar.shape, data)?);
    }
    LatentSequence::new(latents, sidecar.level)
}
