//! Directory-level loading and writing of frame/flow/mask sequences.
//! Files are processed in ascending filename order; writers emit
//! zero-padded names so the order is stable.

use std::path::{Path, PathBuf};

use tempoflow::diffusion::{ConditionStack, Modality};
use tempoflow::flow::{FlowField, OcclusionMask};
use tempoflow::formats;
use tempoflow::Tensor;

use crate::fail::{Class, CliError};

pub fn list_sorted(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| {
        CliError::new(Class::Data, format!("cannot list {}: {e}", dir.display()))
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|s| s.to_str()) == Some(ext))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::new(
            Class::Data,
            format!("no .{ext} files in {}", dir.display()),
        ));
    }
    Ok(files)
}

pub fn load_frames(dir: &Path) -> Result<Vec<Tensor>, CliError> {
    list_sorted(dir, "png")?
        .iter()
        .map(|p| formats::read_png(p).map_err(CliError::from))
        .collect()
}

pub fn load_flows(dir: &Path) -> Result<Vec<FlowField>, CliError> {
    list_sorted(dir, "flo")?
        .iter()
        .map(|p| formats::read_flo(p).map_err(CliError::from))
        .collect()
}

pub fn load_occlusions(dir: &Path) -> Result<Vec<OcclusionMask>, CliError> {
    list_sorted(dir, "pgm")?
        .iter()
        .map(|p| formats::read_pgm(p).map_err(CliError::from))
        .collect()
}

/// Conditions by modality: depth maps normalized to \[0,1\] by the global
/// maximum, or normal maps as stored.
pub fn load_conditions(dir: &Path, modality: Modality) -> Result<ConditionStack, CliError> {
    let frames: Vec<Tensor> = match modality {
        Modality::Depth => {
            let depths = list_sorted(dir, "pfm")?
                .iter()
                .map(|p| formats::read_pfm(p).map_err(CliError::from))
                .collect::<Result<Vec<_>, _>>()?;
            let max = depths
                .iter()
                .map(|d| d.max_value())
                .fold(f64::MIN, f64::max);
            depths
                .iter()
                .map(|d| {
                    let values: Vec<f64> = d.values().iter().map(|v| v / max).collect();
                    Tensor::from_vec(&[1, d.height(), d.width()], values).map_err(CliError::from)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        Modality::Normal => load_frames(dir)?,
    };
    ConditionStack::new(frames, modality).map_err(CliError::from)
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::new(Class::Data, format!("cannot create {}: {e}", dir.display()))
    })
}

pub fn write_frames(dir: &Path, frames: &[Tensor]) -> Result<(), CliError> {
    ensure_dir(dir)?;
    for (t, f) in frames.iter().enumerate() {
        formats::write_png(&dir.join(format!("frame_{t:04}.png")), f)?;
    }
    Ok(())
}
