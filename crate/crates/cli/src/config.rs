//! The run configuration consumed by `optimize` and `render`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempoflow::consistency::OptimConfig;
use tempoflow::diffusion::{GeneratorSpec, Modality, DEFAULT_ALPHA_MIN, DEFAULT_STEPS};

use crate::fail::{CliError, Class};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_alpha_min")]
    pub alpha_min: f64,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_alpha_min() -> f64 {
    DEFAULT_ALPHA_MIN
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: DEFAULT_STEPS,
            alpha_min: DEFAULT_ALPHA_MIN,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub gamma: Option<usize>,
    #[serde(default = "one")]
    pub keyframe_stride: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub shared_init: bool,
}

fn one() -> usize {
    1
}

fn default_epochs() -> usize {
    300
}

fn default_lr() -> f64 {
    1e-3
}

fn yes() -> bool {
    true
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            window: None,
            gamma: None,
            keyframe_stride: 1,
            epochs: 300,
            lr: 1e-3,
            seed: 0,
            shared_init: true,
        }
    }
}

/// One optimization run: where the conditions, flows, and occlusions
/// live, plus every generator/schedule/optimizer knob. Relative paths
/// resolve against the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub condition_dir: PathBuf,
    pub flow_dir: PathBuf,
    pub occlusion_dir: PathBuf,
    pub modality: Modality,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read(path).map_err(|e| {
            CliError::new(Class::Config, format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: RunConfig = serde_json::from_slice(&raw).map_err(|e| {
            CliError::new(Class::Config, format!("bad config {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for dir in [
            &mut cfg.condition_dir,
            &mut cfg.flow_dir,
            &mut cfg.occlusion_dir,
        ] {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
            if !dir.is_dir() {
                return Err(CliError::new(
                    Class::Config,
                    format!("referenced path {} does not exist", dir.display()),
                ));
            }
        }
        if cfg.schedule.steps < 1 || cfg.schedule.alpha_min <= 0.0 || cfg.schedule.alpha_min >= 1.0
        {
            return Err(CliError::new(
                Class::Config,
                format!(
                    "schedule needs steps >= 1 and alpha_min in (0,1), got {} and {}",
                    cfg.schedule.steps, cfg.schedule.alpha_min
                ),
            ));
        }
        Ok(cfg)
    }

    pub fn optim_config(&self, frames: usize) -> OptimConfig {
        OptimConfig {
            frames,
            window: self.optimizer.window,
            denoise_steps: self.schedule.steps,
            gamma: self.optimizer.gamma,
            keyframe_stride: self.optimizer.keyframe_stride,
            epochs: self.optimizer.epochs,
            lr: self.optimizer.lr,
            seed: self.optimizer.seed,
            shared_init: self.optimizer.shared_init,
        }
    }
}
