//! Deterministic DDIM sampling over a pluggable conditional generator,
//! forward diffusion, and re-noising to intermediate levels.
//!
//! The noise predictor standing in for a large conditional model is a
//! fixed-weight two-layer convolutional net whose weights derive from a
//! seed; it is never trained, so every sample is a pure function of the
//! latents, conditions, and seed.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{concat_channels, ConvKernel, Tensor};

/// Default number of denoising steps.
pub const DEFAULT_STEPS: usize = 10;

/// Default terminal signal-retention coefficient of the linear schedule.
/// Its inverse square root bounds how much the DDIM recursion can amplify
/// the initial latent, which must stay moderate for the pixel-space decode
/// to keep usable contrast and gradients.
pub const DEFAULT_ALPHA_MIN: f64 = 0.4;

/// The signal-retention sequence for deterministic DDIM sampling.
///
/// `alpha_bar` has `steps + 1` entries indexed by level, starting at
/// exactly 1 and strictly decreasing to `alpha_min`. The per-step
/// sampling noise scale is fixed to zero, so diffusing and denoising are
/// both deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
    eta: f64,
}

impl DiffusionSchedule {
    /// Linear schedule: `alpha_bar[l] = 1 - (1 - alpha_min) * l / L`.
    pub fn linear(steps: usize, alpha_min: f64) -> Result<Self> {
        contract!(steps >= 1, "schedule needs at least one step");
        contract!(
            alpha_min > 0.0 && alpha_min < 1.0,
            "alpha_min must lie in (0, 1), got {alpha_min}"
        );
        let alpha_bar = (0..=steps)
            .map(|l| 1.0 - (1.0 - alpha_min) * l as f64 / steps as f64)
            .collect();
        Ok(DiffusionSchedule {
            steps,
            alpha_bar,
            eta: 0.0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, level: usize) -> f64 {
        self.alpha_bar[level]
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

/// Forward diffusion to `level`:
/// `sqrt(alpha_bar[level]) * z0 + sqrt(1 - alpha_bar[level]) * z_noise`.
/// Differentiable in both inputs.
pub fn diffuse(
    z0: &Tensor,
    z_noise: &Tensor,
    level: usize,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    contract!(
        level <= sched.steps(),
        "diffuse level {level} out of range [0, {}]",
        sched.steps()
    );
    let a = sched.alpha_bar(level);
    z0.mul_scalar(a.sqrt())
        .add(&z_noise.mul_scalar((1.0 - a).sqrt()))
}

/// Re-noise a clean latent to level `gamma`, reusing the very same
/// initial noise that produced it. `gamma` = 0 is rejected: there would
/// be nothing left to optimize.
pub fn renoise_to_level(
    z0: &Tensor,
    z_noise: &Tensor,
    gamma: usize,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    contract!(
        gamma >= 1 && gamma <= sched.steps(),
        "renoise level {gamma} out of range [1, {}]",
        sched.steps()
    );
    diffuse(z0, z_noise, gamma, sched)
}

/// Affine pixel decode `z * 0.5 + 0.5` clamped into \[0,1\], with
/// straight-through clamp gradient strictly inside the open interval.
pub fn frame_decode(z0: &Tensor) -> Tensor {
    z0.mul_scalar(0.5).add_scalar(0.5).clamp_unit()
}

/// A conditional noise predictor the sampler can drive.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        z: &Tensor,
        cond: &Tensor,
        level: usize,
        sched: &DiffusionSchedule,
    ) -> Result<Tensor>;

    /// Total forward passes since construction (or the last reset).
    fn forward_count(&self) -> u64;

    fn reset_forward_count(&self);
}

/// Seed and width of the fixed toy generator; two specs with the same
/// fields produce bit-identical weights and therefore outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub hidden_channels: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            seed: 7,
            hidden_channels: 8,
        }
    }
}

/// Fixed-weight conditional generator:
/// `eps = conv2(tanh(conv1(concat(z, cond, level_plane))))`,
/// where the level plane is a constant channel of value `level / L`.
/// Weights come from the spec's seeded PRNG, scaled by `1/sqrt(fan_in)`,
/// and never change.
pub struct ToyGenerator {
    spec: GeneratorSpec,
    cond_channels: usize,
    conv1: ConvKernel,
    conv2: ConvKernel,
    forwards: AtomicU64,
}

impl ToyGenerator {
    pub fn new(spec: GeneratorSpec, cond_channels: usize) -> Result<Self> {
        contract!(spec.hidden_channels > 0, "hidden_channels must be positive");
        contract!(cond_channels > 0, "generator needs at least one condition channel");
        let in_channels = 3 + cond_channels + 1;
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        let mut draw = |out_c: usize, in_c: usize| -> Vec<f64> {
            let scale = 1.0 / ((in_c * 9) as f64).sqrt();
            (0..out_c * in_c * 9)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * scale
                })
                .collect()
        };
        let conv1 = ConvKernel::new(spec.hidden_channels, in_channels, draw(spec.hidden_channels, in_channels))?;
        let conv2 = ConvKernel::new(3, spec.hidden_channels, draw(3, spec.hidden_channels))?;
        Ok(ToyGenerator {
            spec,
            cond_channels,
            conv1,
            conv2,
            forwards: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> GeneratorSpec {
        self.spec
    }

    pub fn cond_channels(&self) -> usize {
        self.cond_channels
    }
}

impl NoisePredictor for ToyGenerator {
    fn predict_noise(
        &self,
        z: &Tensor,
        cond: &Tensor,
        level: usize,
        sched: &DiffusionSchedule,
    ) -> Result<Tensor> {
        contract!(
            z.shape().len() == 3 && z.shape()[0] == 3,
            "latent must be [3,H,W], got {:?}",
            z.shape()
        );
        contract!(
            cond.shape().len() == 3
                && cond.shape()[0] == self.cond_channels
                && cond.shape()[1..] == z.shape()[1..],
            "condition must be [{},H,W] matching the latent, got {:?}",
            self.cond_channels,
            cond.shape()
        );
        contract!(
            level <= sched.steps(),
            "level {level} out of range [0, {}]",
            sched.steps()
        );
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let (h, w) = (z.shape()[1], z.shape()[2]);
        let level_plane = Tensor::full(&[1, h, w], level as f64 / sched.steps() as f64)?;
        let x = concat_channels(&[z.clone(), cond.clone(), level_plane])?;
        x.conv2d(&self.conv1)?.tanh_act().conv2d(&self.conv2)
    }

    fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }
}

/// Predictor that returns a fixed tensor regardless of the input; used
/// for algebraic checks where the DDIM recursion collapses in closed form.
pub struct ConstantPredictor {
    eps: Tensor,
    forwards: AtomicU64,
}

impl ConstantPredictor {
    pub fn new(eps: Tensor) -> Self {
        ConstantPredictor {
            eps,
            forwards: AtomicU64::new(0),
        }
    }
}

impl NoisePredictor for ConstantPredictor {
    fn predict_noise(
        &self,
        _z: &Tensor,
        _cond: &Tensor,
        _level: usize,
        _sched: &DiffusionSchedule,
    ) -> Result<Tensor> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        Ok(self.eps.clone())
    }

    fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }
}

/// Deterministic DDIM denoising from `start_level` down to the clean
/// latent. Performs exactly `start_level` predictor calls and is fully
/// differentiable w.r.t. `z_start`.
pub fn ddim_denoise(
    z_start: &Tensor,
    start_level: usize,
    cond: &Tensor,
    predictor: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    contract!(
        start_level >= 1 && start_level <= sched.steps(),
        "start level {start_level} out of range [1, {}]",
        sched.steps()
    );
    let mut z = z_start.clone();
    for level in (1..=start_level).rev() {
        let eps = predictor.predict_noise(&z, cond, level, sched)?;
        let a = sched.alpha_bar(level);
        let a_prev = sched.alpha_bar(level - 1);
        // predicted clean latent, then the deterministic step toward it
        let z0_hat = z
            .sub(&eps.mul_scalar((1.0 - a).sqrt()))?
            .mul_scalar(1.0 / a.sqrt());
        z = z0_hat
            .mul_scalar(a_prev.sqrt())
            .add(&eps.mul_scalar((1.0 - a_prev).sqrt()))?;
    }
    Ok(z)
}

/// Condition modality fed to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Depth,
    Normal,
}

impl Modality {
    pub fn channels(&self) -> usize {
        match self {
            Modality::Depth => 1,
            Modality::Normal => 3,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Depth => write!(f, "depth"),
            Modality::Normal => write!(f, "normal"),
        }
    }
}

/// Per-frame condition tensors `[C,H,W]` in \[0,1\] with their modality.
#[derive(Debug, Clone)]
pub struct ConditionStack {
    frames: Vec<Tensor>,
    modality: Modality,
}

impl ConditionStack {
    pub fn new(frames: Vec<Tensor>, modality: Modality) -> Result<Self> {
        contract!(!frames.is_empty(), "condition stack needs at least one frame");
        let shape = frames[0].shape().to_vec();
        contract!(
            shape.len() == 3 && shape[0] == modality.channels(),
            "{modality} conditions must be [{},H,W], got {shape:?}",
            modality.channels()
        );
        for f in &frames {
            contract!(
                f.shape() == shape.as_slice(),
                "condition frames disagree on shape: {:?} vs {shape:?}",
                f.shape()
            );
        }
        Ok(ConditionStack { frames, modality })
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Tensor {
        &self.frames[t]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.frames[0].shape()[2], self.frames[0].shape()[1])
    }
}

/// A clip's noise latents, all at one common noise level.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    latents: Vec<Tensor>,
    level: usize,
}

impl LatentSequence {
    pub fn new(latents: Vec<Tensor>, level: usize) -> Result<Self> {
        contract!(!latents.is_empty(), "latent sequence needs at least one frame");
        let shape = latents[0].shape().to_vec();
        for l in &latents {
            contract!(
                l.shape() == shape.as_slice(),
                "latents disagree on shape: {:?} vs {shape:?}",
                l.shape()
            );
        }
        Ok(LatentSequence { latents, level })
    }

    pub fn latents(&self) -> &[Tensor] {
        &self.latents
    }

    pub fn latent(&self, t: usize) -> &Tensor {
        &self.latents[t]
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn level(&self) -> usize {
        self.level
    }
}

/// Denoise and decode every frame without building any gradient graph.
pub fn render_frames(
    latents: &LatentSequence,
    cond: &ConditionStack,
    predictor: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
) -> Result<Vec<Tensor>> {
    contract!(
        latents.len() == cond.len(),
        "latent count {} != condition count {}",
        latents.len(),
        cond.len()
    );
    let mut frames = Vec::with_capacity(latents.len());
    for t in 0..latents.len() {
        let z0 = ddim_denoise(
            &latents.latent(t).detach(),
            latents.level(),
            cond.frame(t),
            predictor,
            sched,
        )?;
        let frame = frame_decode(&z0);
        if frame.with_data(|d| d.iter().any(|v| !v.is_finite())) {
            return Err(crate::error::Error::NonFinite(format!(
                "decoded frame {t} contains NaN or infinity"
            )));
        }
        frames.push(frame);
    }
    Ok(frames)
}
