//! Noise-latent optimization for temporal consistency.
//!
//! Frames synthesized from per-frame noise latents are compared against
//! flow-warped versions of their neighbors inside a sliding window; the
//! masked, normalized discrepancy is driven down by Adam on the latents
//! while the generator stays fixed. Memory stays flat by building one
//! frame's graph at a time: every frame is compared against detached
//! cached frames, backpropagated, and freed before the next frame runs.
//! Frame 0 never sees a gradient that way, so it is compared against the
//! previous epoch's cache instead.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ddim_denoise, frame_decode, render_frames, renoise_to_level, ConditionStack,
    DiffusionSchedule, LatentSequence, NoisePredictor,
};
use crate::error::{contract, Error, Result};
use crate::flow::{extend_chain, FlowField, OcclusionMask, ValidityMask};
use crate::tensor::{masked_nmse, AdamState, Tensor};

/// Stop when the running best objective has improved by less than 0.1%
/// over a window of this many epochs.
const EARLY_STOP_WINDOW: usize = 25;
const EARLY_STOP_REL_IMPROVEMENT: f64 = 1e-3;

/// Knobs of one optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Frame count T.
    pub frames: usize,
    /// Window size S: how many previous frames each frame is compared
    /// against. `None` means the full clip.
    pub window: Option<usize>,
    /// Denoise step count L; must match the schedule.
    pub denoise_steps: usize,
    /// Noise level being optimized, in [1, L]. `None` means L.
    pub gamma: Option<usize>,
    /// Keyframe stride k: only every k-th latent (plus the residual tail)
    /// is optimized; in-between latents are interpolated afterwards.
    pub keyframe_stride: usize,
    /// Iteration budget.
    pub epochs: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// PRNG seed for the initial latents.
    pub seed: u64,
    /// Draw one noise tensor and replicate it across frames.
    pub shared_init: bool,
}

impl OptimConfig {
    pub fn new(frames: usize) -> Self {
        OptimConfig {
            frames,
            window: None,
            denoise_steps: crate::diffusion::DEFAULT_STEPS,
            gamma: None,
            keyframe_stride: 1,
            epochs: 300,
            lr: 1e-3,
            seed: 0,
            shared_init: true,
        }
    }

    pub fn effective_window(&self) -> usize {
        self.window.unwrap_or(self.frames)
    }

    pub fn effective_gamma(&self) -> usize {
        self.gamma.unwrap_or(self.denoise_steps)
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.frames >= 1, "need at least one frame");
        contract!(self.effective_window() >= 1, "window must be >= 1");
        contract!(self.keyframe_stride >= 1, "keyframe stride must be >= 1");
        let gamma = self.effective_gamma();
        contract!(
            gamma >= 1 && gamma <= self.denoise_steps,
            "gamma {gamma} out of range [1, {}]",
            self.denoise_steps
        );
        contract!(
            self.lr.is_finite() && self.lr > 0.0,
            "learning rate must be positive and finite"
        );
        Ok(())
    }
}

/// What one optimization run did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Objective value at the start of each epoch (before that epoch's
    /// parameter step).
    pub epoch_objectives: Vec<f64>,
    /// Objective of the final rendered clip.
    pub final_objective: f64,
    /// Normalized per-frame discrepancy of the final clip.
    pub per_frame_discrepancy: Vec<f64>,
    /// Predictor forward passes in one epoch.
    pub forwards_per_epoch: u64,
    /// Total predictor forward passes across the run, including setup
    /// and the final render.
    pub generator_forwards: u64,
    pub epochs_run: usize,
    pub early_stopped: bool,
    /// Wall-clock duration; excluded from serialized reports so that
    /// repeated runs produce byte-identical artifacts.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Draw the initial noise latents. With `shared_init` one standard-normal
/// tensor is drawn and replicated across all frames; otherwise each frame
/// gets an independent draw. The sequence sits at level L.
pub fn init_noise(cfg: &OptimConfig, shape: &[usize]) -> Result<LatentSequence> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let numel: usize = shape.iter().product();
    let draw = |rng: &mut ChaCha20Rng| -> Vec<f64> {
        (0..numel).map(|_| StandardNormal.sample(rng)).collect()
    };
    let latents = if cfg.shared_init {
        let common = draw(&mut rng);
        (0..cfg.frames)
            .map(|_| Tensor::from_vec(shape, common.clone()))
            .collect::<Result<Vec<_>>>()?
    } else {
        (0..cfg.frames)
            .map(|_| Tensor::from_vec(shape, draw(&mut rng)))
            .collect::<Result<Vec<_>>>()?
    };
    LatentSequence::new(latents, cfg.denoise_steps)
}

fn check_clip_dims(
    frames: &[Tensor],
    flows: &[FlowField],
    occs: &[OcclusionMask],
) -> Result<()> {
    contract!(!frames.is_empty(), "empty clip");
    contract!(
        flows.len() + 1 == frames.len() && occs.len() == flows.len(),
        "a {}-frame clip needs {} flows and occlusion maps, got {} and {}",
        frames.len(),
        frames.len() - 1,
        flows.len(),
        occs.len()
    );
    let (h, w) = (frames[0].shape()[1], frames[0].shape()[2]);
    for f in frames {
        contract!(
            f.shape()[1] == h && f.shape()[2] == w,
            "frame spatial dims disagree"
        );
    }
    for f in flows {
        contract!(
            f.width() == w && f.height() == h,
            "flow dims {}x{} disagree with frames {w}x{h}",
            f.width(),
            f.height()
        );
    }
    Ok(())
}

/// Windowed discrepancy of frame `t` against up to `window` previous
/// frames: frame `t` is chain-warped back step by step and compared with
/// each earlier frame under the composed validity mask. `D(0) = 0`.
pub fn discrepancy(
    frames: &[Tensor],
    flows: &[FlowField],
    occs: &[OcclusionMask],
    t: usize,
    window: usize,
) -> Result<Tensor> {
    check_clip_dims(frames, flows, occs)?;
    contract!(t < frames.len(), "frame index {t} out of range");
    contract!(window >= 1, "window must be >= 1");
    let mut total = Tensor::scalar(0.0)?;
    let mut chained = frames[t].clone();
    let mut carried: Option<ValidityMask> = None;
    for s in 1..=window.min(t) {
        let (next, validity) = extend_chain(&chained, carried.as_ref(), &flows[t - s], &occs[t - s])?;
        chained = next;
        let term = masked_nmse(&frames[t - s], &chained, validity.as_slice())?;
        carried = Some(validity);
        total = total.add(&term)?;
    }
    Ok(total)
}

/// The optimization objective: the sum over frames of the windowed
/// discrepancy, each normalized by `min(window, t) + 1`.
pub fn objective(
    frames: &[Tensor],
    flows: &[FlowField],
    occs: &[OcclusionMask],
    window: usize,
) -> Result<Tensor> {
    check_clip_dims(frames, flows, occs)?;
    let mut total = Tensor::scalar(0.0)?;
    for t in 1..frames.len() {
        let d = discrepancy(frames, flows, occs, t, window)?;
        total = total.add(&d.mul_scalar(1.0 / (window.min(t) + 1) as f64))?;
    }
    Ok(total)
}

/// Frame times that are optimization variables for stride `k`: every
/// k-th frame plus the residual tail of `(T-1) mod k` frames that keeps
/// the output length invariant to `k`.
pub fn optimized_indices(frames: usize, k: usize) -> Vec<usize> {
    let residual = (frames - 1) % k;
    let mut times: Vec<usize> = (0..frames).step_by(k).collect();
    times.extend(frames - residual..frames);
    times
}

/// Spherical linear interpolation between two equally shaped tensors,
/// treated as flat vectors. Falls back to linear interpolation when the
/// angle is below 1e-6; exactly antiparallel inputs are rejected.
pub fn slerp(u: &Tensor, v: &Tensor, alpha: f64) -> Result<Tensor> {
    contract!(
        u.shape() == v.shape(),
        "slerp operands disagree on shape: {:?} vs {:?}",
        u.shape(),
        v.shape()
    );
    contract!((0.0..=1.0).contains(&alpha), "slerp alpha must lie in [0, 1]");
    let (ud, vd) = (u.to_vec(), v.to_vec());
    let norm_u = ud.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_v = vd.iter().map(|x| x * x).sum::<f64>().sqrt();
    contract!(norm_u > 0.0 && norm_v > 0.0, "slerp inputs must be nonzero");
    let cos_theta = (ud.iter().zip(&vd).map(|(a, b)| a * b).sum::<f64>() / (norm_u * norm_v))
        .clamp(-1.0, 1.0);
    contract!(
        cos_theta > -1.0,
        "slerp is undefined for exactly antiparallel inputs"
    );
    let theta = cos_theta.acos();
    let data = if theta < 1e-6 {
        ud.iter()
            .zip(&vd)
            .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
            .collect()
    } else {
        let sin_theta = theta.sin();
        let wu = ((1.0 - alpha) * theta).sin() / sin_theta;
        let wv = (alpha * theta).sin() / sin_theta;
        ud.iter().zip(&vd).map(|(a, b)| wu * a + wv * b).collect()
    };
    Tensor::from_vec(u.shape(), data)
}

/// Expand a compact sequence of optimized latents (keyframes in time
/// order followed by the residual tail) to the full clip length:
/// keyframes and residual frames pass through, in-between frame `t`
/// interpolates between its surrounding keyframes with weight
/// `(t - floor_k(t)) / k`.
pub fn expand_keyframes(latents: &LatentSequence, k: usize, frames: usize) -> Result<LatentSequence> {
    contract!(k >= 1 && frames >= 1, "expand_keyframes needs k >= 1, T >= 1");
    let times = optimized_indices(frames, k);
    contract!(
        latents.len() == times.len(),
        "stride {k} over {frames} frames optimizes {} latents (keyframes plus residual tail), got {}",
        times.len(),
        latents.len()
    );
    if k == 1 {
        return LatentSequence::new(latents.latents().to_vec(), latents.level());
    }
    let residual = (frames - 1) % k;
    let keyframe_count = (frames - 1) / k + 1;
    let mut out: Vec<Option<Tensor>> = vec![None; frames];
    for (slot, &t) in times.iter().enumerate() {
        out[t] = Some(latents.latent(slot).clone());
    }
    for (t, slot) in out.iter_mut().enumerate() {
        if slot.is_some() {
            continue;
        }
        debug_assert!(t < frames - residual);
        let floor_idx = t / k;
        let ceil_idx = floor_idx + 1;
        debug_assert!(ceil_idx < keyframe_count);
        let alpha = (t - floor_idx * k) as f64 / k as f64;
        *slot = Some(slerp(
            latents.latent(floor_idx),
            latents.latent(ceil_idx),
            alpha,
        )?);
    }
    LatentSequence::new(
        out.into_iter().map(|t| t.expect("all frames filled")).collect(),
        latents.level(),
    )
}

/// One epoch's cache and objective from the memory-efficient pass.
pub struct FramewisePass {
    /// Detached frames synthesized this epoch, in subset time order.
    pub cache: Vec<Tensor>,
    /// Objective value over the synthesized frames.
    pub objective: f64,
}

/// Synthesize each optimized frame in turn, compare it against detached
/// cached frames inside the window, backpropagate that frame's partial
/// loss into its latent, and free the graph before the next frame is
/// built — at most one frame graph is ever alive. Frame 0 is compared
/// against `prev_cache` (the previous epoch's frames) when available, so
/// its latent receives gradient from the second epoch onward.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_gradients_framewise(
    vars: &[Tensor],
    times: &[usize],
    cond: &ConditionStack,
    flows: &[FlowField],
    occs: &[OcclusionMask],
    window: usize,
    gamma: usize,
    predictor: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    prev_cache: Option<&[Tensor]>,
) -> Result<FramewisePass> {
    contract!(
        vars.len() == times.len() && !vars.is_empty(),
        "variable/time lists disagree"
    );
    let subset = times.len();
    let mut cache: Vec<Tensor> = Vec::with_capacity(subset);
    let mut epoch_objective = 0.0;

    for i in 0..subset {
        let z0 = ddim_denoise(&vars[i], gamma, cond.frame(times[i]), predictor, sched)?;
        let frame = frame_decode(&z0);

        if i == 0 {
            if let Some(prev) = prev_cache {
                let loss = frame_zero_loss(&frame, prev, times, flows, occs, window)?;
                if let Some(loss) = loss {
                    if !loss.item().is_finite() {
                        return Err(Error::NonFinite("frame-0 loss".into()));
                    }
                    loss.backward()?;
                }
            }
            cache.push(frame.detach());
            continue;
        }

        // chain frame i backwards through the flows, one cached reference
        // per window slot
        let mut chained = frame.clone();
        let mut carried: Option<ValidityMask> = None;
        let mut partial = Tensor::scalar(0.0)?;
        for j in 1..=window.min(i) {
            for f in (times[i - j]..times[i - j + 1]).rev() {
                let (next, validity) = extend_chain(&chained, carried.as_ref(), &flows[f], &occs[f])?;
                chained = next;
                carried = Some(validity);
            }
            let validity = carried.as_ref().expect("chain has at least one step");
            let term = masked_nmse(&cache[i - j], &chained, validity.as_slice())?;
            partial = partial.add(&term)?;
        }
        let loss = partial.mul_scalar(1.0 / (window.min(i) + 1) as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss of frame {}", times[i])));
        }
        epoch_objective += value;
        if loss.requires_grad() {
            loss.backward()?;
        }
        cache.push(frame.detach());
    }
    Ok(FramewisePass {
        cache,
        objective: epoch_objective,
    })
}

/// Warp the previous epoch's cached frames back onto frame 0's grid and
/// compare them with the live frame. References carry no gradient; only
/// frame 0's latent is reached.
fn frame_zero_loss(
    live_frame: &Tensor,
    prev_cache: &[Tensor],
    times: &[usize],
    flows: &[FlowField],
    occs: &[OcclusionMask],
    window: usize,
) -> Result<Option<Tensor>> {
    let reachable = window.min(prev_cache.len() - 1);
    if reachable == 0 {
        return Ok(None);
    }
    let mut total = Tensor::scalar(0.0)?;
    for j in 1..=reachable {
        let mut warped = prev_cache[j].clone();
        let mut carried: Option<ValidityMask> = None;
        for f in (times[0]..times[j]).rev() {
            let (next, validity) = extend_chain(&warped, carried.as_ref(), &flows[f], &occs[f])?;
            warped = next;
            carried = Some(validity);
        }
        let validity = carried.as_ref().expect("chain has at least one step");
        let term = masked_nmse(live_frame, &warped, validity.as_slice())?;
        total = total.add(&term)?;
    }
    Ok(Some(total.mul_scalar(1.0 / (reachable + 1) as f64)))
}

/// Optimize the noise latents for temporal consistency.
///
/// Latents start from the seeded (optionally shared) draw; when `gamma`
/// is below L they are first produced by a full denoise and re-noised to
/// level `gamma` with the same initial noise. With a keyframe stride
/// above one, only keyframes and the residual tail are optimized and the
/// in-between latents are interpolated after the loop. The returned
/// sequence always has `frames` entries at level `gamma`.
pub fn optimize(
    cfg: &OptimConfig,
    cond: &ConditionStack,
    flows: &[FlowField],
    occs: &[OcclusionMask],
    predictor: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
) -> Result<(LatentSequence, ConsistencyReport)> {
    let start = Instant::now();
    cfg.validate()?;
    contract!(
        cfg.frames == cond.len(),
        "config says {} frames, condition stack has {}",
        cfg.frames,
        cond.len()
    );
    contract!(
        cfg.denoise_steps == sched.steps(),
        "config says L={}, schedule has {}",
        cfg.denoise_steps,
        sched.steps()
    );
    contract!(
        flows.len() + 1 == cfg.frames && occs.len() == flows.len(),
        "a {}-frame clip needs {} flows and occlusion maps, got {} and {}",
        cfg.frames,
        cfg.frames - 1,
        flows.len(),
        occs.len()
    );
    let (w, h) = cond.spatial();
    for f in flows {
        contract!(
            f.width() == w && f.height() == h,
            "flow dims {}x{} disagree with conditions {w}x{h}",
            f.width(),
            f.height()
        );
    }

    let forwards_at_entry = predictor.forward_count();
    let gamma = cfg.effective_gamma();
    let window = cfg.effective_window();
    let level_l = sched.steps();
    let shape = [3usize, h, w];
    let times = optimized_indices(cfg.frames, cfg.keyframe_stride);

    let init = init_noise(cfg, &shape)?;
    let vars: Vec<Tensor> = times
        .iter()
        .map(|&t| -> Result<Tensor> {
            if gamma == level_l {
                Tensor::variable(&shape, init.latent(t).to_vec())
            } else {
                // settle textures with a full pass, then re-noise the clean
                // latent to the optimizing level with the same initial noise
                let z0 = ddim_denoise(init.latent(t), level_l, cond.frame(t), predictor, sched)?;
                let z_gamma = renoise_to_level(&z0, init.latent(t), gamma, sched)?;
                Tensor::variable(&shape, z_gamma.to_vec())
            }
        })
        .collect::<Result<_>>()?;
    let mut adam: Vec<AdamState> = vars.iter().map(|v| AdamState::new(v.len(), cfg.lr)).collect();

    let mut epoch_objectives = Vec::with_capacity(cfg.epochs);
    let mut forwards_per_epoch = 0u64;
    let mut prev_cache: Option<Vec<Tensor>> = None;
    let mut best_history: Vec<f64> = Vec::with_capacity(cfg.epochs);
    let mut early_stopped = false;

    for epoch in 0..cfg.epochs {
        let forwards_before = predictor.forward_count();
        let pass = accumulate_gradients_framewise(
            &vars,
            &times,
            cond,
            flows,
            occs,
            window,
            gamma,
            predictor,
            sched,
            prev_cache.as_deref(),
        )?;
        if epoch == 0 {
            forwards_per_epoch = predictor.forward_count() - forwards_before;
        }
        epoch_objectives.push(pass.objective);
        prev_cache = Some(pass.cache);

        for (var, state) in vars.iter().zip(adam.iter_mut()) {
            // frame 0 has no gradient in the very first epoch
            if var.grad().is_some() {
                state.step(var)?;
                var.zero_grad();
            }
        }

        if pass.objective == 0.0 {
            early_stopped = true;
            break;
        }
        let best = best_history
            .last()
            .map_or(pass.objective, |b| b.min(pass.objective));
        best_history.push(best);
        if best_history.len() > EARLY_STOP_WINDOW {
            let reference = best_history[best_history.len() - 1 - EARLY_STOP_WINDOW];
            if reference - best < EARLY_STOP_REL_IMPROVEMENT * reference {
                early_stopped = true;
                break;
            }
        }
    }

    let compact = LatentSequence::new(vars.iter().map(|v| v.detach()).collect(), gamma)?;
    let final_latents = expand_keyframes(&compact, cfg.keyframe_stride, cfg.frames)?;
    let final_frames = render_frames(&final_latents, cond, predictor, sched)?;
    let final_objective = objective(&final_frames, flows, occs, window)?.item();
    if !final_objective.is_finite() {
        return Err(Error::NonFinite("final objective".into()));
    }
    let per_frame_discrepancy = (0..cfg.frames)
        .map(|t| -> Result<f64> {
            let d = discrepancy(&final_frames, flows, occs, t, window)?;
            Ok(d.item() / (window.min(t) + 1) as f64)
        })
        .collect::<Result<Vec<_>>>()?;

    let report = ConsistencyReport {
        epochs_run: epoch_objectives.len(),
        epoch_objectives,
        final_objective,
        per_frame_discrepancy,
        forwards_per_epoch,
        generator_forwards: predictor.forward_count() - forwards_at_entry,
        early_stopped,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((final_latents, report))
}
