//! Implementations of the pipeline subcommands.

use std::path::Path;

use serde::Serialize;
use tempoflow::consistency::optimize;
use tempoflow::diffusion::{
    render_frames, DiffusionSchedule, LatentSequence, NoisePredictor, ToyGenerator,
};
use tempoflow::flow::{self, CameraIntrinsics, OcclusionMask, ValidityMask};
use tempoflow::formats;
use tempoflow::metrics::{block_match_flow, epe_sequence, warp_error, EpeResult};
use tempoflow::scene::{generate, SceneSpec};

use crate::config::RunConfig;
use crate::dirs;
use crate::fail::{as_config, Class, CliError};

#[derive(Serialize)]
struct IntrinsicsFile {
    fx: f64,
    fy: f64,
}

pub fn gen_scene(spec_path: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let raw = std::fs::read(spec_path).map_err(|e| {
        CliError::new(
            Class::Config,
            format!("cannot read scene spec {}: {e}", spec_path.display()),
        )
    })?;
    let spec: SceneSpec = serde_json::from_slice(&raw).map_err(|e| {
        CliError::new(
            Class::Config,
            format!("bad scene spec {}: {e}", spec_path.display()),
        )
    })?;
    let bundle = as_config(generate(&spec, seed))?;

    dirs::write_frames(&out.join("frames"), &bundle.frames)?;
    let depth_dir = out.join("depths");
    dirs::ensure_dir(&depth_dir)?;
    for (t, d) in bundle.depths.iter().enumerate() {
        formats::write_pfm(&depth_dir.join(format!("depth_{t:04}.pfm")), d)?;
    }
    let flow_dir = out.join("flows");
    dirs::ensure_dir(&flow_dir)?;
    for (t, f) in bundle.flows.iter().enumerate() {
        formats::write_flo(&flow_dir.join(format!("flow_{t:04}.flo")), f)?;
    }
    let occ_dir = out.join("occlusions");
    dirs::ensure_dir(&occ_dir)?;
    for (t, o) in bundle.occlusions.iter().enumerate() {
        formats::write_pgm(&occ_dir.join(format!("occ_{t:04}.pgm")), o)?;
    }
    std::fs::write(
        out.join("intrinsics.json"),
        serde_json::to_vec_pretty(&IntrinsicsFile {
            fx: bundle.intrinsics.fx(),
            fy: bundle.intrinsics.fy(),
        })
        .expect("intrinsics serialize"),
    )
    .map_err(|e| CliError::new(Class::Data, e.to_string()))?;

    println!("frames={}", spec.frames);
    println!("size={}x{}", spec.width, spec.height);
    println!("out={}", out.display());
    Ok(())
}

pub fn derive_normal(depth_dir: &Path, intrinsics: &str, out: &Path) -> Result<(), CliError> {
    let (fx, fy) = parse_intrinsics(intrinsics)?;
    let cam = as_config(CameraIntrinsics::from_focal(fx, fy))?;
    let files = dirs::list_sorted(depth_dir, "pfm")?;
    dirs::ensure_dir(out)?;
    for (t, path) in files.iter().enumerate() {
        let depth = formats::read_pfm(path)?;
        let normal = flow::depth_to_normal(&depth, &cam)?;
        formats::write_png(&out.join(format!("normal_{t:04}.png")), &normal.to_tensor())?;
    }
    println!("normals={}", files.len());
    Ok(())
}

fn parse_intrinsics(s: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    let bad = || CliError::new(Class::Config, format!("--intrinsics expects fx,fy got {s:?}"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let fx: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let fy: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    Ok((fx, fy))
}

pub fn derive_occlusion(
    frames_dir: &Path,
    flows_dir: &Path,
    threshold: f64,
    out: &Path,
) -> Result<(), CliError> {
    if threshold <= 0.0 {
        return Err(CliError::new(Class::Config, "--threshold must be > 0"));
    }
    let frames = dirs::load_frames(frames_dir)?;
    let flows = dirs::load_flows(flows_dir)?;
    if flows.len() + 1 != frames.len() {
        return Err(CliError::new(
            Class::Data,
            format!("{} frames need {} flows, found {}", frames.len(), frames.len() - 1, flows.len()),
        ));
    }
    dirs::ensure_dir(out)?;
    for t in 0..flows.len() {
        let occ = flow::derive_occlusion(&frames[t], &frames[t + 1], &flows[t], threshold)?;
        formats::write_pgm(&out.join(format!("occ_{t:04}.pgm")), &occ)?;
    }
    println!("occlusions={}", flows.len());
    Ok(())
}

fn load_run_inputs(
    cfg: &RunConfig,
) -> Result<
    (
        tempoflow::diffusion::ConditionStack,
        Vec<tempoflow::flow::FlowField>,
        Vec<OcclusionMask>,
    ),
    CliError,
> {
    let cond = dirs::load_conditions(&cfg.condition_dir, cfg.modality)?;
    let flows = dirs::load_flows(&cfg.flow_dir)?;
    let occs = dirs::load_occlusions(&cfg.occlusion_dir)?;
    if flows.len() + 1 != cond.len() || occs.len() != flows.len() {
        return Err(CliError::new(
            Class::Data,
            format!(
                "{} conditions need {} flows and occlusion maps, found {} and {}",
                cond.len(),
                cond.len() - 1,
                flows.len(),
                occs.len()
            ),
        ));
    }
    Ok((cond, flows, occs))
}

pub fn run_optimize(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let (cond, flows, occs) = load_run_inputs(&cfg)?;
    let sched = as_config(DiffusionSchedule::linear(
        cfg.schedule.steps,
        cfg.schedule.alpha_min,
    ))?;
    let generator = as_config(ToyGenerator::new(cfg.generator, cfg.modality.channels()))?;
    let optim_cfg = cfg.optim_config(cond.len());
    as_config(optim_cfg.validate())?;

    let (latents, report) = optimize(&optim_cfg, &cond, &flows, &occs, &generator, &sched)?;

    dirs::ensure_dir(out)?;
    formats::write_latents(&out.join("latents"), &latents)?;
    let frames = render_frames(&latents, &cond, &generator, &sched)?;
    dirs::write_frames(&out.join("frames"), &frames)?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_vec_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| CliError::new(Class::Data, e.to_string()))?;

    println!("epochs_run={}", report.epochs_run);
    println!("initial_objective={}", report.epoch_objectives.first().unwrap_or(&0.0));
    println!("final_objective={}", report.final_objective);
    println!("forwards_per_epoch={}", report.forwards_per_epoch);
    println!("generator_forwards={}", report.generator_forwards);
    println!("early_stopped={}", report.early_stopped);
    println!("wall_seconds={}", report.wall_seconds);
    Ok(())
}

pub fn run_render(
    config_path: &Path,
    latents_dir: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let cond = dirs::load_conditions(&cfg.condition_dir, cfg.modality)?;
    let sched = as_config(DiffusionSchedule::linear(
        cfg.schedule.steps,
        cfg.schedule.alpha_min,
    ))?;
    let generator = as_config(ToyGenerator::new(cfg.generator, cfg.modality.channels()))?;
    let latents: LatentSequence = match latents_dir {
        Some(dir) => {
            let seq = formats::read_latents(dir)?;
            if seq.len() != cond.len() {
                return Err(CliError::new(
                    Class::Data,
                    format!("{} latents vs {} conditions", seq.len(), cond.len()),
                ));
            }
            if seq.level() < 1 || seq.level() > sched.steps() {
                return Err(CliError::new(
                    Class::Data,
                    format!("stored level {} outside [1, {}]", seq.level(), sched.steps()),
                ));
            }
            seq
        }
        None => {
            let optim_cfg = cfg.optim_config(cond.len());
            as_config(optim_cfg.validate())?;
            tempoflow::consistency::init_noise(&optim_cfg, {
                let (w, h) = cond.spatial();
                &[3, h, w]
            })?
        }
    };
    let frames = render_frames(&latents, &cond, &generator, &sched)?;
    dirs::write_frames(out, &frames)?;
    println!("frames={}", frames.len());
    println!("level={}", latents.level());
    println!("generator_forwards={}", generator.forward_count());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    frames: usize,
    window: usize,
    warp_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    epe: Option<EpeResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epe_masked: Option<EpeResult>,
}

#[allow(clippy::too_many_arguments)]
pub fn run_eval(
    frames_dir: &Path,
    flows_dir: &Path,
    occ_dir: &Path,
    estimator: Option<&str>,
    block: usize,
    radius: usize,
    window: Option<usize>,
    report_path: Option<&Path>,
) -> Result<(), CliError> {
    let frames = dirs::load_frames(frames_dir)?;
    let flows = dirs::load_flows(flows_dir)?;
    let occs = dirs::load_occlusions(occ_dir)?;
    if flows.len() + 1 != frames.len() || occs.len() != flows.len() {
        return Err(CliError::new(
            Class::Data,
            format!(
                "{} frames need {} flows and occlusion maps, found {} and {}",
                frames.len(),
                frames.len() - 1,
                flows.len(),
                occs.len()
            ),
        ));
    }
    let window = window.unwrap_or(frames.len());
    let we = warp_error(&frames, &flows, &occs, window)?;
    println!("frames={}", frames.len());
    println!("warp_error={we}");

    let mut report = EvalReport {
        frames: frames.len(),
        window,
        warp_error: we,
        epe: None,
        epe_masked: None,
    };

    match estimator {
        None => {}
        Some("block") => {
            let mut preds = Vec::with_capacity(flows.len());
            let mut in_frame_masks: Vec<ValidityMask> = Vec::with_capacity(flows.len());
            let mut valid_masks: Vec<ValidityMask> = Vec::with_capacity(flows.len());
            for t in 0..flows.len() {
                preds.push(block_match_flow(&frames[t], &frames[t + 1], block, radius)?);
                let clear = OcclusionMask::clear(flows[t].width(), flows[t].height());
                in_frame_masks.push(flow::valid_mask(&flows[t], &clear)?);
                valid_masks.push(flow::valid_mask(&flows[t], &occs[t])?);
            }
            let all = epe_sequence(&preds, &flows, &in_frame_masks)?;
            let masked = epe_sequence(&preds, &flows, &valid_masks)?;
            println!("epe={}", all.mean_epe);
            println!("epe_masked={}", masked.mean_epe);
            report.epe = Some(all);
            report.epe_masked = Some(masked);
        }
        Some(other) => {
            return Err(CliError::new(
                Class::Config,
                format!("unknown estimator {other:?}; supported: block"),
            ))
        }
    }

    if let Some(path) = report_path {
        std::fs::write(
            path,
            serde_json::to_vec_pretty(&report).expect("report serializes"),
        )
        .map_err(|e| CliError::new(Class::Data, e.to_string()))?;
    }
    Ok(())
}
