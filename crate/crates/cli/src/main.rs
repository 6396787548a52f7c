//! Command-line pipeline: scene generation, condition derivation, noise
//! optimization, rendering, and evaluation.

mod commands;
mod config;
mod dirs;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use fail::{Class, CliError};

#[derive(Parser)]
#[command(
    name = "tempoflow",
    version,
    about = "Temporally consistent video synthesis by noise-latent optimization"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic clip with exact frames, depths, flows, and occlusions
    GenScene {
        /// Scene description (JSON)
        #[arg(long)]
        spec: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Texture seed mixed into the scene
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Derive normal maps from PFM depth maps
    DeriveNormal {
        /// Directory of .pfm depth maps
        #[arg(long)]
        depth: PathBuf,
        /// Focal lengths as fx,fy
        #[arg(long)]
        intrinsics: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive occlusion masks from frames and flows
    DeriveOcclusion {
        /// Directory of .png frames
        #[arg(long)]
        frames: PathBuf,
        /// Directory of .flo flows
        #[arg(long)]
        flows: PathBuf,
        /// Photometric mean-squared-difference threshold
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize noise latents for temporal consistency
    Optimize {
        /// Run configuration (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Output directory (latents/, frames/, report.json)
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise without optimization (the unoptimized baseline)
    Render {
        #[arg(long)]
        config: PathBuf,
        /// Latent dump directory; defaults to the seeded initial noise
        #[arg(long)]
        latents: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate temporal consistency of a rendered clip
    Eval {
        #[arg(long)]
        frames: PathBuf,
        /// Ground-truth .flo flows
        #[arg(long)]
        flows: PathBuf,
        /// Ground-truth .pgm occlusion masks
        #[arg(long)]
        occ: PathBuf,
        /// Flow estimator for EPE (supported: block)
        #[arg(long)]
        estimator: Option<String>,
        #[arg(long, default_value_t = 4)]
        block: usize,
        #[arg(long, default_value_t = 4)]
        radius: usize,
        /// Window size; defaults to the clip length
        #[arg(long)]
        window: Option<usize>,
        /// Where to write the JSON report
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenScene { spec, out, seed } => commands::gen_scene(&spec, &out, seed),
        Cmd::DeriveNormal {
            depth,
            intrinsics,
            out,
        } => commands::derive_normal(&depth, &intrinsics, &out),
        Cmd::DeriveOcclusion {
            frames,
            flows,
            threshold,
            out,
        } => commands::derive_occlusion(&frames, &flows, threshold, &out),
        Cmd::Optimize { config, out } => commands::run_optimize(&config, &out),
        Cmd::Render {
            config,
            latents,
            out,
        } => commands::run_render(&config, latents.as_deref(), &out),
        Cmd::Eval {
            frames,
            flows,
            occ,
            estimator,
            block,
            radius,
            window,
            report,
        } => commands::run_eval(
            &frames,
            &flows,
            &occ,
            estimator.as_deref(),
            block,
            radius,
            window,
            report.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::new(Class::Config, e.to_string());
            eprintln!("{}", err.render());
            return ExitCode::from(err.class.exit_code() as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.render());
            ExitCode::from(e.class.exit_code() as u8)
        }
    }
}
