//! Temporally consistent video synthesis by optimizing the initial noise
//! latents of a fixed, deterministic conditional diffusion sampler.
//!
//! Corresponding pixels across frames are linked by ground-truth optical
//! flow and occlusion maps; a windowed, masked discrepancy over flow-warped
//! frames is minimized by gradient descent on the noise latents while the
//! generator itself stays frozen. The crate ships everything needed to run
//! the pipeline end to end at desk scale: a dense-tensor autodiff core, flow
//! warping and masking, a DDIM sampler over a seeded toy generator, the
//! consistency optimizer, evaluation metrics, a procedural scene generator
//! with exact ground truth, and bit-exact readers/writers for the usual
//! interchange formats.

pub mod consistency;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod formats;
pub mod metrics;
pub mod scene;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor;

/// Worker-count cap read from `TEMPOFLOW_THREADS`; defaults to the
/// machine's available parallelism.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("TEMPOFLOW_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}
