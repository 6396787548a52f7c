//! Bit-exact readers and writers for the interchange formats used by
//! synthetic datasets: Middlebury `.flo` flows, PFM depth maps, 8-bit RGB
//! PNG frames, binary PGM masks, and raw f64 latent dumps with a JSON
//! sidecar.

mod flo;
mod latents;
mod pfm;
mod pgm;
mod png;

pub use flo::{read_flo, write_flo};
pub use latents::{read_latents, write_latents, LatentSidecar, LATENT_SIDECAR_NAME};
pub use pfm::{read_pfm, write_pfm};
pub use pgm::{read_pgm, write_pgm};
pub use png::{read_png, write_png};
