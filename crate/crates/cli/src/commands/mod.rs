pub mod analyze;
pub mod codebook;
pub mod detect;
pub mod metrics;
pub mod poison;
pub mod simulate;
pub mod verify;

use stegolab_core::numerics::{gaussian_sample, LatentVector, RandomStream};

/// Random anchor of the requested norm, shared by the simulation-style
/// subcommands so their setup matches the library's conventions.
pub fn random_anchor(
    stream: &RandomStream,
    dim: usize,
    norm: f64,
) -> anyhow::Result<LatentVector> {
    let draw = gaussian_sample(stream, dim, 1.0)?;
    let len = draw.norm();
    anyhow::ensure!(len > 0.0, "degenerate zero-norm anchor draw");
    Ok(draw.scale(norm / len)?)
}
