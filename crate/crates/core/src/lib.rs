//! Decoupled denoising diffusion with per-attribute data-driven priors.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: the variance-preserving forward process, its Gaussian
//!   transition kernel and the score regression target.
//! - [`tensor`]: dense tensors, reverse-mode tape, perceptrons, AdamW.
//! - [`ensemble`]: per-attribute score networks whose outputs are summed.
//! - [`codec`]: style pooling, pitch normalisation and quantisation,
//!   content perturbation, source/filter prior encoders and prior mixup.
//! - [`sampler`]: forward Euler–Maruyama simulation and reverse-time solvers.
//! - [`toy`]: a synthetic source/filter world with closed-form oracles.
//! - [`harness`]: configuration, checkpoints, training and the CLI commands.

pub mod codec;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod toy;

pub use error::{DddmError, Result};
pub use schedule::{NoiseSchedule, TransitionParams};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha stream `stream` under `seed`. Every random draw in the
/// crate comes from one of these, so runs are reproducible across platforms.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
