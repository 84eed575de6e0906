//! Core library for generalized discrete diffusion over a finite vocabulary.
//!
//! The forward process is a continuous-time Markov chain on `{0, .., m-1}`
//! whose transition operator interpolates between the identity and a mixing
//! matrix, `K_t = alpha_t I + (1 - alpha_t) Pi_t`.  Everything here is built
//! around that decomposition: schedules fix `alpha_t`, jump kernels fix the
//! conditional jump distribution, uniformization draws exact forward paths,
//! and the dense oracle cross-checks all of it at small vocabulary sizes.
//!
//! The crate is `no_std` (with `alloc`); IO, file formats and the CLI live in
//! the companion `gdds` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod denoiser;
pub mod kernel;
pub mod math;
pub mod metrics;
pub mod objective;
pub mod oracle;
pub mod quad;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod uniformize;
pub mod vocab;
