//! Pure numeric core of the ContextNet segmentation stack.
//!
//! Everything in this crate is `no_std` + `alloc`: dense NHWC tensors and
//! their kernels, a static compute graph with reverse-mode differentiation,
//! the two-branch architecture builders, batch-norm folding, ℓ1 filter
//! pruning, the RMSprop/poly training loop, synthetic data and mIoU.
//!
//! IO (checkpoints, PPM/PGM, configs) and wall-clock profiling live in the
//! `contextnet` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod arch;
pub mod data;
mod error;
pub mod eval;
pub mod graph;
pub mod kernels;
pub mod prune;
mod real;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Mark, Node, NodeId, Op};
pub use real::Real;
pub use tensor::Tensor;

/// Deterministic generator used everywhere a seed is accepted.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's standard generator from a seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
