//! Capacity-annealed variational autoencoders on procedural factor datasets.
//!
//! The crate provides: procedural blob / mini-sprite datasets with known
//! generative factors (`synthdata`), a small differentiable-computation
//! kernel (`nnkernel`), VAE encoder/decoder stacks (`vae_model`), the ELBO,
//! weighted-KL and capacity-targeted objectives (`objectives`), a
//! ground-truth factor generator (`factor_generator`), training
//! orchestration (`trainer`), and analysis tooling (`diagnostics`).

pub mod capacity_schedule;
pub mod diagnostics;
pub mod factor_generator;
pub mod nnkernel;
pub mod objectives;
pub mod rng;
pub mod synthdata;
pub mod trainer;
pub mod vae_model;
