//! Synthetic dynamic cardiac PET denoising at desk scale.
//!
//! The pipeline: simulate dynamic phantom studies with known kinetic ground
//! truth (`phantom`), train an unconditional diffusion prior on pseudo-clean
//! static volumes and a conditional control branch on temporal frame stacks
//! (`diffusion`, `nn`), denoise each frame by posterior-guided ancestral
//! sampling with a timed switch to the conditional model (`sampler`), then
//! quantify uptake voxel-wise with a one-tissue compartment model and convert
//! to blood flow (`kinetics`). `metrics` scores image quality and parameter
//! recovery; `cli` wires everything into reproducible commands.

pub mod error;
pub mod seed;
pub mod vol;
pub mod study;
pub mod phantom;
pub mod metrics;
pub mod diffusion;
pub mod nn;
pub mod train;
pub mod sampler;
pub mod kinetics;
pub mod cli;

pub use error::{DecadeError, Result};
