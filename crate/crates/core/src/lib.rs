//! Desk-scale text-to-3D optimization.
//!
//! A tetrahedral SDF field and a PBR material field are optimized so that
//! their differentiable renders score well under a small frozen denoiser.
//! The denoiser is steered per-iteration by camera-guided low-rank adapters,
//! and its cross-attention maps are pulled toward the rendered object mask.
//!
//! Everything runs on a single-threaded fp64 reverse-mode tape so that
//! gradients can be checked against finite differences exactly.

pub mod cglora;
pub mod denoiser;
pub mod fdiff;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod material;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod render;
pub mod rng;
pub mod selftest;
pub mod tensor;

pub use tensor::{Gradients, Tape, TensorError, TensorId};
