//! Allocation-only core of a sparse-view synthesis engine.
//!
//! The pipeline turns a handful of posed source images into a neural
//! embedding volume (shared 2D feature encoder, plane-sweep warping, variance
//! cost aggregation, 3D UNet), decodes that volume with a radiance MLP, and
//! renders image patches by volume compositing. Training alternates a
//! PatchGAN discriminator step with a generator step that combines an
//! adversarial term, L1 reconstruction, edge-aware depth smoothness and a
//! ray distortion regularizer.
//!
//! Everything here is pure computation over `alloc` collections. File
//! formats, the training driver and the command line live in the
//! `sparseview` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adversarial;
pub mod camera;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod psv;
pub mod radiance;
pub mod real;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Graph, Gradients, Tensor, Var};
