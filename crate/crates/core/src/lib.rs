//! Refinement of coarse volumetric 3D models from a posed, view-inconsistent
//! enhanced image dataset, using a score-distillation gradient from a
//! denoising diffusion prior together with a pose-conditioned adversarial loss.

pub mod camera;
pub mod ckpt;
pub mod config;
pub mod enhancer;
pub mod error;
pub mod eval;
pub mod gan;
pub mod image;
pub mod math;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod prior;
pub mod rng;
pub mod scene;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
