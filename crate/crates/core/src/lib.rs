//! Desk-scale material generation: a pixel-space diffusion model over 2x2
//! SVBRDF grids, a learned realism reward over rendered materials, and
//! DDPO-style policy-gradient finetuning of LoRA adapters.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod net;
pub mod optim;
pub mod raster;
pub mod render;
pub mod reward;
pub mod rl;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
