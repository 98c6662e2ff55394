//! Multi-resolution diffusion with dual spatial/spectral convolutions.

pub mod checkpoint;
pub mod diffusion;
pub mod dualconv;
pub mod engine;
pub mod error;
pub mod eval;
pub mod grid;
pub mod imageio;
pub mod model;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
