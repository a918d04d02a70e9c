pub mod diffusion;
pub mod error;
pub mod feasibility;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod sampler;
pub mod scalar;
pub mod scene;

pub use error::{Error, Result};
pub use scalar::Scalar;
