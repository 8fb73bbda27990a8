//! Co-denoising of pixels and frozen-teacher semantic features with
//! flow-matching diffusion, at a scale that trains on one CPU core.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod teacher;
pub mod trainer;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Mask, Tape, Tensor, Var};
