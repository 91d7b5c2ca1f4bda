//! Toy cross-attention denoiser whose per-character attention is trained
//! toward localised latent masks.
//!
//! The pipeline: render a glyph corpus ([`glyph`]), encode text
//! ([`textenc`]), predict noise while exposing attention ([`denoiser`]),
//! threshold blurred attention into masks ([`maskops`]), and train with the
//! mask-aware objectives ([`losses`], [`trainer`]). [`harness`] owns files,
//! evaluation and the command line.

pub mod denoiser;
pub mod error;
pub mod exec;
pub mod glyph;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod maskops;
pub mod model;
pub mod optim;
mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod textenc;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{Model, ModelDims};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainState};
