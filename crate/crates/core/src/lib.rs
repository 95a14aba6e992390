//! Cross-view contrastive feature learning for hyperspectral cubes.

pub mod aae;
pub mod backbone;
pub mod channelsplit;
pub mod contrast;
pub mod datacube;
pub mod error;
pub mod evaluate;
pub mod history;
pub mod nn;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
