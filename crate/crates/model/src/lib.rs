//! Text-conditioned diffusion over sign-language parameter sequences.

pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluate;
pub mod layers;
pub mod params;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
