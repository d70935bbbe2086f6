//! Tropical cyclone intensity forecasting in a discrete latent space.

pub mod atmosphere;
pub mod cvqvae;
pub mod error;
pub mod forecaster;
pub mod harness;
pub mod layers;
pub mod numerics;
pub mod potential_intensity;

pub use error::{Error, Result};
