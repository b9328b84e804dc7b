//! Conditional latent transfer between two independently trained VAEs.

pub mod config;
pub mod dataio;
pub mod error;
pub mod evaluator;
pub mod pipeline;
pub mod transfer;
pub mod vae;

pub use error::{Error, Result};
