//! Non-autoregressive sequence-to-sequence generation with a conditional
//! normalizing-flow prior over continuous latent sequences.

pub mod compute;
pub mod config;
pub mod data;
pub mod decoding;
pub mod eval;
pub mod flow;
pub mod model;
pub mod nets;
pub mod training;
pub mod verify;
mod error;

pub use error::{Error, Result};
