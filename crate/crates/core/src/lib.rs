//! Zero-shot forecasting of network dynamics through weight flow matching.
//!
//! The pipeline: simulate multi-environment network dynamics, train one
//! expert forecaster per seen environment, tokenize the expert weights,
//! compress them with a transformer VAE, learn a coefficient-conditioned
//! flow in latent space, and generate ready-to-use forecaster weights for
//! unseen coefficients in a single sampling pass.

pub mod cfm;
pub mod container;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod forecaster;
pub mod graph;
pub mod nn;
pub mod pipeline;
pub mod tokenizer;
pub mod util;
pub mod vae;

pub use error::{Error, Result};
