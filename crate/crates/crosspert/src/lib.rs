//! crosspert: a disentangled-autoencoder engine for predicting how cells
//! respond to perturbations they were never measured under.
//!
//! Expression profiles are factored into a basal-state embedding and a
//! perturbation embedding that add in latent space; decoding a basal state
//! plus a *transferred* perturbation embedding predicts the response in a new
//! cellular context. The crate ships the network core, the training
//! objective, dataset handling, a synthetic ground-truth generator, the
//! evaluation suite, and a command-line interface.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
