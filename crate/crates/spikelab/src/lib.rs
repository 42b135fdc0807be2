//! Numerical laboratory for the spiked cumulant model.
//!
//! Data generation, Hermite classification of activations, the reduced
//! population gradient flow, AMP with its state evolution, replica fixed
//! points for the tied autoencoder and finite-size training all live here.

pub mod datagen;
pub mod ermse;
pub mod hermite;
pub mod latents;
pub mod amp;
pub mod cli;
pub mod popflow;
pub mod quad;
pub mod stateval;
pub mod trainer;
pub mod rng;
