//! Transformer conditional variational autoencoder for prompt-conditioned
//! story generation.
//!
//! The crate is layered bottom-up: [`tensor`] (dense tensors and reverse-mode
//! differentiation), [`corpus`] (byte-level BPE and example assembly),
//! [`transformer`] and [`latent`] (network pieces), [`model`] (VAE/CVAE
//! objectives), then [`trainer`], [`sampler`] and [`eval`].

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod latent;
pub mod model;
pub mod sampler;
pub mod selftest;
pub mod trainer;
pub mod transformer;
