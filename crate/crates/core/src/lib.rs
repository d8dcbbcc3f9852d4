//! Decode-and-transfer attack on deep image steganography.
//!
//! The crate trains a stego oracle (Prep/Hide/Reveal networks), uses it to
//! manufacture (secret, cover, container) tuples, and trains an attack that
//! recovers secrets from the cover/container residual: a decoder producing a
//! rough estimate and a conditional GAN generator refining it.

pub mod attack;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod seed;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
