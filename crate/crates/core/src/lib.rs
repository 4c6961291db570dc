//! Outfit completion GAN conditioned on silhouettes and per-item style codes.

pub mod config;
pub mod data;
pub mod discriminators;
pub mod error;
pub mod extractor;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod rng;
pub mod training;

pub use config::Config;
pub use error::{Error, Result};
