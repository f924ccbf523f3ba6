//! Adversarial example generation and detection by the dispersion of
//! multi-layer leave-one-out attributions.

pub mod attacks;
pub mod attribution;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod dispersion;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod network;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
