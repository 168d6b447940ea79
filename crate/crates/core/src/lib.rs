//! Semantically regularized GAN inpainting on a CPU neural-network engine.

pub mod checkpoint;
pub mod config;
pub mod disc;
pub mod domain;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod retrieval;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use semfill_nn as nn;
