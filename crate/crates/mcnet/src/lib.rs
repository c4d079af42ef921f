//! Synthetic data, file formats, training driver and command line around
//! [`mcnet_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod inspect;
pub mod manifest;
pub mod synth;
pub mod trainer;

pub use error::{AppError, Result};
