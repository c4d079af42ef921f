//! Talking-head animation network built on a small reverse-mode autodiff core.
//!
//! The crate is `no_std` with `alloc` when the default `std` feature is off.
//! File formats, the dataset renderer and the command line live in the
//! companion `mcnet` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod motion;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod real;
pub mod tensor;
pub mod train;

pub use autodiff::{CustomOp, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use pipeline::{AnimateOptions, MCNetModel, ModelConfig};
pub use real::{DType, Real};
pub use tensor::Tensor;
