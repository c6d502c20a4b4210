//! samkit: a desk-scale laboratory for sharpness-aware minimization.
//!
//! The crate provides a minimal reverse-mode autodiff engine, small MLP and
//! convnet models with a flat parameter view, the SAM / K-SAM / top-k SGD
//! optimizer family, gradient-alignment and cost diagnostics, deterministic
//! data pipelines, and the `samkit` command-line harness on top.

pub mod autograd;
pub mod data;
pub mod error;
pub mod harness;
pub mod instrument;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
