//! Question-guided hybrid convolution for visual question answering.
//!
//! The crate contains a small reverse-mode tensor engine, the neural
//! building blocks, the hybrid convolution module with its kernel predictor,
//! complete answer models, a parameter auditor, a synthetic grid-world VQA
//! task, training, and the binary file formats used by the `qghc` CLI.

pub mod audit;
pub mod autodiff;
pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod format;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod par;
pub mod params;
pub mod qghc;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use tensor::{Rng, Scalar, Tensor};
