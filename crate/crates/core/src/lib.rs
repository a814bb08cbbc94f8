//! Local pattern aggregation networks for variable-length time series.
//!
//! A sample is cut into crops, every crop is scored by a shared
//! convolutional network, and the per-crop probability rows are
//! aggregated into one bag-level prediction.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod network;
pub mod params;
pub mod prep;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{CheckpointError, Error, ErrorClass, Result};
pub use params::{ParamSet, ParamVars};
pub use signal::{Bag, CropMode, CropSpec, Signal};
pub use tensor::{Tape, Tensor, Var};
