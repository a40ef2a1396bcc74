//! CACE-Net: a channel-attention context encoder network for segmenting the
//! inner limiting membrane in OCT-like B-scans, written from scratch on a
//! small tape-based autodiff engine.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod postproc;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Shape, Tensor};
