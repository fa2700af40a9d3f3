//! Decoder-only language model built on power-law graph attention, with
//! deductive outputs and a DAG regularizer on them.

pub mod attention;
pub mod cli;
pub mod config;
pub mod dag;
pub mod data;
pub mod error;
pub mod expm;
pub mod generate;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
