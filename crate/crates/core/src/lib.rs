//! Binary hash-code learning with ABC (approximately binary clamping) and
//! scaled-tanh binarizers, Hamming retrieval and mAP evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod autodiff;
pub mod codes;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod labels;
pub mod losses;
pub mod retrieval;
pub mod schedules;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use labels::LabelSet;
pub use tensor::{Scalar, Tensor};
