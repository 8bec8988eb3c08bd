//! Post-training compression toolkit for small text-classification CNNs.
//!
//! - [`data`]: corpora, embeddings, folds
//! - [`model`]: CNN-static topology, on-disk format, quantizable places
//! - [`inference`]: forward pass with pruning-aware convolution, calibration, MACs
//! - [`quantization`]: bucket-midpoint and dynamic fixed-point quantizers
//! - [`pruning`]: magnitude pruning and sweeps
//! - [`search`]: uniform sweeps, hill-climbing bit search, quantization x pruning grid
//! - [`report`]: model-size accounting and table emission
//! - [`codegen`]: unrolled C source with hard-coded weights
//! - [`fixture`]: desk-scale synthetic corpus and trained toy model

pub mod codegen;
pub mod data;
pub mod error;
pub mod fixture;
pub mod inference;
pub mod model;
pub mod pruning;
pub mod quantization;
pub mod report;
pub mod search;
pub mod tensor;

#[doc(hidden)]
pub mod cli;

pub use error::{Error, Result};
pub use inference::{ActivationRanges, InferenceConfig, MacReport};
pub use model::{BitAssignment, ModelGraph, PlaceId};
pub use quantization::{QuantSpec, Range, Scheme};
pub use tensor::Tensor;
