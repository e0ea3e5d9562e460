//! Neural-network engine whose pre-activation is a pluggable similarity
//! kernel (dot product, cosine, centered cosine, weight-normalized dot),
//! with optional layer or batch normalization and hand-written backward
//! passes.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense row-major `f64` tensors, matmul, reductions and patch
//!   extraction.
//! - [`kernels`]: scalar similarity kernels and their gradients.
//! - [`layers`]: batched dense/conv/norm/activation/softmax layers.
//! - [`network`]: architectures and the end-to-end classifier.
//! - [`train`]: losses, SGD, parameter averaging, metrics and the training loop.
//! - [`data`]: IDX reading/writing, synthetic blobs and batching.
//! - [`checkpoint`]: binary save/load.
//! - [`gradcheck`]: finite-difference verification of every backward pass.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use data::Dataset;
pub use error::{Error, Result};
pub use kernels::SimilarityKind;
pub use network::{Architecture, LayerSpec, Network, NormKind};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainOutcome};
