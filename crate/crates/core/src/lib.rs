//! Predictive coding network (PCN) with local recurrent processing.
//!
//! Each PcConv block refines its representation over T cycles: a feedback
//! transposed convolution predicts the block input, the rectified error of
//! that prediction is pushed back through the feedforward convolution, and
//! the representation moves by a learnable non-negative per-filter rate.
//! A 1x1 bypass then merges the normalized input into the output.
//!
//! Layout:
//!
//! - [`tensor`] / [`tape`]: dense tensors and define-by-run reverse-mode AD
//! - [`ops`]: convolution, transposed convolution, batch norm, pooling, heads
//! - [`block`]: the PcConv block
//! - [`zoo`]: architectures A-E and their plain counterparts
//! - [`data`]: CIFAR binary loaders, normalization, augmentation, fixtures
//! - [`trainer`]: Nesterov SGD, LR schedule, evaluation, logging
//! - [`analysis`]: error trajectories, saliency maps, update/gradient cosine
//! - [`checkpoint`]: bit-exact model container
//! - [`gradcheck`]: finite-difference verification of every backward rule

pub mod analysis;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod zoo;

pub use block::{pc_block_forward, prediction_loss, BlockTrace, PcBlockParams};
pub use error::{PcnError, Result};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
pub use zoo::{build_pcn, build_plain, Arch, Model, ModelSpec};
