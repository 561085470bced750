//! Task-augmented active meta-learning for few-shot classification of
//! multi-channel image patches.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors with a reverse-mode autodiff tape.
//! * [`model`]: the four-block convolutional classifier and optimizers.
//! * [`tasks`]: binary tasks, task augmentation, episode sampling, synthetic data.
//! * [`meta`]: MAML meta-training and the vanilla / transfer baselines.
//! * [`active`]: MC-dropout entropy scoring and the active labeling loop.
//! * [`bench`]: metrics, method grid, sweeps and result export.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod active;
pub mod bench;
pub mod error;
pub mod meta;
pub mod model;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
