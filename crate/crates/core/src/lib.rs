//! Few-shot meta-learning with adaptation-agnostic (decoupled) meta-training.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation, including
//!   gradients of gradients.
//! - [`networks`]: the shared embedding network, classification heads and
//!   the squared-distance metric.
//! - [`inner`]: inner-task algorithms that turn an embedded support set into
//!   task-specific parameters.
//! - [`meta`]: meta-training strategies, both coupled (gradients flow through
//!   adaptation) and decoupled (task parameters are held fixed).
//! - [`episodes`]: episodic sampling from synthetic or CSV-backed sources.
//! - [`harness`]: configuration, checkpoints, results files and the
//!   train/eval/ablate/bench drivers behind the `a2m` binary.

pub mod autodiff;
pub mod episodes;
pub mod harness;
pub mod error;
pub mod inner;
pub mod meta;
pub mod networks;

pub use error::{Error, Result};
