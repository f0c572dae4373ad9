//! Spatiotemporal attention video classification with gradient-based
//! frame importance explanations.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors plus a reverse-mode autodiff tape
//! - [`model`]: the four-stage UniFormer-style classifier and its checkpoints
//! - [`views`]: global, local (ROI-masked) and blended input views
//! - [`saliency`]: vanilla gradient, SmoothGrad and Grad-CAM explainers, frame
//!   scoring, threshold calibration and long-sequence extension
//! - [`synth`]: deterministic planted-signal video datasets
//! - [`baseline`]: the patched-image CNN comparison model
//! - [`train`]: AdamW training, cross-validation splits, metrics and the
//!   experiment grid

pub mod baseline;
pub mod error;
pub mod io;
pub mod manifest;
pub mod model;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod video;
pub mod views;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, TensorError, Var};
