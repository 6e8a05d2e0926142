//! Infrared/visible image fusion with discrepancy and common-information
//! cross-attention, trained with a segmented pixel loss and a texture loss.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors on a reverse-mode tape, parameter
//!   storage, AdamW.
//! * [`image`]: grayscale PGM/PNG I/O, corpora, random patches.
//! * [`model`]: the fusion network and its checkpoint format.
//! * [`loss`], [`metrics`]: training objective and quality metrics.
//! * [`train`], [`gradcheck`]: the training loop and finite-difference checks.
//! * [`config`], [`cli`]: run configuration and the command-line front end.

pub mod cli;
pub mod config;
pub mod filters;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
