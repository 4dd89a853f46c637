//! Dual-channel feature learning for generalized zero-shot classification.
//!
//! A shared feature extractor is trained jointly on the current (seen)
//! classes and on auxiliary classes chosen by taxonomic kinship to the
//! targets. Its features feed a cross-aligned variational embedding that
//! recognizes both seen and unseen classes.

pub mod autodiff;
pub mod datagen;
pub mod dataset;
pub mod dual_channel;
mod error;
pub mod eval;
pub mod taxonomy;
pub mod zsl_head;

pub use error::{Error, Result};
