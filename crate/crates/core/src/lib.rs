//! Distribution-based masked image-language modeling at desk scale.
//!
//! Dual encoders emit a diagonal Gaussian per token or patch. Training mixes
//! a masked-reconstruction KL term with a Wasserstein alignment term between
//! pooled image and text distributions; evaluation scores images against
//! per-class structured-report prompts.

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod io;
pub mod masking;
pub mod nn;
pub mod pipeline;
pub mod prob;
pub mod reports;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
