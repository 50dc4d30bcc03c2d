//! Minimal neural-network toolkit on top of `candle-core` autodiff.

pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

pub use ops::GaussTensor;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamGroup, ParamStore};
