//! Vertical-layered quantized networks: a 2-bit basic layer plus 1-bit
//! enhance layers from which any precision is assembled on demand.

pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod kernels;
pub mod metrics;
pub mod mixed;
pub mod model;
pub mod par;
pub mod quant;
pub mod train;
pub mod vertical;

pub use error::{Error, Result};
