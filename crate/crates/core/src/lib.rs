//! Self-supervised masked reconstruction for multichannel sensor windows:
//! data handling, mask sampling, a small transformer encoder with manual
//! gradients, reconstruction and classification objectives, training loops,
//! and evaluation protocols.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod objective;
pub mod train;

pub use error::{Error, Result};
