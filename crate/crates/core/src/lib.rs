//! Disentangled speaker-embedding training at desk scale: two encoders and a
//! decoder trained with classification, mutual-information, reconstruction,
//! and identity-change criteria, plus an EER verification harness.

pub mod autodiff;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod losses;
pub mod train;
pub mod nets;
pub mod verify;

pub use error::{Error, Result};
