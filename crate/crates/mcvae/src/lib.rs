//! Multimodal contrastive VAE for survival prediction under arbitrary
//! missing-modality patterns, with the synthetic-cohort tooling and
//! experiment drivers needed to evaluate it end to end.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod data;
pub mod experiments;
pub mod losses;
pub mod model;
pub mod nn;
pub mod survival;
pub mod training;

pub use error::{McvaeError, Result};
