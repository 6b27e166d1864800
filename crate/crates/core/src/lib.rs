//! Bi-temporal change detection: a siamese VGG-16-BN feature pyramid, hierarchical
//! temporal fusion, change-guided self-attention and a top-down decoder, with the
//! data pipeline, training loop, metrics and error-map rendering around it.

pub mod backbone;
pub mod cgm;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod render;
pub mod trainer;

pub use error::{Error, Result};
