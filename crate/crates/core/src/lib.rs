//! Masking-based saliency maps: a masker network trained against a classifier
//! with masked-in / masked-out objectives, plus the evaluation and sanity-check
//! stack around it, on a synthetic shapes dataset.

pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod imageio;
pub mod masker;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod perturb;
pub mod plot;
pub mod sanity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
