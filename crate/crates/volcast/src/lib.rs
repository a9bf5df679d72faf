//! Learning individualized brain-volume aging trajectories from
//! longitudinal 3D scans: synthetic cohorts, registration, a conditional
//! VAE forecaster, reference baselines and flow-based trajectory analysis.

pub mod analysis;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod cvae;
pub mod dataio;
pub mod error;
pub mod phantom;
pub mod predictor;
pub mod registration;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};
