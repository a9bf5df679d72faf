//! Reference predictors the conditional model is compared against: the
//! identity baseline, truncated-SVD linear prediction, and a plain VAE
//! whose latents are shifted by a linear mixed-effects model.

pub mod identity;
pub mod lme;
pub mod svd;
pub mod vae;

pub use identity::identity_predict;
pub use lme::{LatentObservation, LmeModel, fit_lme, predict_vae_lme};
pub use svd::{SvdModel, SvdTrainingPair, fit_svd, predict_svd};
pub use vae::{VaeConfig, VaeModel, VaeTrainConfig, train_vae};
