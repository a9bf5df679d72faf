//! Pipeline configuration: one TOML file drives every subcommand. Unknown
//! keys are rejected, defaults are filled in, and the effective config is
//! echoed into the run directory so any run can be reproduced from its
//! artifacts. A JSON-schema equivalent ships at `config-schema.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{VaeConfig, VaeTrainConfig};
use crate::cvae::ModelConfig;
use crate::error::{Error, Result};
use crate::phantom::PhantomSpec;
use crate::predictor::LatentMode;
use crate::registration::RegistrationConfig;
use crate::seeds;
use crate::trainer::TrainConfig;

pub const CONFIG_SCHEMA: &str = include_str!("../config-schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Test subjects held out per status category.
    pub holdout_per_status: usize,
    /// Validation subjects carved from the remaining training set.
    pub val_per_status: usize,
    /// Evaluation pairs must look forward at least this many years.
    pub min_forward_years: f64,
    /// Ranks for the truncated-SVD baseline (clamped to the column count
    /// with a warning when the training set is smaller).
    pub svd_ranks: Vec<usize>,
    /// Horn-Schunck smoothness weight.
    pub flow_alpha: f64,
    /// Horn-Schunck sweeps.
    pub flow_iters: usize,
    /// Forecast horizons in years for `trajectory`.
    pub horizons: Vec<f64>,
    /// Latent handling for deterministic evaluation forecasts.
    pub latent: LatentMode,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            holdout_per_status: 2,
            val_per_status: 1,
            min_forward_years: 2.0,
            svd_ranks: vec![10, 100],
            flow_alpha: 1.0,
            flow_iters: 200,
            horizons: (1..=10).map(|h| h as f64).collect(),
            latent: LatentMode::Zero,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.holdout_per_status == 0 {
            return Err(Error::Config("holdout_per_status must be positive".into()));
        }
        if !self.min_forward_years.is_finite() || self.min_forward_years < 0.0 {
            return Err(Error::Config("min_forward_years must be finite and >= 0".into()));
        }
        if self.svd_ranks.is_empty() || self.svd_ranks.contains(&0) {
            return Err(Error::Config("svd_ranks must be non-empty and positive".into()));
        }
        if !(self.flow_alpha > 0.0) || !self.flow_alpha.is_finite() {
            return Err(Error::Config("flow_alpha must be finite and > 0".into()));
        }
        if self.flow_iters == 0 {
            return Err(Error::Config("flow_iters must be positive".into()));
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|h| !h.is_finite()) {
            return Err(Error::Config("horizons must be non-empty and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; every stage derives its own seed from it by name.
    pub seed: u64,
    /// All artifacts live under this directory.
    pub run_dir: PathBuf,
    pub phantom: PhantomSpec,
    pub registration: RegistrationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            phantom: PhantomSpec::default(),
            registration: RegistrationConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            vae: VaeConfig::default(),
            vae_train: VaeTrainConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Fan the global seed out to the per-stage seed fields. The stage
    /// seeds are always overwritten, so a config is reproducible from its
    /// `seed` alone and re-resolving an echoed config is a no-op.
    pub fn resolve_seeds(&mut self) {
        self.phantom.seed = seeds::derive(self.seed, "phantom", 0);
        self.train.seed = seeds::derive(self.seed, "train", 0);
        self.vae_train.seed = seeds::derive(self.seed, "vae-train", 0);
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.registration.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.vae.validate()?;
        self.evaluation.validate()?;
        Ok(())
    }

    /// Stage-scoped derived seed for ad-hoc uses (splits, evaluation).
    pub fn stage_seed(&self, stage: &str) -> u64 {
        seeds::derive(self.seed, stage, 0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("encode config: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Parse, resolve defaults and stage seeds, and validate. Field-level
/// schema violations (unknown keys, wrong types, out-of-range values)
/// surface as config errors naming the offending field.
pub fn parse_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: PipelineConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.resolve_seeds();
    cfg.validate()?;
    Ok(cfg)
}

/// Write the fully resolved config into the run directory.
pub fn echo_config(cfg: &PipelineConfig, run_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let path = run_dir.join("effective-config.toml");
    cfg.save(&path)?;
    Ok(path)
}
