//! Inference over a trained model: single-horizon prediction, fixed-latent
//! multi-horizon trajectories, and the latent-space disease-status
//! classifier.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::cvae::{ConditioningVector, CvaeModel};
use crate::dataio::{Standardizer, Volume, save_volume};
use crate::error::{Error, Result};
use crate::seeds;

/// How the latent vector fed to the decoder is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LatentMode {
    /// Standard-normal draw from a seeded generator.
    Sampled { seed: u64 },
    /// The prior mean.
    Zero,
    /// A caller-supplied vector (length must match the model).
    Explicit { z: Vec<f64> },
}

impl LatentMode {
    pub fn realize(&self, d_z: usize) -> Result<Vec<f64>> {
        match self {
            LatentMode::Sampled { seed } => {
                let mut rng = seeds::rng(*seed, "latent", 0);
                Ok((0..d_z)
                    .map(|_| rand_distr::StandardNormal.sample(&mut rng))
                    .collect())
            }
            LatentMode::Zero => Ok(vec![0.0; d_z]),
            LatentMode::Explicit { z } => {
                if z.len() != d_z {
                    return Err(Error::Shape(format!(
                        "explicit latent vector has length {}, model expects {d_z}",
                        z.len()
                    )));
                }
                if !z.iter().all(|v| v.is_finite()) {
                    return Err(Error::Data("explicit latent vector is non-finite".into()));
                }
                Ok(z.clone())
            }
        }
    }
}

/// Standardize covariates for a (base age, horizon) query, warning when the
/// horizon falls far outside the range the standardizer was fit on.
fn conditioning(
    std: &Standardizer,
    age: f64,
    status: u8,
    delta_t: f64,
) -> Result<ConditioningVector> {
    if !age.is_finite() || !delta_t.is_finite() {
        return Err(Error::Data(format!(
            "non-finite covariates: age {age}, delta_t {delta_t}"
        )));
    }
    if status > 5 {
        return Err(Error::Data(format!("status {status} outside 0..=5")));
    }
    let (age_std, delta_t_std) = std.apply(age, delta_t);
    if !age_std.is_finite() || !delta_t_std.is_finite() {
        return Err(Error::Numerics(format!(
            "standardized covariates are non-finite (age {age_std}, delta_t {delta_t_std})"
        )));
    }
    if std.dt_is_outside(delta_t, 3.0) {
        log::warn!(
            "horizon {delta_t:.2}y is more than 3 standard deviations from the \
             training-set mean; extrapolating"
        );
    }
    let cond = ConditioningVector {
        age_std,
        delta_t_std,
        status: status as f64,
    };
    cond.validate()?;
    Ok(cond)
}

/// Decode one future volume at `delta_t` years past the base scan.
pub fn predict_future(
    model: &CvaeModel,
    base: &Volume,
    age: f64,
    status: u8,
    delta_t: f64,
    std: &Standardizer,
    mode: &LatentMode,
) -> Result<Volume> {
    let cond = conditioning(std, age, status, delta_t)?;
    let z = mode.realize(model.config.latent_dim)?;
    model.decode(base, &z, &cond)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRequest {
    pub age: f64,
    pub status: u8,
    /// Horizons in years; may be negative or extrapolate past training.
    pub horizons: Vec<f64>,
    pub latent: LatentMode,
}

impl TrajectoryRequest {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() {
            return Err(Error::Data("trajectory requires at least one horizon".into()));
        }
        if !self.horizons.iter().all(|h| h.is_finite()) {
            return Err(Error::Data("trajectory horizons must be finite".into()));
        }
        if self.status > 5 {
            return Err(Error::Data(format!("status {} outside 0..=5", self.status)));
        }
        Ok(())
    }
}

/// Decode the same base volume at every requested horizon with one shared
/// latent draw; returns `(horizon, volume)` in request order.
pub fn trajectory(
    model: &CvaeModel,
    base: &Volume,
    request: &TrajectoryRequest,
    std: &Standardizer,
) -> Result<Vec<(f64, Volume)>> {
    request.validate()?;
    let z = request.latent.realize(model.config.latent_dim)?;
    let mut out = Vec::with_capacity(request.horizons.len());
    for &h in &request.horizons {
        let cond = conditioning(std, request.age, request.status, h)?;
        out.push((h, model.decode(base, &z, &cond)?));
    }
    Ok(out)
}

/// Index written next to trajectory volumes: horizon → file, plus the
/// latent vector actually used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryIndex {
    pub latent: Vec<f64>,
    pub latent_mode: LatentMode,
    pub volumes: Vec<TrajectoryEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub horizon_years: f64,
    pub path: PathBuf,
}

/// Run a trajectory and save one volume per horizon plus `index.json` into
/// `out_dir`. Horizon values are embedded in the file names with the sign
/// and two decimals, e.g. `horizon_+03.00y.nii.gz`.
pub fn write_trajectory(
    model: &CvaeModel,
    base: &Volume,
    request: &TrajectoryRequest,
    std: &Standardizer,
    out_dir: &Path,
) -> Result<TrajectoryIndex> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let volumes = trajectory(model, base, request, std)?;
    let z = request.latent.realize(model.config.latent_dim)?;
    let mut entries = Vec::with_capacity(volumes.len());
    for (h, vol) in &volumes {
        let name = format!("horizon_{h:+07.2}y.nii.gz");
        let path = out_dir.join(&name);
        save_volume(vol, &path)?;
        entries.push(TrajectoryEntry {
            horizon_years: *h,
            path: PathBuf::from(name),
        });
    }
    let index = TrajectoryIndex {
        latent: z,
        latent_mode: request.latent.clone(),
        volumes: entries,
    };
    let index_path = out_dir.join("index.json");
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Data(format!("encode trajectory index: {e}")))?;
    std::fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))?;
    Ok(index)
}

/// Latent-space classifier output for a two-hypothesis status test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorResult {
    pub hypotheses: (u8, u8),
    pub mu_null: Vec<f64>,
    pub mu_alt: Vec<f64>,
    pub log_f_null: f64,
    pub log_f_alt: f64,
    /// Posterior probability of the first (null) hypothesis.
    pub p_null: f64,
}

impl PosteriorResult {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("encode posterior: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Log density of the latent mean under the standard-normal prior:
/// `log f = -d/2 * log(2*pi) - ||mu||^2 / 2`.
fn log_prior_density(mu: &[f64]) -> f64 {
    let d = mu.len() as f64;
    let sq: f64 = mu.iter().map(|m| m * m).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * sq
}

/// Two-way posterior from precomputed latent means under equal priors:
/// the probability that `mu_null`'s hypothesis generated the pair.
/// Evaluated in the log domain, so arbitrarily large `||mu||^2`
/// differences stay finite.
pub fn posterior_from_means(mu_null: &[f64], mu_alt: &[f64]) -> f64 {
    sigmoid(log_prior_density(mu_null) - log_prior_density(mu_alt))
}

/// Encode the observed pair under each status hypothesis and compare how
/// well the latent means fit the prior. Computed in the log domain;
/// `p_null = sigmoid(log_f_null - log_f_alt)` so `p_null + p_alt == 1`
/// exactly.
pub fn status_posterior(
    model: &CvaeModel,
    base: &Volume,
    target: &Volume,
    age: f64,
    delta_t: f64,
    std: &Standardizer,
    hypotheses: (u8, u8),
) -> Result<PosteriorResult> {
    let (h_null, h_alt) = hypotheses;
    if h_null == h_alt {
        return Err(Error::Config(
            "status hypotheses must differ (got identical codes)".into(),
        ));
    }
    let cond_null = conditioning(std, age, h_null, delta_t)?;
    let cond_alt = conditioning(std, age, h_alt, delta_t)?;
    let g_null = model.encode(base, target, &cond_null)?;
    let g_alt = model.encode(base, target, &cond_alt)?;
    g_null.validate()?;
    g_alt.validate()?;
    let log_f_null = log_prior_density(&g_null.mean);
    let log_f_alt = log_prior_density(&g_alt.mean);
    let p_null = posterior_from_means(&g_null.mean, &g_alt.mean);
    Ok(PosteriorResult {
        hypotheses,
        mu_null: g_null.mean,
        mu_alt: g_alt.mean,
        log_f_null,
        log_f_alt,
        p_null,
    })
}

/// Numerically safe logistic function.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax posterior over any set of status hypotheses (an extension of
/// the two-way test; not part of the reference evaluation).
pub fn status_posterior_many(
    model: &CvaeModel,
    base: &Volume,
    target: &Volume,
    age: f64,
    delta_t: f64,
    std: &Standardizer,
    hypotheses: &[u8],
) -> Result<BTreeMap<u8, f64>> {
    if hypotheses.len() < 2 {
        return Err(Error::Config("need at least two status hypotheses".into()));
    }
    let mut log_f = Vec::with_capacity(hypotheses.len());
    for &h in hypotheses {
        let cond = conditioning(std, age, h, delta_t)?;
        let g = model.encode(base, target, &cond)?;
        g.validate()?;
        log_f.push(log_prior_density(&g.mean));
    }
    let max = log_f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_f.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(hypotheses
        .iter()
        .zip(exps)
        .map(|(h, e)| (*h, e / sum))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvae::{LatentGaussian, ModelConfig};

    fn identity_standardizer() -> Standardizer {
        Standardizer {
            age_mean: 0.0,
            age_std: 1.0,
            dt_mean: 0.0,
            dt_std: 1.0,
        }
    }

    fn small_model(seed: u64) -> CvaeModel {
        let cfg = ModelConfig {
            latent_dim: 3,
            encoder_blocks: 1,
            channels: vec![4],
            groupnorm_groups: 4,
            image_size: 4,
            ..ModelConfig::default()
        };
        CvaeModel::init(cfg, seed).unwrap()
    }

    fn vol(seed: u64) -> Volume {
        let mut rng = seeds::rng(seed, "predvol", 0);
        let data: Vec<f32> = (0..64)
            .map(|_| {
                let e: f64 = rand_distr::StandardNormal.sample(&mut rng);
                e as f32 * 0.2
            })
            .collect();
        Volume::centered([4, 4, 4], 1.0, data).unwrap()
    }

    #[test]
    fn latent_modes_realize_correctly() {
        let z = LatentMode::Zero.realize(4).unwrap();
        assert_eq!(z, vec![0.0; 4]);

        let a = LatentMode::Sampled { seed: 9 }.realize(4).unwrap();
        let b = LatentMode::Sampled { seed: 9 }.realize(4).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|v| *v != 0.0));

        let e = LatentMode::Explicit {
            z: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(e.realize(3).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(e.realize(4).is_err());
    }

    #[test]
    fn same_seed_gives_identical_volumes() {
        let model = small_model(3);
        let base = vol(1);
        let std = identity_standardizer();
        let mode = LatentMode::Sampled { seed: 5 };
        let a = predict_future(&model, &base, 70.0, 2, 1.0, &std, &mode).unwrap();
        let b = predict_future(&model, &base, 70.0, 2, 1.0, &std, &mode).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn trajectory_is_per_horizon_independent() {
        let model = small_model(4);
        let base = vol(2);
        let std = identity_standardizer();
        let req = TrajectoryRequest {
            age: 70.0,
            status: 3,
            horizons: vec![0.0, 1.0, 2.0],
            latent: LatentMode::Sampled { seed: 11 },
        };
        let fwd = trajectory(&model, &base, &req, &std).unwrap();
        let perm = TrajectoryRequest {
            horizons: vec![2.0, 0.0, 1.0],
            ..req.clone()
        };
        let back = trajectory(&model, &base, &perm, &std).unwrap();
        assert_eq!(fwd[0].1.data(), back[1].1.data());
        assert_eq!(fwd[1].1.data(), back[2].1.data());
        assert_eq!(fwd[2].1.data(), back[0].1.data());

        // single-horizon trajectory equals predict_future
        let single = TrajectoryRequest {
            horizons: vec![0.0],
            ..req.clone()
        };
        let t = trajectory(&model, &base, &single, &std).unwrap();
        let p = predict_future(
            &model,
            &base,
            70.0,
            3,
            0.0,
            &std,
            &LatentMode::Sampled { seed: 11 },
        )
        .unwrap();
        assert_eq!(t[0].1.data(), p.data());
    }

    #[test]
    fn write_trajectory_emits_volumes_and_index() {
        let model = small_model(5);
        let base = vol(3);
        let std = identity_standardizer();
        let req = TrajectoryRequest {
            age: 71.0,
            status: 5,
            horizons: vec![-1.0, 0.0, 2.5],
            latent: LatentMode::Zero,
        };
        let dir = tempfile::tempdir().unwrap();
        let index = write_trajectory(&model, &base, &req, &std, dir.path()).unwrap();
        assert_eq!(index.volumes.len(), 3);
        assert_eq!(index.latent, vec![0.0; 3]);
        for e in &index.volumes {
            assert!(dir.path().join(&e.path).is_file(), "{:?}", e.path);
        }
        let parsed: TrajectoryIndex = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("index.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(parsed.volumes.len(), 3);
        assert_eq!(parsed.volumes[0].horizon_years, -1.0);
    }

    #[test]
    fn posterior_symmetry_and_closed_forms() {
        // mu_0 = mu_5 -> p = 0.5 exactly
        let p = sigmoid(0.0);
        assert_eq!(p, 0.5);

        // ||mu_0||^2 = 0, ||mu_5||^2 = 2 -> p_0 = 1/(1+e^-1)
        let log_f0 = log_prior_density(&[0.0, 0.0]);
        let log_f5 = log_prior_density(&[2.0f64.sqrt(), 0.0]);
        let p0 = sigmoid(log_f0 - log_f5);
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p0 - expect).abs() < 1e-12, "{p0} vs {expect}");
        assert!((p0 - 0.7310585786300049).abs() < 1e-12);

        // ||mu||^2 difference of 200: no overflow, p saturates to 1
        let big = log_prior_density(&[0.0, 0.0]) - log_prior_density(&[14.0, 2.0]);
        assert_eq!(big, 100.0);
        let p_big = sigmoid(big);
        assert!(p_big > 1.0 - 1e-12 && p_big <= 1.0 && p_big.is_finite());
        let p_small = sigmoid(-big);
        assert!(p_small < 1e-12 && p_small > 0.0);
    }

    #[test]
    fn posterior_on_model_swaps_and_sums_to_one() {
        let model = small_model(6);
        let base = vol(4);
        let target = vol(5);
        let std = identity_standardizer();
        let r = status_posterior(&model, &base, &target, 72.0, 2.0, &std, (0, 5)).unwrap();
        assert!(r.p_null > 0.0 && r.p_null < 1.0);
        let swapped =
            status_posterior(&model, &base, &target, 72.0, 2.0, &std, (5, 0)).unwrap();
        // two-way softmax: swapping hypotheses maps p -> 1 - p
        assert!((r.p_null + swapped.p_null - 1.0).abs() < 1e-15);
        assert_eq!(r.mu_null, swapped.mu_alt);
        assert!(status_posterior(&model, &base, &target, 72.0, 2.0, &std, (3, 3)).is_err());
    }

    #[test]
    fn posterior_decreases_in_null_mean_norm() {
        // strictly decreasing in ||mu_0||^2 - ||mu_5||^2
        let mut last = f64::INFINITY;
        for k in 0..10 {
            let mu0 = vec![(k as f64) * 0.5, 0.0];
            let p = sigmoid(log_prior_density(&mu0) - log_prior_density(&[1.0, 0.0]));
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn many_way_posterior_is_a_distribution() {
        let model = small_model(7);
        let base = vol(6);
        let target = vol(7);
        let std = identity_standardizer();
        let post =
            status_posterior_many(&model, &base, &target, 70.0, 1.0, &std, &[0, 2, 5]).unwrap();
        let sum: f64 = post.values().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(post.values().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn kl_reference_consistency_for_prior_density() {
        // log density at the origin equals the normal constant
        let g = LatentGaussian {
            mean: vec![0.0; 4],
            logvar: vec![0.0; 4],
        };
        let expect = -0.5 * 4.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((log_prior_density(&g.mean) - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_and_invalid_inputs_error() {
        let model = small_model(8);
        let base = vol(8);
        let std = identity_standardizer();
        assert!(predict_future(&model, &base, f64::NAN, 0, 1.0, &std, &LatentMode::Zero).is_err());
        assert!(predict_future(&model, &base, 70.0, 9, 1.0, &std, &LatentMode::Zero).is_err());
        let req = TrajectoryRequest {
            age: 70.0,
            status: 0,
            horizons: vec![],
            latent: LatentMode::Zero,
        };
        assert!(trajectory(&model, &base, &req, &std).is_err());
    }
}
