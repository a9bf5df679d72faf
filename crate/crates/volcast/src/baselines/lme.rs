//! Linear mixed-effects model over VAE latent coordinates.
//!
//! Each latent dimension is fit independently with fixed effects
//! {intercept, time, status, status x time} and a random intercept per
//! subject, by maximum likelihood: the variance ratio lambda = sigma_b^2 /
//! sigma^2 is profiled out with a golden-section search and the fixed
//! effects are the GLS solution at the optimum. Predictions shift an
//! encoded latent along the fitted time slope for the requested status and
//! decode the result.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use super::vae::VaeModel;
use crate::dataio::Volume;
use crate::error::{Error, Result};

/// One encoded scan: `time` is years since the subject's first scan.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentObservation {
    pub subject: usize,
    pub time: f64,
    pub status: f64,
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmeDim {
    pub intercept: f64,
    pub beta_time: f64,
    pub beta_status: f64,
    pub beta_interaction: f64,
    pub random_intercept_var: f64,
    pub residual_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmeModel {
    pub dims: Vec<LmeDim>,
}

impl LmeModel {
    pub fn latent_dim(&self) -> usize {
        self.dims.len()
    }

    /// Move a latent vector `delta_t` years along the fitted trajectory for
    /// the given status. `delta_t = 0` returns the input unchanged.
    pub fn shift(&self, z: &[f64], status: f64, delta_t: f64) -> Result<Vec<f64>> {
        if z.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "latent has length {}, model has {} dimensions",
                z.len(),
                self.dims.len()
            )));
        }
        Ok(z.iter()
            .zip(&self.dims)
            .map(|(zj, d)| zj + delta_t * (d.beta_time + d.beta_interaction * status))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("encode LME model: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: LmeModel =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("decode LME model: {e}")))?;
        if model.dims.is_empty() {
            return Err(Error::Data("LME model has no dimensions".into()));
        }
        for (j, d) in model.dims.iter().enumerate() {
            let coeffs = [
                d.intercept,
                d.beta_time,
                d.beta_status,
                d.beta_interaction,
                d.random_intercept_var,
                d.residual_var,
            ];
            if coeffs.iter().any(|v| !v.is_finite())
                || d.random_intercept_var < 0.0
                || d.residual_var < 0.0
            {
                return Err(Error::Data(format!("LME dimension {j} has invalid coefficients")));
            }
        }
        Ok(model)
    }
}

fn design_row(time: f64, status: f64) -> Vector4<f64> {
    Vector4::new(1.0, time, status, status * time)
}

/// Per-subject sufficient statistics for the design side.
struct SubjectDesign {
    n: f64,
    gram: Matrix4<f64>,
    sums: Vector4<f64>,
    rows: Vec<usize>,
}

struct SubjectResponse {
    xty: Vector4<f64>,
    ysum: f64,
    yty: f64,
}

const LAMBDA_MAX: f64 = 1e3;
const RSS_FLOOR: f64 = 1e-300;

fn golden_min(mut f: impl FnMut(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

struct DimFit {
    beta: Vector4<f64>,
    rss: f64,
}

/// GLS solve and generalized RSS at a fixed variance ratio lambda.
fn evaluate(
    lambda: f64,
    designs: &[SubjectDesign],
    responses: &[SubjectResponse],
    n_total: f64,
) -> (f64, DimFit) {
    let mut a = Matrix4::zeros();
    let mut c = Vector4::zeros();
    let mut logdet = 0.0;
    for (ds, rs) in designs.iter().zip(responses) {
        let w = lambda / (1.0 + lambda * ds.n);
        a += ds.gram - ds.sums * ds.sums.transpose() * w;
        c += rs.xty - ds.sums * (w * rs.ysum);
        logdet += (1.0 + lambda * ds.n).ln();
    }
    let scale = a.norm().max(RSS_FLOOR);
    let pinv = a
        .pseudo_inverse(scale * 1e-12)
        .expect("SVD of a finite 4x4 matrix");
    let beta = pinv * c;
    let mut rss = 0.0;
    for (ds, rs) in designs.iter().zip(responses) {
        let w = lambda / (1.0 + lambda * ds.n);
        let fit = rs.yty - 2.0 * beta.dot(&rs.xty) + (ds.gram * beta).dot(&beta);
        let rsum = rs.ysum - ds.sums.dot(&beta);
        rss += fit - w * rsum * rsum;
    }
    rss = rss.max(0.0);
    let objective = n_total * rss.max(RSS_FLOOR).ln() + logdet;
    (objective, DimFit { beta, rss })
}

/// Fit one mixed-effects model per latent dimension.
pub fn fit_lme(observations: &[LatentObservation]) -> Result<LmeModel> {
    if observations.is_empty() {
        return Err(Error::Data("LME fit needs at least one observation".into()));
    }
    let d = observations[0].latent.len();
    if d == 0 {
        return Err(Error::Data("LME observations have empty latent vectors".into()));
    }
    for (i, o) in observations.iter().enumerate() {
        if o.latent.len() != d {
            return Err(Error::Shape(format!(
                "observation {i} has latent length {}, expected {d}",
                o.latent.len()
            )));
        }
        if !o.time.is_finite()
            || !o.status.is_finite()
            || o.latent.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Data(format!("observation {i} has non-finite values")));
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, o) in observations.iter().enumerate() {
        groups.entry(o.subject).or_default().push(i);
    }
    if groups.values().all(|rows| rows.len() < 2) {
        return Err(Error::Data(
            "LME fit needs at least one subject with two or more scans to separate \
             the random intercept from residual noise"
                .into(),
        ));
    }

    if observations.iter().all(|o| o.time.abs() < 1e-12) {
        log::warn!("all observation times are zero; time slopes are unidentifiable");
    }
    let s0 = observations[0].status;
    if observations.iter().all(|o| (o.status - s0).abs() < 1e-12) {
        log::warn!(
            "status is constant ({s0}) across observations; status effects are \
             confounded with the intercept and time slope"
        );
    }

    let designs: Vec<SubjectDesign> = groups
        .values()
        .map(|rows| {
            let mut gram = Matrix4::zeros();
            let mut sums = Vector4::zeros();
            for &i in rows {
                let x = design_row(observations[i].time, observations[i].status);
                gram += x * x.transpose();
                sums += x;
            }
            SubjectDesign {
                n: rows.len() as f64,
                gram,
                sums,
                rows: rows.clone(),
            }
        })
        .collect();
    let total_gram: Matrix4<f64> = designs.iter().map(|s| s.gram).sum();
    let rank = total_gram
        .svd(false, false)
        .rank(total_gram.norm().max(RSS_FLOOR) * 1e-10);
    if rank < 4 {
        log::warn!(
            "design matrix has rank {rank} < 4; fixed effects use a minimum-norm solution"
        );
    }

    let n_total = observations.len() as f64;
    let mut dims = Vec::with_capacity(d);
    for j in 0..d {
        let responses: Vec<SubjectResponse> = designs
            .iter()
            .map(|ds| {
                let mut xty = Vector4::zeros();
                let mut ysum = 0.0;
                let mut yty = 0.0;
                for &i in &ds.rows {
                    let y = observations[i].latent[j];
                    xty += design_row(observations[i].time, observations[i].status) * y;
                    ysum += y;
                    yty += y * y;
                }
                SubjectResponse { xty, ysum, yty }
            })
            .collect();
        let lambda = golden_min(
            |l| evaluate(l, &designs, &responses, n_total).0,
            0.0,
            LAMBDA_MAX,
            150,
        );
        let (_, fit) = evaluate(lambda, &designs, &responses, n_total);
        let residual_var = fit.rss / n_total;
        dims.push(LmeDim {
            intercept: fit.beta[0],
            beta_time: fit.beta[1],
            beta_status: fit.beta[2],
            beta_interaction: fit.beta[3],
            random_intercept_var: lambda * residual_var,
            residual_var,
        });
    }
    Ok(LmeModel { dims })
}

/// Baseline forecast: encode the base scan, shift the latent mean
/// `delta_t` years along the fitted trajectory, decode.
pub fn predict_vae_lme(
    vae: &VaeModel,
    lme: &LmeModel,
    base: &Volume,
    status: f64,
    delta_t: f64,
) -> Result<Volume> {
    if lme.latent_dim() != vae.config.latent_dim {
        return Err(Error::Shape(format!(
            "LME model has {} dimensions, VAE latent is {}",
            lme.latent_dim(),
            vae.config.latent_dim
        )));
    }
    if !status.is_finite() || !delta_t.is_finite() {
        return Err(Error::Data("status and delta_t must be finite".into()));
    }
    let g = vae.encode(base)?;
    let shifted = lme.shift(&g.mean, status, delta_t)?;
    vae.decode(&shifted, base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::RngExt;
    use rand_distr::{Distribution, StandardNormal};

    fn exact_obs(beta: &[[f64; 4]]) -> Vec<LatentObservation> {
        // 8 subjects, 3 scans each, statuses alternating 0/5, no noise
        let mut rng = seeds::rng(7, "lme-exact", 0);
        let mut obs = Vec::new();
        for subject in 0..8 {
            let status = if subject % 2 == 0 { 0.0 } else { 5.0 };
            for visit in 0..3 {
                let time = visit as f64 * (1.0 + 0.3 * rng.random::<f64>());
                let latent = beta
                    .iter()
                    .map(|b| b[0] + b[1] * time + b[2] * status + b[3] * status * time)
                    .collect();
                obs.push(LatentObservation {
                    subject,
                    time,
                    status,
                    latent,
                });
            }
        }
        obs
    }

    #[test]
    fn recovers_exact_coefficients_without_noise() {
        let beta = [[0.4, -0.8, 0.12, 0.05], [-1.0, 0.3, -0.02, -0.07]];
        let model = fit_lme(&exact_obs(&beta)).unwrap();
        assert_eq!(model.latent_dim(), 2);
        for (d, b) in model.dims.iter().zip(&beta) {
            assert!((d.intercept - b[0]).abs() < 1e-6, "{d:?}");
            assert!((d.beta_time - b[1]).abs() < 1e-6, "{d:?}");
            assert!((d.beta_status - b[2]).abs() < 1e-6, "{d:?}");
            assert!((d.beta_interaction - b[3]).abs() < 1e-6, "{d:?}");
            assert!(d.residual_var >= 0.0 && d.residual_var < 1e-8);
            assert!(d.random_intercept_var >= 0.0);
        }
    }

    #[test]
    fn recovers_variance_components_from_generated_data() {
        let beta = [0.2, -0.5, 0.08, 0.03];
        let sigma_b = 0.8;
        let sigma = 0.05;
        let mut rng = seeds::rng(11, "lme-gen", 0);
        let mut obs = Vec::new();
        for subject in 0..150 {
            let status = (subject % 3) as f64 * 2.5;
            let b: f64 = StandardNormal.sample(&mut rng);
            let b = b * sigma_b;
            for visit in 0..4 {
                let time = visit as f64 + rng.random::<f64>();
                let e: f64 = StandardNormal.sample(&mut rng);
                let y = beta[0] + beta[1] * time + beta[2] * status + beta[3] * status * time
                    + b
                    + e * sigma;
                obs.push(LatentObservation {
                    subject,
                    time,
                    status,
                    latent: vec![y],
                });
            }
        }
        let model = fit_lme(&obs).unwrap();
        let d = &model.dims[0];
        assert!((d.intercept - beta[0]).abs() < 0.2, "{d:?}");
        assert!((d.beta_time - beta[1]).abs() < 0.02, "{d:?}");
        assert!((d.beta_status - beta[2]).abs() < 0.08, "{d:?}");
        assert!((d.beta_interaction - beta[3]).abs() < 0.01, "{d:?}");
        let rel_b = (d.random_intercept_var - sigma_b * sigma_b).abs() / (sigma_b * sigma_b);
        let rel_e = (d.residual_var - sigma * sigma).abs() / (sigma * sigma);
        assert!(rel_b < 0.3, "random intercept variance off: {d:?}");
        assert!(rel_e < 0.3, "residual variance off: {d:?}");
    }

    #[test]
    fn rejects_unusable_inputs() {
        assert!(fit_lme(&[]).is_err());

        let single_scans: Vec<LatentObservation> = (0..5)
            .map(|s| LatentObservation {
                subject: s,
                time: 0.0,
                status: 0.0,
                latent: vec![s as f64],
            })
            .collect();
        let err = fit_lme(&single_scans).unwrap_err();
        assert!(err.to_string().contains("two or more scans"), "{err}");

        let mut mixed = exact_obs(&[[0.0, 1.0, 0.0, 0.0]]);
        mixed[3].latent = vec![1.0, 2.0];
        assert!(fit_lme(&mixed).is_err());

        let mut bad = exact_obs(&[[0.0, 1.0, 0.0, 0.0]]);
        bad[0].time = f64::NAN;
        assert!(fit_lme(&bad).is_err());
    }

    #[test]
    fn degenerate_designs_fit_with_consistent_predictions() {
        // constant status: time slope still recovered at the observed status
        let (a, b, status) = (0.7, -0.4, 2.0);
        let mut obs = Vec::new();
        for subject in 0..6 {
            for visit in 0..3 {
                let time = visit as f64;
                obs.push(LatentObservation {
                    subject,
                    time,
                    status,
                    latent: vec![a + b * time],
                });
            }
        }
        let model = fit_lme(&obs).unwrap();
        let d = &model.dims[0];
        let slope_at_status = d.beta_time + d.beta_interaction * status;
        assert!((slope_at_status - b).abs() < 1e-6, "{d:?}");

        // all times zero: fit succeeds, shift at the observed design is zero
        let flat: Vec<LatentObservation> = (0..6)
            .map(|s| LatentObservation {
                subject: s / 2,
                time: 0.0,
                status: (s % 2) as f64,
                latent: vec![s as f64 * 0.1],
            })
            .collect();
        assert!(fit_lme(&flat).is_ok());
    }

    #[test]
    fn shift_is_linear_in_delta_t() {
        let model = LmeModel {
            dims: vec![
                LmeDim {
                    intercept: 0.0,
                    beta_time: 0.5,
                    beta_status: 0.1,
                    beta_interaction: -0.2,
                    random_intercept_var: 0.3,
                    residual_var: 0.05,
                },
                LmeDim {
                    intercept: 1.0,
                    beta_time: -0.25,
                    beta_status: 0.0,
                    beta_interaction: 0.08,
                    random_intercept_var: 0.0,
                    residual_var: 0.02,
                },
            ],
        };
        let z = vec![0.3, -1.1];
        assert_eq!(model.shift(&z, 3.0, 0.0).unwrap(), z);
        let one = model.shift(&z, 3.0, 1.5).unwrap();
        let two = model.shift(&z, 3.0, 3.0).unwrap();
        for j in 0..2 {
            assert!(((two[j] - z[j]) - 2.0 * (one[j] - z[j])).abs() < 1e-12);
        }
        assert!(model.shift(&[0.0; 3], 0.0, 1.0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let beta = [[0.4, -0.8, 0.12, 0.05]];
        let model = fit_lme(&exact_obs(&beta)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lme.json");
        model.save(&path).unwrap();
        let loaded = LmeModel::load(&path).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn zero_horizon_prediction_is_plain_reconstruction() {
        use crate::baselines::vae::{VaeConfig, VaeModel};
        let vae = VaeModel::init(
            VaeConfig {
                latent_dim: 2,
                encoder_blocks: 1,
                channels: vec![4],
                groupnorm_groups: 4,
                image_size: 4,
                kl_weight: 1.0,
            },
            3,
        )
        .unwrap();
        let lme = LmeModel {
            dims: vec![
                LmeDim {
                    intercept: 0.0,
                    beta_time: 0.4,
                    beta_status: 0.0,
                    beta_interaction: 0.1,
                    random_intercept_var: 0.1,
                    residual_var: 0.01,
                };
                2
            ],
        };
        let mut rng = seeds::rng(5, "lmevol", 0);
        let data: Vec<f32> = (0..64)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                e as f32
            })
            .collect();
        let base = Volume::centered([4, 4, 4], 1.0, data).unwrap();
        let pred = predict_vae_lme(&vae, &lme, &base, 2.0, 0.0).unwrap();
        let g = vae.encode(&base).unwrap();
        let recon = vae.decode(&g.mean, &base).unwrap();
        assert_eq!(pred.data(), recon.data());

        let moved = predict_vae_lme(&vae, &lme, &base, 2.0, 1.0).unwrap();
        let diff: f64 = moved
            .data()
            .iter()
            .zip(pred.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum();
        assert!(diff > 0.0);
    }
}
