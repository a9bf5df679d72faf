//! Double-encoder conditional VAE for longitudinal volume prediction.
//!
//! The encoder consumes the stacked (base, target) pair plus the scalar
//! covariates and emits a diagonal Gaussian over the latent space; the
//! decoder is a U-net over the base image in which the latent sample and
//! the scalars are linearly embedded and added to every layer before its
//! nonlinearity. Training minimizes `recon + kl` where
//! `recon = 1/2 * sum (target - prediction)^2` (Gaussian likelihood with
//! fixed unit variance) and `kl` is the closed-form divergence from the
//! standard-normal prior.
//!
//! Everything is f64 with hand-derived backward passes; gradient
//! correctness is pinned by finite-difference tests per layer and for the
//! whole model.

pub(crate) mod block;
pub mod checkpoint;
pub(crate) mod layers;
pub(crate) mod params;
mod tensor;

use serde::{Deserialize, Serialize};

use crate::dataio::Volume;
use crate::error::{Error, Result};
use block::{UnitCache, unit_backward, unit_forward};
use params::Init;

pub use params::{Gradients, ModelParameters, check_finite};
pub use tensor::Tensor;

use layers::{
    global_conv, global_conv_backward, maxpool2, maxpool2_backward, upsample_nearest2,
    upsample_nearest2_backward,
};

/// Number of scalar covariates (age, elapsed time, status).
pub const SCALAR_CONDITIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub encoder_blocks: usize,
    /// Output channels of each encoder block (the decoder mirrors them).
    pub channels: Vec<usize>,
    pub groupnorm_groups: usize,
    /// Cubic input extent in voxels.
    pub image_size: usize,
    /// Scalar conditioning inputs; fixed to 3 (age, delta_t, status).
    pub conditioning_dim: usize,
    /// Weight on the KL term; 1 is the exact variational bound.
    pub kl_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 10,
            encoder_blocks: 4,
            channels: vec![4, 8, 16, 32],
            groupnorm_groups: 4,
            image_size: 80,
            conditioning_dim: SCALAR_CONDITIONS,
            kl_weight: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.encoder_blocks == 0 {
            return Err(Error::Config("encoder_blocks must be positive".into()));
        }
        if self.channels.len() != self.encoder_blocks {
            return Err(Error::Config(format!(
                "channels lists {} entries but encoder_blocks is {}",
                self.channels.len(),
                self.encoder_blocks
            )));
        }
        let divisor = 1usize << self.encoder_blocks;
        if self.image_size == 0 || self.image_size % divisor != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by 2^encoder_blocks = {divisor}",
                self.image_size
            )));
        }
        if self.groupnorm_groups == 0 {
            return Err(Error::Config("groupnorm_groups must be positive".into()));
        }
        for &c in &self.channels {
            if c == 0 || c % self.groupnorm_groups != 0 {
                return Err(Error::Config(format!(
                    "channel count {c} is not divisible by groupnorm_groups {}",
                    self.groupnorm_groups
                )));
            }
        }
        if self.conditioning_dim != SCALAR_CONDITIONS {
            return Err(Error::Config(format!(
                "conditioning_dim must be {SCALAR_CONDITIONS} (age, delta_t, status)"
            )));
        }
        if !(self.kl_weight >= 0.0) || !self.kl_weight.is_finite() {
            return Err(Error::Config("kl_weight must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Spatial extent before and after each pooling stage,
    /// e.g. [80, 40, 20, 10, 5] for image_size 80 with 4 blocks.
    pub fn spatial_trace(&self) -> Vec<usize> {
        (0..=self.encoder_blocks)
            .map(|l| self.image_size >> l)
            .collect()
    }

    fn bottom_extent(&self) -> usize {
        self.image_size >> self.encoder_blocks
    }

    /// Conditioning length seen by decoder embeddings: scalars plus latent.
    fn decoder_cond_len(&self) -> usize {
        self.conditioning_dim + self.latent_dim
    }
}

/// Scalar covariates as fed to the network: standardized age at the base
/// scan, standardized elapsed time to the target, and the raw 0-5 status.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningVector {
    pub age_std: f64,
    pub delta_t_std: f64,
    pub status: f64,
}

impl ConditioningVector {
    pub fn as_array(&self) -> [f64; SCALAR_CONDITIONS] {
        [self.age_std, self.delta_t_std, self.status]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.age_std.is_finite() && self.delta_t_std.is_finite() && self.status.is_finite()) {
            return Err(Error::Data("conditioning vector has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentGaussian {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.logvar.len() {
            return Err(Error::Shape(format!(
                "latent mean has {} entries but logvar has {}",
                self.mean.len(),
                self.logvar.len()
            )));
        }
        if !self
            .mean
            .iter()
            .chain(&self.logvar)
            .all(|v| v.is_finite())
        {
            return Err(Error::Numerics("latent Gaussian has non-finite entries".into()));
        }
        Ok(())
    }
}

/// `z = mu + exp(logvar / 2) * noise`, elementwise.
pub fn reparameterize(g: &LatentGaussian, noise: &[f64]) -> Vec<f64> {
    assert_eq!(g.mean.len(), noise.len(), "noise length mismatch");
    g.mean
        .iter()
        .zip(&g.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect()
}

/// `KL(q || N(0, I)) = 1/2 sum_j (mu_j^2 + exp(logvar_j) - 1 - logvar_j)`.
pub fn kl_divergence(g: &LatentGaussian) -> f64 {
    0.5 * g
        .mean
        .iter()
        .zip(&g.logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// `(total, recon, kl)` with `recon = 1/2 sum (target - predicted)^2` and
/// `total = recon + kl` (the negative variational bound up to constants).
pub fn elbo_loss(target: &Volume, predicted: &Volume, g: &LatentGaussian) -> (f64, f64, f64) {
    assert_eq!(target.shape, predicted.shape, "elbo shape mismatch");
    let recon = 0.5
        * target
            .data()
            .iter()
            .zip(predicted.data())
            .map(|(t, p)| {
                let d = *t as f64 - *p as f64;
                d * d
            })
            .sum::<f64>();
    let kl = kl_divergence(g);
    (recon + kl, recon, kl)
}

// ---------------------------------------------------------------------------
// the model

#[derive(Debug, Clone)]
pub struct CvaeModel {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

struct PoolCache {
    argmax: Vec<usize>,
    in_len: usize,
}

struct EncoderCache {
    units: Vec<UnitCache>,
    pools: Vec<PoolCache>,
    head_input: Vec<f64>,
}

struct UpStage {
    /// Dims of the feature map *before* this stage's 2x upsample.
    pre_up_dims: [usize; 3],
    pre_up_c: usize,
    conv1: UnitCache,
    /// Channels contributed by the skip connection (concatenated last).
    skip_c: usize,
    conv2: UnitCache,
}

struct DecoderCache {
    down_units: Vec<UnitCache>,
    pools: Vec<PoolCache>,
    bottleneck: UnitCache,
    ups: Vec<UpStage>, // in forward order: level B first, level 1 last
    out_input: Vec<f64>,
}

fn conv_spec(prefix: &str, c_in: usize, c_out: usize, cond_len: usize) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        (
            format!("{prefix}.weight"),
            vec![c_out, c_in, 3, 3, 3],
            Init::Kaiming { fan_in: c_in * 27 },
        ),
        (format!("{prefix}.bias"), vec![c_out], Init::Zero),
        (format!("{prefix}.norm.gamma"), vec![c_out], Init::One),
        (format!("{prefix}.norm.beta"), vec![c_out], Init::Zero),
        (
            format!("{prefix}.embed.weight"),
            vec![c_out, cond_len],
            Init::SmallNormal,
        ),
        (format!("{prefix}.embed.bias"), vec![c_out], Init::Zero),
    ]
}

impl CvaeModel {
    fn tensor_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
        let mut specs = Vec::new();
        let b = config.encoder_blocks;
        let ch = &config.channels;
        let enc_cond = config.conditioning_dim;
        let dec_cond = config.decoder_cond_len();

        let mut c_prev = 2; // stacked (base, target)
        for l in 1..=b {
            let c = ch[l - 1];
            specs.extend(conv_spec(&format!("encoder.block{l}.conv1"), c_prev, c, enc_cond));
            specs.extend(conv_spec(&format!("encoder.block{l}.conv2"), c, c, enc_cond));
            c_prev = c;
        }
        let bottom = config.bottom_extent();
        let head_in = ch[b - 1] * bottom * bottom * bottom;
        specs.push((
            "encoder.head.weight".into(),
            vec![2 * config.latent_dim, head_in],
            Init::Xavier { fan_in: head_in },
        ));
        specs.push((
            "encoder.head.bias".into(),
            vec![2 * config.latent_dim],
            Init::Zero,
        ));

        let mut c_prev = 1; // base image only
        for l in 1..=b {
            let c = ch[l - 1];
            specs.extend(conv_spec(&format!("decoder.down{l}.conv1"), c_prev, c, dec_cond));
            specs.extend(conv_spec(&format!("decoder.down{l}.conv2"), c, c, dec_cond));
            c_prev = c;
        }
        specs.extend(conv_spec(
            "decoder.bottleneck",
            ch[b - 1],
            ch[b - 1],
            dec_cond,
        ));
        for l in (1..=b).rev() {
            let c = ch[l - 1];
            let c_src = if l == b { ch[b - 1] } else { ch[l] };
            specs.extend(conv_spec(&format!("decoder.up{l}.conv1"), c_src, c, dec_cond));
            specs.extend(conv_spec(&format!("decoder.up{l}.conv2"), 2 * c, c, dec_cond));
        }
        specs.push((
            "decoder.out.weight".into(),
            vec![1, ch[0], 3, 3, 3],
            Init::Xavier { fan_in: ch[0] * 27 },
        ));
        specs.push(("decoder.out.bias".into(), vec![1], Init::Zero));
        specs
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = params::init_tensors(Self::tensor_specs(&config), seed);
        Ok(CvaeModel { config, params })
    }

    /// Check that `params` has exactly the tensors this config requires.
    pub fn check_layout(&self) -> Result<()> {
        let expected = Self::tensor_specs(&self.config);
        if expected.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model needs {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in &expected {
            match self.params.try_get(name) {
                None => return Err(Error::Data(format!("checkpoint is missing tensor {name}"))),
                Some(t) if &t.shape != shape => {
                    return Err(Error::Data(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn check_volume(&self, vol: &Volume, what: &str) -> Result<()> {
        let s = self.config.image_size;
        if vol.shape != [s, s, s] {
            return Err(Error::Shape(format!(
                "{what} volume has shape {:?}, model expects [{s}, {s}, {s}]",
                vol.shape
            )));
        }
        Ok(())
    }

    fn encode_internal(
        &self,
        base: &Volume,
        target: &Volume,
        cond: &[f64],
    ) -> (LatentGaussian, EncoderCache) {
        let s = self.config.image_size;
        let groups = self.config.groupnorm_groups;
        let mut h: Vec<f64> = base
            .data()
            .iter()
            .chain(target.data())
            .map(|v| *v as f64)
            .collect();
        let mut c = 2usize;
        let mut dims = [s, s, s];
        let mut units = Vec::new();
        let mut pools = Vec::new();
        for l in 1..=self.config.encoder_blocks {
            let c_out = self.config.channels[l - 1];
            let (h1, u1) = unit_forward(
                &self.params,
                &format!("encoder.block{l}.conv1"),
                h,
                c,
                dims,
                cond,
                groups,
            );
            let (h2, u2) = unit_forward(
                &self.params,
                &format!("encoder.block{l}.conv2"),
                h1,
                c_out,
                dims,
                cond,
                groups,
            );
            let in_len = h2.len();
            let (pooled, argmax) = maxpool2(&h2, c_out, dims);
            units.push(u1);
            units.push(u2);
            pools.push(PoolCache {
                argmax,

                in_len,
            });
            h = pooled;
            c = c_out;
            dims = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
        }
        let head_w = self.params.get("encoder.head.weight");
        let head_b = self.params.get("encoder.head.bias");
        let mut out = vec![0.0; 2 * self.config.latent_dim];
        global_conv(&h, &head_w.data, &head_b.data, &mut out);
        let d = self.config.latent_dim;
        let g = LatentGaussian {
            mean: out[..d].to_vec(),
            logvar: out[d..].to_vec(),
        };
        (
            g,
            EncoderCache {
                units,
                pools,
                head_input: h,
            },
        )
    }

    fn encoder_backward(
        &self,
        cache: &EncoderCache,
        d_mean: &[f64],
        d_logvar: &[f64],
        cond: &[f64],
        grads: &mut Gradients,
    ) {
        let groups = self.config.groupnorm_groups;
        let head_w = self.params.get("encoder.head.weight");
        let grad_head_out: Vec<f64> = d_mean.iter().chain(d_logvar).copied().collect();
        let mut grad_h = vec![0.0; cache.head_input.len()];
        let mut g_w = vec![0.0; head_w.len()];
        let mut g_b = vec![0.0; grad_head_out.len()];
        global_conv_backward(
            &grad_head_out,
            &cache.head_input,
            &head_w.data,
            &mut grad_h,
            &mut g_w,
            &mut g_b,
        );
        grads.accumulate("encoder.head.weight", &g_w);
        grads.accumulate("encoder.head.bias", &g_b);

        let mut scratch_cond = vec![0.0; cond.len()];
        for l in (1..=self.config.encoder_blocks).rev() {
            let pool = &cache.pools[l - 1];
            let mut grad_pre_pool = vec![0.0; pool.in_len];
            maxpool2_backward(&grad_h, &pool.argmax, &mut grad_pre_pool);
            let u2 = &cache.units[2 * (l - 1) + 1];
            let g1 = unit_backward(
                &self.params,
                &format!("encoder.block{l}.conv2"),
                u2,
                grad_pre_pool,
                cond,
                groups,
                grads,
                &mut scratch_cond,
            );
            let u1 = &cache.units[2 * (l - 1)];
            grad_h = unit_backward(
                &self.params,
                &format!("encoder.block{l}.conv1"),
                u1,
                g1,
                cond,
                groups,
                grads,
                &mut scratch_cond,
            );
        }
    }

    fn decode_internal(&self, base: &Volume, cond_full: &[f64]) -> (Vec<f64>, DecoderCache) {
        let s = self.config.image_size;
        let groups = self.config.groupnorm_groups;
        let b = self.config.encoder_blocks;
        debug_assert_eq!(cond_full.len(), self.config.decoder_cond_len());

        let mut h: Vec<f64> = base.data().iter().map(|v| *v as f64).collect();
        let mut c = 1usize;
        let mut dims = [s, s, s];
        let mut down_units = Vec::new();
        let mut pools = Vec::new();
        let mut skips: Vec<(Vec<f64>, usize, [usize; 3])> = Vec::new();
        for l in 1..=b {
            let c_out = self.config.channels[l - 1];
            let (h1, u1) = unit_forward(
                &self.params,
                &format!("decoder.down{l}.conv1"),
                h,
                c,
                dims,
                cond_full,
                groups,
            );
            let (h2, u2) = unit_forward(
                &self.params,
                &format!("decoder.down{l}.conv2"),
                h1,
                c_out,
                dims,
                cond_full,
                groups,
            );
            let in_len = h2.len();
            let (pooled, argmax) = maxpool2(&h2, c_out, dims);
            skips.push((h2, c_out, dims));
            down_units.push(u1);
            down_units.push(u2);
            pools.push(PoolCache {
                argmax,

                in_len,
            });
            h = pooled;
            c = c_out;
            dims = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
        }

        let (hb, bottleneck) = unit_forward(
            &self.params,
            "decoder.bottleneck",
            h,
            c,
            dims,
            cond_full,
            groups,
        );
        h = hb;

        let mut ups = Vec::new();
        for l in (1..=b).rev() {
            let c_out = self.config.channels[l - 1];
            let pre_up_dims = dims;
            let pre_up_c = c;
            let up = upsample_nearest2(&h, c, dims);
            dims = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
            let (h1, conv1) = unit_forward(
                &self.params,
                &format!("decoder.up{l}.conv1"),
                up,
                c,
                dims,
                cond_full,
                groups,
            );
            let (skip, skip_c, skip_dims) = skips.pop().expect("skip per level");
            debug_assert_eq!(skip_dims, dims);
            debug_assert_eq!(skip_c, c_out);
            let mut cat = h1;
            cat.extend_from_slice(&skip);
            let (h2, conv2) = unit_forward(
                &self.params,
                &format!("decoder.up{l}.conv2"),
                cat,
                2 * c_out,
                dims,
                cond_full,
                groups,
            );
            ups.push(UpStage {
                pre_up_dims,
                pre_up_c,
                conv1,
                skip_c,
                conv2,
            });
            h = h2;
            c = c_out;
        }

        let out_w = self.params.get("decoder.out.weight");
        let out_b = self.params.get("decoder.out.bias");
        let vol = dims.iter().product::<usize>();
        let mut pred = vec![0.0; vol];
        layers::conv3(&h, c, dims, &out_w.data, &out_b.data, 1, &mut pred);
        (
            pred,
            DecoderCache {
                down_units,
                pools,
                bottleneck,
                ups,
                out_input: h,
            },
        )
    }

    /// Backward through the decoder; accumulates into `grads` and
    /// `grad_cond_full`, discards the gradient w.r.t. the base image.
    fn decoder_backward(
        &self,
        cache: &DecoderCache,
        grad_pred: &[f64],
        cond_full: &[f64],
        grads: &mut Gradients,
        grad_cond_full: &mut [f64],
    ) {
        let groups = self.config.groupnorm_groups;
        let b = self.config.encoder_blocks;
        let s = self.config.image_size;
        let out_w = self.params.get("decoder.out.weight");
        let c1 = self.config.channels[0];

        let mut g_w = vec![0.0; out_w.len()];
        let mut g_b = vec![0.0; 1];
        let mut grad_h = vec![0.0; cache.out_input.len()];
        layers::conv3_backward(
            grad_pred,
            &cache.out_input,
            c1,
            [s, s, s],
            &out_w.data,
            1,
            &mut grad_h,
            &mut g_w,
            &mut g_b,
        );
        grads.accumulate("decoder.out.weight", &g_w);
        grads.accumulate("decoder.out.bias", &g_b);

        // up stages in reverse forward order: level 1 first
        let mut skip_grads: Vec<Option<Vec<f64>>> = vec![None; b + 1];
        for (idx, stage) in cache.ups.iter().enumerate().rev() {
            let l = b - idx; // ups[0] is level B
            let g2 = unit_backward(
                &self.params,
                &format!("decoder.up{l}.conv2"),
                &stage.conv2,
                grad_h,
                cond_full,
                groups,
                grads,
                grad_cond_full,
            );
            // split the concat: conv1 output first, then the skip
            let c_out = self.config.channels[l - 1];
            let vol = stage.conv2.dims.iter().product::<usize>();
            debug_assert_eq!(g2.len(), (c_out + stage.skip_c) * vol);
            let (g_h1, g_skip) = g2.split_at(c_out * vol);
            skip_grads[l] = Some(g_skip.to_vec());
            let g_up = unit_backward(
                &self.params,
                &format!("decoder.up{l}.conv1"),
                &stage.conv1,
                g_h1.to_vec(),
                cond_full,
                groups,
                grads,
                grad_cond_full,
            );
            let mut g_pre_up = vec![0.0; stage.pre_up_c * stage.pre_up_dims.iter().product::<usize>()];
            upsample_nearest2_backward(&g_up, stage.pre_up_c, stage.pre_up_dims, &mut g_pre_up);
            grad_h = g_pre_up;
        }

        grad_h = unit_backward(
            &self.params,
            "decoder.bottleneck",
            &cache.bottleneck,
            grad_h,
            cond_full,
            groups,
            grads,
            grad_cond_full,
        );

        for l in (1..=b).rev() {
            let pool = &cache.pools[l - 1];
            let mut grad_pre_pool = vec![0.0; pool.in_len];
            maxpool2_backward(&grad_h, &pool.argmax, &mut grad_pre_pool);
            if let Some(sg) = &skip_grads[l] {
                for (g, s) in grad_pre_pool.iter_mut().zip(sg) {
                    *g += *s;
                }
            }
            let u2 = &cache.down_units[2 * (l - 1) + 1];
            let g1 = unit_backward(
                &self.params,
                &format!("decoder.down{l}.conv2"),
                u2,
                grad_pre_pool,
                cond_full,
                groups,
                grads,
                grad_cond_full,
            );
            let u1 = &cache.down_units[2 * (l - 1)];
            grad_h = unit_backward(
                &self.params,
                &format!("decoder.down{l}.conv1"),
                u1,
                g1,
                cond_full,
                groups,
                grads,
                grad_cond_full,
            );
        }
    }

    /// Posterior over the latent space for a (base, target, covariate) pair.
    pub fn encode(
        &self,
        base: &Volume,
        target: &Volume,
        cond: &ConditioningVector,
    ) -> Result<LatentGaussian> {
        self.check_volume(base, "base")?;
        self.check_volume(target, "target")?;
        cond.validate()?;
        let (g, _) = self.encode_internal(base, target, &cond.as_array());
        Ok(g)
    }

    /// Predicted mean volume for a base image, latent sample, and covariates.
    pub fn decode(&self, base: &Volume, z: &[f64], cond: &ConditioningVector) -> Result<Volume> {
        self.check_volume(base, "base")?;
        cond.validate()?;
        if z.len() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent sample has length {}, model expects {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let cond_full: Vec<f64> = cond.as_array().iter().copied().chain(z.iter().copied()).collect();
        let (pred, _) = self.decode_internal(base, &cond_full);
        let data: Vec<f32> = pred.iter().map(|v| *v as f32).collect();
        Volume::new(base.shape, base.voxel_size, base.grid_to_world, data)
    }

    /// One training sample's loss and parameter gradients (accumulated into
    /// `grads`). `noise` is the reparameterization draw; gradients flow
    /// through `z = mu + exp(logvar/2) * noise` back into the encoder.
    pub fn loss_and_gradients(
        &self,
        base: &Volume,
        target: &Volume,
        cond: &ConditioningVector,
        noise: &[f64],
        grads: &mut Gradients,
    ) -> Result<(f64, f64, f64)> {
        self.check_volume(base, "base")?;
        self.check_volume(target, "target")?;
        cond.validate()?;
        if noise.len() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "noise has length {}, model expects {}",
                noise.len(),
                self.config.latent_dim
            )));
        }
        let cond3 = cond.as_array();
        let (g, enc_cache) = self.encode_internal(base, target, &cond3);
        let z = reparameterize(&g, noise);
        let cond_full: Vec<f64> = cond3.iter().copied().chain(z.iter().copied()).collect();
        let (pred, dec_cache) = self.decode_internal(base, &cond_full);

        let kw = self.config.kl_weight;
        let mut recon = 0.0;
        let mut grad_pred = vec![0.0; pred.len()];
        for (i, (p, t)) in pred.iter().zip(target.data()).enumerate() {
            let d = p - *t as f64;
            recon += d * d;
            grad_pred[i] = d;
        }
        recon *= 0.5;
        let kl = kl_divergence(&g);
        let total = recon + kw * kl;

        let mut grad_cond_full = vec![0.0; cond_full.len()];
        self.decoder_backward(&dec_cache, &grad_pred, &cond_full, grads, &mut grad_cond_full);

        let d_z = &grad_cond_full[SCALAR_CONDITIONS..];
        let d = self.config.latent_dim;
        let mut d_mean = vec![0.0; d];
        let mut d_logvar = vec![0.0; d];
        for j in 0..d {
            d_mean[j] = d_z[j] + kw * g.mean[j];
            d_logvar[j] = d_z[j] * 0.5 * (g.logvar[j] / 2.0).exp() * noise[j]
                + kw * 0.5 * (g.logvar[j].exp() - 1.0);
        }
        self.encoder_backward(&enc_cache, &d_mean, &d_logvar, &cond3, grads);
        Ok((total, recon, kl))
    }

    /// Loss with the deterministic latent `z = mu` (validation convention).
    pub fn validation_loss(
        &self,
        base: &Volume,
        target: &Volume,
        cond: &ConditioningVector,
    ) -> Result<(f64, f64, f64)> {
        self.check_volume(base, "base")?;
        self.check_volume(target, "target")?;
        cond.validate()?;
        let cond3 = cond.as_array();
        let (g, _) = self.encode_internal(base, target, &cond3);
        let cond_full: Vec<f64> = cond3
            .iter()
            .copied()
            .chain(g.mean.iter().copied())
            .collect();
        let (pred, _) = self.decode_internal(base, &cond_full);
        let recon = 0.5
            * pred
                .iter()
                .zip(target.data())
                .map(|(p, t)| {
                    let d = p - *t as f64;
                    d * d
                })
                .sum::<f64>();
        let kl = kl_divergence(&g);
        Ok((recon + self.config.kl_weight * kl, recon, kl))
    }
}
