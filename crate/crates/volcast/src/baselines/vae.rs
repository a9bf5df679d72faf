//! Plain (unconditional) VAE over single volumes. Backbone for the
//! latent-shift baseline: scans are encoded to latent means, a linear
//! mixed-effects model describes how those means move with time and
//! status, and predictions decode the shifted latents.
//!
//! Reuses the conv/norm/pool primitives of the conditional model with an
//! empty conditioning vector; the decoder has no skip connections (the
//! latent alone must carry the image) and starts from a learned linear
//! expansion of z.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::cvae::block::{UnitCache, unit_backward, unit_forward};
use crate::cvae::layers::{
    self, global_conv, global_conv_backward, maxpool2, maxpool2_backward, upsample_nearest2,
    upsample_nearest2_backward,
};
use crate::cvae::params::{Init, init_tensors};
use crate::cvae::{
    Gradients, LatentGaussian, ModelParameters, checkpoint, check_finite, kl_divergence,
    reparameterize,
};
use crate::dataio::Volume;
use crate::error::{Error, Result};
use crate::seeds;
use crate::trainer::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub encoder_blocks: usize,
    pub channels: Vec<usize>,
    pub groupnorm_groups: usize,
    pub image_size: usize,
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 10,
            encoder_blocks: 4,
            channels: vec![4, 8, 16, 32],
            groupnorm_groups: 4,
            image_size: 32,
            kl_weight: 1.0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.encoder_blocks == 0 || self.channels.len() != self.encoder_blocks {
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
        if self.groupnorm_groups == 0
            || self
                .channels
                .iter()
                .any(|c| *c == 0 || c % self.groupnorm_groups != 0)
        {
            return Err(Error::Config(
                "channels must be positive and divisible by groupnorm_groups".into(),
            ));
        }
        if !self.kl_weight.is_finite() || self.kl_weight < 0.0 {
            return Err(Error::Config("kl_weight must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn bottom_extent(&self) -> usize {
        self.image_size >> self.encoder_blocks
    }
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub params: ModelParameters,
}

struct EncCache {
    units: Vec<UnitCache>,
    pools: Vec<(Vec<usize>, usize)>, // (argmax, pre-pool length)
    head_input: Vec<f64>,
}

struct DecCache {
    z: Vec<f64>,
    expand_out_len: usize,
    // per up stage in forward order: (pre-up dims, pre-up channels, conv1, conv2)
    ups: Vec<([usize; 3], usize, UnitCache, UnitCache)>,
    out_input: Vec<f64>,
}

fn conv_spec(prefix: &str, c_in: usize, c_out: usize) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        (
            format!("{prefix}.weight"),
            vec![c_out, c_in, 3, 3, 3],
            Init::Kaiming { fan_in: c_in * 27 },
        ),
        (format!("{prefix}.bias"), vec![c_out], Init::Zero),
        (format!("{prefix}.norm.gamma"), vec![c_out], Init::One),
        (format!("{prefix}.norm.beta"), vec![c_out], Init::Zero),
        // zero-width embedding keeps the shared unit layout with no
        // conditioning inputs; its bias doubles the conv bias harmlessly
        (format!("{prefix}.embed.weight"), vec![c_out, 0], Init::Zero),
        (format!("{prefix}.embed.bias"), vec![c_out], Init::Zero),
    ]
}

impl VaeModel {
    fn tensor_specs(config: &VaeConfig) -> Vec<(String, Vec<usize>, Init)> {
        let mut specs = Vec::new();
        let b = config.encoder_blocks;
        let ch = &config.channels;
        let mut c_prev = 1usize;
        for l in 1..=b {
            let c = ch[l - 1];
            specs.extend(conv_spec(&format!("encoder.block{l}.conv1"), c_prev, c));
            specs.extend(conv_spec(&format!("encoder.block{l}.conv2"), c, c));
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
        specs.push((
            "decoder.expand.weight".into(),
            vec![head_in, config.latent_dim],
            Init::Xavier {
                fan_in: config.latent_dim,
            },
        ));
        specs.push(("decoder.expand.bias".into(), vec![head_in], Init::Zero));
        for l in (1..=b).rev() {
            let c = ch[l - 1];
            let c_src = if l == b { ch[b - 1] } else { ch[l] };
            specs.extend(conv_spec(&format!("decoder.up{l}.conv1"), c_src, c));
            specs.extend(conv_spec(&format!("decoder.up{l}.conv2"), c, c));
        }
        specs.push((
            "decoder.out.weight".into(),
            vec![1, ch[0], 3, 3, 3],
            Init::Xavier { fan_in: ch[0] * 27 },
        ));
        specs.push(("decoder.out.bias".into(), vec![1], Init::Zero));
        specs
    }

    pub fn init(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_tensors(Self::tensor_specs(&config), seed);
        Ok(VaeModel { config, params })
    }

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

    fn check_volume(&self, vol: &Volume) -> Result<()> {
        let s = self.config.image_size;
        if vol.shape != [s, s, s] {
            return Err(Error::Shape(format!(
                "volume has shape {:?}, model expects [{s}, {s}, {s}]",
                vol.shape
            )));
        }
        Ok(())
    }

    fn encode_internal(&self, vol: &Volume) -> (LatentGaussian, EncCache) {
        let s = self.config.image_size;
        let groups = self.config.groupnorm_groups;
        let mut h: Vec<f64> = vol.data().iter().map(|v| *v as f64).collect();
        let mut c = 1usize;
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
                &[],
                groups,
            );
            let (h2, u2) = unit_forward(
                &self.params,
                &format!("encoder.block{l}.conv2"),
                h1,
                c_out,
                dims,
                &[],
                groups,
            );
            let in_len = h2.len();
            let (pooled, argmax) = maxpool2(&h2, c_out, dims);
            units.push(u1);
            units.push(u2);
            pools.push((argmax, in_len));
            h = pooled;
            c = c_out;
            dims = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
        }
        let head_w = self.params.get("encoder.head.weight");
        let head_b = self.params.get("encoder.head.bias");
        let mut out = vec![0.0; 2 * self.config.latent_dim];
        global_conv(&h, &head_w.data, &head_b.data, &mut out);
        let d = self.config.latent_dim;
        (
            LatentGaussian {
                mean: out[..d].to_vec(),
                logvar: out[d..].to_vec(),
            },
            EncCache {
                units,
                pools,
                head_input: h,
            },
        )
    }

    fn encoder_backward(
        &self,
        cache: &EncCache,
        d_mean: &[f64],
        d_logvar: &[f64],
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
        for l in (1..=self.config.encoder_blocks).rev() {
            let (argmax, in_len) = &cache.pools[l - 1];
            let mut grad_pre_pool = vec![0.0; *in_len];
            maxpool2_backward(&grad_h, argmax, &mut grad_pre_pool);
            let g1 = unit_backward(
                &self.params,
                &format!("encoder.block{l}.conv2"),
                &cache.units[2 * (l - 1) + 1],
                grad_pre_pool,
                &[],
                groups,
                grads,
                &mut [],
            );
            grad_h = unit_backward(
                &self.params,
                &format!("encoder.block{l}.conv1"),
                &cache.units[2 * (l - 1)],
                g1,
                &[],
                groups,
                grads,
                &mut [],
            );
        }
    }

    fn decode_internal(&self, z: &[f64]) -> (Vec<f64>, DecCache) {
        let groups = self.config.groupnorm_groups;
        let b = self.config.encoder_blocks;
        let bottom = self.config.bottom_extent();
        let exp_w = self.params.get("decoder.expand.weight");
        let exp_b = self.params.get("decoder.expand.bias");
        let mut h = vec![0.0; exp_b.len()];
        global_conv(z, &exp_w.data, &exp_b.data, &mut h);
        let expand_out_len = h.len();

        let mut dims = [bottom, bottom, bottom];
        let mut c = self.config.channels[b - 1];
        let mut ups = Vec::new();
        for l in (1..=b).rev() {
            let c_out = self.config.channels[l - 1];
            let pre_dims = dims;
            let pre_c = c;
            let up = upsample_nearest2(&h, c, dims);
            dims = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
            let (h1, conv1) = unit_forward(
                &self.params,
                &format!("decoder.up{l}.conv1"),
                up,
                c,
                dims,
                &[],
                groups,
            );
            let (h2, conv2) = unit_forward(
                &self.params,
                &format!("decoder.up{l}.conv2"),
                h1,
                c_out,
                dims,
                &[],
                groups,
            );
            ups.push((pre_dims, pre_c, conv1, conv2));
            h = h2;
            c = c_out;
        }
        let out_w = self.params.get("decoder.out.weight");
        let out_b = self.params.get("decoder.out.bias");
        let vol: usize = dims.iter().product();
        let mut pred = vec![0.0; vol];
        layers::conv3(&h, c, dims, &out_w.data, &out_b.data, 1, &mut pred);
        (
            pred,
            DecCache {
                z: z.to_vec(),
                expand_out_len,
                ups,
                out_input: h,
            },
        )
    }

    /// Backward through the decoder; returns the gradient w.r.t. z.
    fn decoder_backward(
        &self,
        cache: &DecCache,
        grad_pred: &[f64],
        grads: &mut Gradients,
    ) -> Vec<f64> {
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

        for (idx, (pre_dims, pre_c, conv1, conv2)) in cache.ups.iter().enumerate().rev() {
            let l = b - idx;
            let g1 = unit_backward(
                &self.params,
                &format!("decoder.up{l}.conv2"),
                conv2,
                grad_h,
                &[],
                groups,
                grads,
                &mut [],
            );
            let g_up = unit_backward(
                &self.params,
                &format!("decoder.up{l}.conv1"),
                conv1,
                g1,
                &[],
                groups,
                grads,
                &mut [],
            );
            let mut g_pre = vec![0.0; pre_c * pre_dims.iter().product::<usize>()];
            upsample_nearest2_backward(&g_up, *pre_c, *pre_dims, &mut g_pre);
            grad_h = g_pre;
        }

        debug_assert_eq!(grad_h.len(), cache.expand_out_len);
        let exp_w = self.params.get("decoder.expand.weight");
        let mut grad_z = vec![0.0; self.config.latent_dim];
        let mut g_ew = vec![0.0; exp_w.len()];
        let mut g_eb = vec![0.0; cache.expand_out_len];
        global_conv_backward(&grad_h, &cache.z, &exp_w.data, &mut grad_z, &mut g_ew, &mut g_eb);
        grads.accumulate("decoder.expand.weight", &g_ew);
        grads.accumulate("decoder.expand.bias", &g_eb);
        grad_z
    }

    pub fn encode(&self, vol: &Volume) -> Result<LatentGaussian> {
        self.check_volume(vol)?;
        let (g, _) = self.encode_internal(vol);
        Ok(g)
    }

    pub fn decode(&self, z: &[f64], like: &Volume) -> Result<Volume> {
        self.check_volume(like)?;
        if z.len() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent vector has length {}, model expects {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let (pred, _) = self.decode_internal(z);
        let data: Vec<f32> = pred.iter().map(|v| *v as f32).collect();
        Volume::new(like.shape, like.voxel_size, like.grid_to_world, data)
    }

    pub fn loss_and_gradients(
        &self,
        vol: &Volume,
        noise: &[f64],
        grads: &mut Gradients,
    ) -> Result<(f64, f64, f64)> {
        self.check_volume(vol)?;
        if noise.len() != self.config.latent_dim {
            return Err(Error::Shape("noise length mismatch".into()));
        }
        let (g, enc_cache) = self.encode_internal(vol);
        let z = reparameterize(&g, noise);
        let (pred, dec_cache) = self.decode_internal(&z);

        let kw = self.config.kl_weight;
        let mut recon = 0.0;
        let mut grad_pred = vec![0.0; pred.len()];
        for (i, (p, t)) in pred.iter().zip(vol.data()).enumerate() {
            let d = p - *t as f64;
            recon += d * d;
            grad_pred[i] = d;
        }
        recon *= 0.5;
        let kl = kl_divergence(&g);
        let total = recon + kw * kl;

        let d_z = self.decoder_backward(&dec_cache, &grad_pred, grads);
        let d = self.config.latent_dim;
        let mut d_mean = vec![0.0; d];
        let mut d_logvar = vec![0.0; d];
        for j in 0..d {
            d_mean[j] = d_z[j] + kw * g.mean[j];
            d_logvar[j] = d_z[j] * 0.5 * (g.logvar[j] / 2.0).exp() * noise[j]
                + kw * 0.5 * (g.logvar[j].exp() - 1.0);
        }
        self.encoder_backward(&enc_cache, &d_mean, &d_logvar, grads);
        Ok((total, recon, kl))
    }

    pub fn validation_loss(&self, vol: &Volume) -> Result<(f64, f64, f64)> {
        self.check_volume(vol)?;
        let (g, _) = self.encode_internal(vol);
        let (pred, _) = self.decode_internal(&g.mean);
        let recon = 0.5
            * pred
                .iter()
                .zip(vol.data())
                .map(|(p, t)| {
                    let d = p - *t as f64;
                    d * d
                })
                .sum::<f64>();
        let kl = kl_divergence(&g);
        Ok((recon + self.config.kl_weight * kl, recon, kl))
    }

    pub fn save(&self, meta: &BTreeMap<String, serde_json::Value>, path: &Path) -> Result<()> {
        let mut config = serde_json::to_value(&self.config)
            .map_err(|e| Error::Data(format!("encode VAE config: {e}")))?;
        config
            .as_object_mut()
            .expect("config is an object")
            .insert("kind".into(), serde_json::json!("vae-model"));
        checkpoint::save_tensors(&config, &self.params, meta, path)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, serde_json::Value>)> {
        let (mut config_json, params, meta) = checkpoint::load_tensors(path)?;
        let obj = config_json
            .as_object_mut()
            .ok_or_else(|| Error::Data("VAE checkpoint config is not an object".into()))?;
        if obj.remove("kind").and_then(|v| v.as_str().map(String::from)) != Some("vae-model".into())
        {
            return Err(Error::Data(format!(
                "{} is not a VAE baseline checkpoint",
                path.display()
            )));
        }
        let config: VaeConfig = serde_json::from_value(config_json)
            .map_err(|e| Error::Data(format!("decode VAE config: {e}")))?;
        config.validate()?;
        let model = VaeModel { config, params };
        model.check_layout()?;
        Ok((model, meta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            max_epochs: 60,
            patience: 10,
            seed: 0,
        }
    }
}

/// Train a plain VAE to reconstruct `train` volumes; early stops on mean
/// validation loss with `z = mu`. Returns the best-validation model and
/// the per-epoch (train, val) mean totals.
pub fn train_vae(
    config: &VaeConfig,
    train: &[Volume],
    val: &[Volume],
    cfg: &VaeTrainConfig,
) -> Result<(VaeModel, Vec<(f64, f64)>)> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("VAE training needs non-empty train and val sets".into()));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 || cfg.patience == 0 {
        return Err(Error::Config("invalid VAE training configuration".into()));
    }
    let mut model = VaeModel::init(config.clone(), seeds::derive(cfg.seed, "vae-init", 0))?;
    let mut adam = Adam::for_params(&model.params);
    let mut grads = Gradients::zeros_like(&model.params);
    let d_z = config.latent_dim;

    let mut history = Vec::new();
    let mut best: Option<(f64, ModelParameters)> = None;
    let mut bad = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = seeds::rng(cfg.seed, "vae-shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut noise_rng = seeds::rng(cfg.seed, "vae-noise", epoch as u64);

        let mut train_acc = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            let mut batch_total = 0.0;
            for &i in batch {
                let noise: Vec<f64> = (0..d_z)
                    .map(|_| rand_distr::StandardNormal.sample(&mut noise_rng))
                    .collect();
                let (t, _, _) = model.loss_and_gradients(&train[i], &noise, &mut grads)?;
                batch_total += t;
            }
            if !batch_total.is_finite() || !grads.is_finite() {
                return Err(Error::Numerics(format!(
                    "non-finite VAE loss at epoch {epoch}"
                )));
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.params, &grads, cfg.learning_rate);
            train_acc += batch_total;
        }

        let mut val_acc = 0.0;
        for v in val {
            val_acc += model.validation_loss(v)?.0;
        }
        let val_mean = val_acc / val.len() as f64;
        history.push((train_acc / train.len() as f64, val_mean));

        if best.as_ref().is_none_or(|(b, _)| val_mean < *b) {
            best = Some((val_mean, model.params.clone()));
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    check_finite(&best_params)?;
    Ok((
        VaeModel {
            config: config.clone(),
            params: best_params,
        },
        history,
    ))
}
