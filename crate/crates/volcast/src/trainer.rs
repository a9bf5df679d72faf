//! Adam training loop for the conditional VAE: seeded shuffling and noise,
//! per-epoch validation with `z = mu`, early stopping on validation loss,
//! periodic resumable state checkpoints, and a CSV log.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::cvae::{
    self, ConditioningVector, CvaeModel, Gradients, ModelConfig, checkpoint,
};
use crate::dataio::Volume;
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Save a resumable state checkpoint every this many epochs.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 4,
            max_epochs: 1000,
            patience: 25,
            seed: 0,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        // max_epochs == 0 is allowed as a degenerate "return the init" run
        if self.max_epochs > 0 && self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be smaller than max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// One training sample: indices into the dataset's volume store plus the
/// standardized covariates.
#[derive(Debug, Clone, Copy)]
pub struct PairSample {
    pub base: usize,
    pub target: usize,
    pub cond: ConditioningVector,
}

/// In-memory training set. Volumes are stored once and shared by index so
/// the n-squared pair expansion does not duplicate image data.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    volumes: Vec<Volume>,
    samples: Vec<PairSample>,
}

impl Dataset {
    pub fn new() -> Self {
        Dataset::default()
    }

    pub fn add_volume(&mut self, v: Volume) -> usize {
        self.volumes.push(v);
        self.volumes.len() - 1
    }

    pub fn add_sample(&mut self, base: usize, target: usize, cond: ConditioningVector) -> Result<()> {
        if base >= self.volumes.len() || target >= self.volumes.len() {
            return Err(Error::Data(format!(
                "sample references volume {}/{} but only {} are stored",
                base,
                target,
                self.volumes.len()
            )));
        }
        cond.validate()?;
        self.samples.push(PairSample { base, target, cond });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> (&Volume, &Volume, ConditioningVector) {
        let s = &self.samples[i];
        (&self.volumes[s.base], &self.volumes[s.target], s.cond)
    }

    pub fn samples(&self) -> &[PairSample] {
        &self.samples
    }

    pub fn volume(&self, i: usize) -> &Volume {
        &self.volumes[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_total: f64,
    pub train_recon: f64,
    pub train_kl: f64,
    pub val_total: f64,
    pub val_recon: f64,
    pub val_kl: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        w.write_record([
            "epoch",
            "train_total",
            "train_recon",
            "train_kl",
            "val_total",
            "val_recon",
            "val_kl",
            "wall_secs",
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.train_total.to_string(),
                r.train_recon.to_string(),
                r.train_kl.to_string(),
                r.val_total.to_string(),
                r.val_recon.to_string(),
                r.val_kl.to_string(),
                r.wall_secs.to_string(),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }
}

/// Mean per-pair metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Deterministic validation: decodes with `z = mu`, averages per-pair
/// losses.
pub fn validate(model: &CvaeModel, pairs: &Dataset) -> Result<ValidationMetrics> {
    if pairs.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut acc = [0.0f64; 3];
    for i in 0..pairs.len() {
        let (base, target, cond) = pairs.sample(i);
        let (t, r, k) = model.validation_loss(base, target, &cond)?;
        acc[0] += t;
        acc[1] += r;
        acc[2] += k;
    }
    let n = pairs.len() as f64;
    Ok(ValidationMetrics {
        total: acc[0] / n,
        recon: acc[1] / n,
        kl: acc[2] / n,
    })
}

pub(crate) struct Adam {
    m: Gradients,
    v: Gradients,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub(crate) fn for_params(params: &cvae::ModelParameters) -> Self {
        Adam {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
        }
    }

    fn new(model: &CvaeModel) -> Self {
        Adam::for_params(&model.params)
    }

    pub(crate) fn step(&mut self, params: &mut cvae::ModelParameters, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, tensor) in params.iter_mut() {
            let g = grads.get(name);
            let m = self.m.get_mut(name);
            let v = self.v.get_mut(name);
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                tensor.data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub model: CvaeModel,
    pub log: TrainLog,
    pub best_val: ValidationMetrics,
    pub stopped_early: bool,
    pub best_checkpoint: PathBuf,
}

struct BestSnapshot {
    params: cvae::ModelParameters,
    epoch: usize,
    val_total: f64,
}

struct TrainState {
    model: CvaeModel,
    adam: Adam,
    epochs_done: usize,
    best: Option<BestSnapshot>,
    bad_epochs: usize,
    log: TrainLog,
}

fn state_meta(st: &TrainState) -> BTreeMap<String, serde_json::Value> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), serde_json::json!("trainer-state"));
    meta.insert("epochs_done".into(), serde_json::json!(st.epochs_done));
    meta.insert("adam_t".into(), serde_json::json!(st.adam.t));
    meta.insert(
        "best_val".into(),
        serde_json::json!(st.best.as_ref().map(|b| b.val_total)),
    );
    meta.insert(
        "best_epoch".into(),
        serde_json::json!(st.best.as_ref().map(|b| b.epoch)),
    );
    meta.insert("bad_epochs".into(), serde_json::json!(st.bad_epochs));
    meta.insert(
        "log".into(),
        serde_json::to_value(&st.log).unwrap_or(serde_json::Value::Null),
    );
    meta
}

fn save_state(st: &TrainState, path: &Path) -> Result<()> {
    let mut store = cvae::ModelParameters::empty();
    for (name, t) in st.model.params.iter() {
        store.insert(&format!("model.{name}"), t.clone());
    }
    for (name, buf) in st.adam.m.iter() {
        let shape = st.model.params.get(name).shape.clone();
        store.insert(
            &format!("adam_m.{name}"),
            cvae::Tensor::from_vec(&shape, buf.clone()),
        );
    }
    for (name, buf) in st.adam.v.iter() {
        let shape = st.model.params.get(name).shape.clone();
        store.insert(
            &format!("adam_v.{name}"),
            cvae::Tensor::from_vec(&shape, buf.clone()),
        );
    }
    if let Some(best) = &st.best {
        for (name, t) in best.params.iter() {
            store.insert(&format!("best.{name}"), t.clone());
        }
    }
    let config = serde_json::to_value(&st.model.config)
        .map_err(|e| Error::Data(format!("encode model config: {e}")))?;
    checkpoint::save_tensors(&config, &store, &state_meta(st), path)
}

fn load_state(path: &Path) -> Result<TrainState> {
    let (config_json, store, meta) = checkpoint::load_tensors(path)?;
    let config: ModelConfig = serde_json::from_value(config_json)
        .map_err(|e| Error::Data(format!("decode model config: {e}")))?;
    config.validate()?;
    if meta.get("kind").and_then(|v| v.as_str()) != Some("trainer-state") {
        return Err(Error::Data(format!(
            "{} is not a trainer state checkpoint",
            path.display()
        )));
    }
    let mut params = cvae::ModelParameters::empty();
    let mut best_params = cvae::ModelParameters::empty();
    for (name, t) in store.iter() {
        if let Some(base) = name.strip_prefix("model.") {
            params.insert(base, t.clone());
        } else if let Some(base) = name.strip_prefix("best.") {
            best_params.insert(base, t.clone());
        }
    }
    let model = CvaeModel { config, params };
    model.check_layout()?;
    let mut adam = Adam::new(&model);
    for (name, t) in store.iter() {
        if let Some(base) = name.strip_prefix("adam_m.") {
            adam.m.get_mut(base).copy_from_slice(&t.data);
        } else if let Some(base) = name.strip_prefix("adam_v.") {
            adam.v.get_mut(base).copy_from_slice(&t.data);
        }
    }
    let get_usize = |key: &str| meta.get(key).and_then(|v| v.as_u64()).map(|v| v as usize);
    adam.t = meta
        .get("adam_t")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Data("trainer state is missing adam_t".into()))?;
    let epochs_done = get_usize("epochs_done")
        .ok_or_else(|| Error::Data("trainer state is missing epochs_done".into()))?;
    let best_val = meta.get("best_val").and_then(|v| v.as_f64());
    let best_epoch = get_usize("best_epoch");
    let best = match (best_val, best_epoch) {
        (Some(val_total), Some(epoch)) => {
            if !best_params.same_layout(&model.params) {
                return Err(Error::Data(
                    "trainer state best-model tensors are missing or malformed".into(),
                ));
            }
            Some(BestSnapshot {
                params: best_params,
                epoch,
                val_total,
            })
        }
        _ => None,
    };
    let bad_epochs = get_usize("bad_epochs").unwrap_or(0);
    let log: TrainLog = meta
        .get("log")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::Data(format!("trainer state log: {e}")))?
        .unwrap_or_default();
    Ok(TrainState {
        model,
        adam,
        epochs_done,
        best,
        bad_epochs,
        log,
    })
}

/// Run the training loop from a fresh initialization. Writes `best.ckpt`,
/// `state.ckpt` (resumable, every `checkpoint_every` epochs and at exit),
/// and `train_log.csv` into `out_dir`.
pub fn train(
    model_cfg: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let model = CvaeModel::init(model_cfg.clone(), seeds::derive(cfg.seed, "init", 0))?;
    let adam = Adam::new(&model);
    let state = TrainState {
        model,
        adam,
        epochs_done: 0,
        best: None,
        bad_epochs: 0,
        log: TrainLog::default(),
    };
    run_loop(state, train_set, val_set, cfg, out_dir)
}

/// Resume from a `state.ckpt` written by a previous run. The caller must
/// pass the same TrainConfig for the loop to be a faithful continuation.
pub fn resume(
    state_path: &Path,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = load_state(state_path)?;
    run_loop(state, train_set, val_set, cfg, out_dir)
}

fn run_loop(
    mut st: TrainState,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join("best.ckpt");
    let state_path = out_dir.join("state.ckpt");
    let log_path = out_dir.join("train_log.csv");
    let d_z = st.model.config.latent_dim;

    let mut grads = Gradients::zeros_like(&st.model.params);
    let mut stopped_early = false;

    while st.epochs_done < cfg.max_epochs {
        let epoch = st.epochs_done + 1;
        let started = Instant::now();

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = seeds::rng(cfg.seed, "shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut noise_rng = seeds::rng(cfg.seed, "noise", epoch as u64);

        let mut epoch_acc = [0.0f64; 3];
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            let mut batch_acc = [0.0f64; 3];
            for &i in batch {
                let (base, target, cond) = train_set.sample(i);
                let noise: Vec<f64> = (0..d_z)
                    .map(|_| rand_distr::StandardNormal.sample(&mut noise_rng))
                    .collect();
                let (t, r, k) = st
                    .model
                    .loss_and_gradients(base, target, &cond, &noise, &mut grads)?;
                batch_acc[0] += t;
                batch_acc[1] += r;
                batch_acc[2] += k;
            }
            let bn = batch.len() as f64;
            if !batch_acc[0].is_finite() || !grads.is_finite() {
                // keep the last finite parameters for post-mortem work
                let diverged = out_dir.join("diverged.ckpt");
                save_state(&st, &diverged)?;
                if let Some(best) = &st.best {
                    let m = CvaeModel {
                        config: st.model.config.clone(),
                        params: best.params.clone(),
                    };
                    save_model(&m, best.epoch, best.val_total, &best_path)?;
                }
                return Err(Error::Numerics(format!(
                    "non-finite loss at epoch {epoch} (batch loss {}); last good state saved to {}",
                    batch_acc[0],
                    diverged.display()
                )));
            }
            grads.scale(1.0 / bn);
            st.adam.step(&mut st.model.params, &grads, cfg.learning_rate);
            for (e, b) in epoch_acc.iter_mut().zip(batch_acc) {
                *e += b;
            }
        }

        let n = train_set.len() as f64;
        let val = validate(&st.model, val_set)?;
        st.epochs_done = epoch;
        st.log.rows.push(EpochRow {
            epoch,
            train_total: epoch_acc[0] / n,
            train_recon: epoch_acc[1] / n,
            train_kl: epoch_acc[2] / n,
            val_total: val.total,
            val_recon: val.recon,
            val_kl: val.kl,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        // flush after every epoch so long runs are observable
        st.log.write_csv(&log_path)?;

        let improved = st.best.as_ref().is_none_or(|b| val.total < b.val_total);
        if improved {
            st.best = Some(BestSnapshot {
                params: st.model.params.clone(),
                epoch,
                val_total: val.total,
            });
            st.bad_epochs = 0;
            st.log.best_epoch = Some(epoch);
        } else {
            st.bad_epochs += 1;
        }

        if epoch.is_multiple_of(cfg.checkpoint_every) {
            save_state(&st, &state_path)?;
        }
        if st.bad_epochs >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    // an untrained run (max_epochs 0) still yields a usable checkpoint
    let best_model = match &st.best {
        Some(best) => {
            let m = CvaeModel {
                config: st.model.config.clone(),
                params: best.params.clone(),
            };
            save_model(&m, best.epoch, best.val_total, &best_path)?;
            m
        }
        None => {
            let metrics = validate(&st.model, val_set)?;
            save_model(&st.model, st.epochs_done, metrics.total, &best_path)?;
            st.model.clone()
        }
    };
    save_state(&st, &state_path)?;
    st.log.write_csv(&log_path)?;

    let best_metrics = validate(&best_model, val_set)?;
    Ok(TrainOutcome {
        model: best_model,
        log: st.log,
        best_val: best_metrics,
        stopped_early,
        best_checkpoint: best_path,
    })
}

fn save_model(model: &CvaeModel, epoch: usize, val_total: f64, path: &Path) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), serde_json::json!("cvae-model"));
    meta.insert("epoch".into(), serde_json::json!(epoch));
    meta.insert("val_total".into(), serde_json::json!(val_total));
    checkpoint::save(model, &meta, path)
}
