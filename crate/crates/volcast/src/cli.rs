//! Subcommand orchestration. Every stage reads and writes a fixed layout
//! under the configured run directory so stages compose without manual
//! path plumbing:
//!
//! ```text
//! run_dir/
//!   effective-config.toml   echoed resolved config
//!   run.log                 one line per invocation
//!   cohort/                 phantom-gen: manifest, template, images, masks
//!   registered/             register: aligned images/masks + transforms
//!   pairs/                  prep-pairs: splits, pair lists, standardizer
//!   models/                 train + baselines: checkpoints
//!   trajectory/, posterior/, evaluation/, flowviz/
//! ```
//!
//! Stages that consume images resolve manifest-relative paths against
//! `registered/` when it exists, falling back to `cohort/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{
    MseReport, RoiMask, Slice2d, divergence_volume, mse_distribution_plot, optical_flow,
    render_overlay, roi_mse,
};
use crate::baselines::{
    LatentObservation, LmeModel, SvdModel, SvdTrainingPair, VaeModel, fit_lme, fit_svd,
    identity_predict, predict_svd, predict_vae_lme, train_vae,
};
use crate::config::{self, PipelineConfig};
use crate::cvae::{ConditioningVector, CvaeModel, checkpoint};
use crate::dataio::{
    ImagePair, ScanRecord, Standardizer, SubjectSplit, Volume, build_pairs, load_volume,
    read_manifest, save_volume, split_holdout, validate_time_origin, write_manifest,
};
use crate::error::{Error, Result};
use crate::phantom::generate_cohort;
use crate::predictor::{
    TrajectoryIndex, TrajectoryRequest, predict_future, status_posterior, write_trajectory,
};
use crate::registration::{
    AnyTransform, grid_points, project_to_rigid, register_affine, resample, save_transform,
};
use crate::trainer::{self, Dataset};

#[derive(Debug, Parser)]
#[command(name = "volcast", version, about = "Individualized brain-volume forecasting")]
pub struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(short, long, global = true, default_value = "volcast.toml")]
    pub config: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic longitudinal cohort.
    PhantomGen,
    /// Rigidly align every scan (and each subject's masks) to the template.
    Register,
    /// Split subjects, build ordered scan pairs, fit the standardizer.
    PrepPairs,
    /// Train the conditional forecasting model.
    Train {
        /// Continue from the saved trainer state instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Forecast one scan `delta-t` years ahead.
    Predict {
        #[arg(long)]
        base: PathBuf,
        /// Age at the base scan, in years.
        #[arg(long)]
        age: f64,
        /// Ordered disease status code, 0..=5.
        #[arg(long)]
        status: u8,
        #[arg(long)]
        delta_t: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast a whole trajectory over the configured horizons.
    Trajectory {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        age: f64,
        #[arg(long)]
        status: u8,
        /// Override the configured horizons (comma-separated years).
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<f64>,
        /// Output directory; defaults to <run_dir>/trajectory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Posterior over disease status from a (base, follow-up) scan pair.
    Classify {
        #[arg(long)]
        base: PathBuf,
        /// Follow-up scan; classification needs a pair.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        age: f64,
        #[arg(long)]
        delta_t: f64,
        #[arg(long, default_value_t = 0)]
        null_status: u8,
        #[arg(long, default_value_t = 5)]
        alt_status: u8,
        /// Output JSON; defaults to <run_dir>/posterior/posterior.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the baseline models (plain VAE + latent LME, truncated SVD).
    Baselines,
    /// Score all methods on the held-out forward pairs.
    Evaluate,
    /// Flow-divergence overlays between consecutive trajectory horizons.
    Flowviz {
        /// Trajectory index JSON produced by `trajectory`.
        #[arg(long)]
        index: PathBuf,
        /// Output directory; defaults to <run_dir>/flowviz.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Summarize an existing evaluation (win rates, medians).
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PhantomGen => "phantom-gen",
            Command::Register => "register",
            Command::PrepPairs => "prep-pairs",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Trajectory { .. } => "trajectory",
            Command::Classify { .. } => "classify",
            Command::Baselines => "baselines",
            Command::Evaluate => "evaluate",
            Command::Flowviz { .. } => "flowviz",
            Command::Report => "report",
        }
    }
}

/// Exclusive marker preventing two runs from writing one run directory.
#[derive(Debug)]
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "pid {}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} exists; another run is using this run directory (delete the file if that run is dead)",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = config::parse_config(&cli.config)?;
    run(&cli.command, &cfg)
}

/// Lock the run directory, echo the effective config, run the stage, and
/// append the outcome to the run log.
pub fn run(cmd: &Command, cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
    let _lock = RunLock::acquire(&cfg.run_dir)?;
    config::echo_config(cfg, &cfg.run_dir)?;
    let result = dispatch(cmd, cfg);
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let line = match &result {
        Ok(()) => format!("ts={ts} cmd={} status=ok\n", cmd.name()),
        Err(e) => format!("ts={ts} cmd={} status=error detail={e}\n", cmd.name()),
    };
    if let Ok(mut f) = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(cfg.run_dir.join("run.log"))
    {
        let _ = f.write_all(line.as_bytes());
    }
    result
}

fn dispatch(cmd: &Command, cfg: &PipelineConfig) -> Result<()> {
    match cmd {
        Command::PhantomGen => phantom_gen(cfg),
        Command::Register => register(cfg),
        Command::PrepPairs => prep_pairs(cfg),
        Command::Train { resume } => train(cfg, *resume),
        Command::Predict {
            base,
            age,
            status,
            delta_t,
            out,
        } => predict(cfg, base, *age, *status, *delta_t, out),
        Command::Trajectory {
            base,
            age,
            status,
            horizons,
            out_dir,
        } => trajectory(cfg, base, *age, *status, horizons, out_dir.as_deref()),
        Command::Classify {
            base,
            target,
            age,
            delta_t,
            null_status,
            alt_status,
            out,
        } => classify(
            cfg,
            base,
            target,
            *age,
            *delta_t,
            (*null_status, *alt_status),
            out.as_deref(),
        ),
        Command::Baselines => baselines(cfg),
        Command::Evaluate => evaluate(cfg),
        Command::Flowviz { index, out_dir } => flowviz(cfg, index, out_dir.as_deref()),
        Command::Report => report(cfg),
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

/// Root for manifest-relative image/mask paths: preferred registered
/// output when present, raw cohort otherwise.
fn image_root(run_dir: &Path) -> Result<PathBuf> {
    let registered = run_dir.join("registered");
    if registered.join("manifest.csv").exists() {
        return Ok(registered);
    }
    let cohort = run_dir.join("cohort");
    if cohort.join("manifest.csv").exists() {
        log::info!("no registered images found; using raw cohort images");
        return Ok(cohort);
    }
    Err(Error::Data(format!(
        "no manifest under {}; run phantom-gen (and register) first",
        run_dir.display()
    )))
}

fn load_records(root: &Path) -> Result<Vec<ScanRecord>> {
    read_manifest(&root.join("manifest.csv"))
}

fn pairs_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("pairs")
}

fn read_pairs(path: &Path) -> Result<Vec<ImagePair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_pairs(pairs: &[ImagePair], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(pairs).expect("pairs serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_cvae(run_dir: &Path) -> Result<CvaeModel> {
    let path = run_dir.join("models/cvae/best.ckpt");
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} not found; run `train` first",
            path.display()
        )));
    }
    Ok(checkpoint::load(&path)?.0)
}

fn load_standardizer(run_dir: &Path) -> Result<Standardizer> {
    let path = pairs_dir(run_dir).join("standardizer.json");
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} not found; run `prep-pairs` first",
            path.display()
        )));
    }
    Standardizer::load(&path)
}

/// Build a training dataset from pairs: each distinct scan is loaded once.
fn build_dataset(pairs: &[ImagePair], root: &Path, std: &Standardizer) -> Result<Dataset> {
    let mut set = Dataset::new();
    let mut by_path: BTreeMap<&Path, usize> = BTreeMap::new();
    for pair in pairs {
        for rec in [&pair.base, &pair.target] {
            if !by_path.contains_key(rec.path.as_path()) {
                let vol = load_volume(&root.join(&rec.path))?;
                let idx = set.add_volume(vol);
                by_path.insert(rec.path.as_path(), idx);
            }
        }
    }
    for pair in pairs {
        let (age_std, delta_t_std) = std.apply(pair.age, pair.delta_t);
        set.add_sample(
            by_path[pair.base.path.as_path()],
            by_path[pair.target.path.as_path()],
            ConditioningVector {
                age_std,
                delta_t_std,
                status: pair.status as f64,
            },
        )?;
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// stages

fn phantom_gen(cfg: &PipelineConfig) -> Result<()> {
    let out = cfg.run_dir.join("cohort");
    let cohort = generate_cohort(&cfg.phantom, &out)?;
    let scans: usize = cohort.subjects.iter().map(|s| s.scan_times.len()).sum();
    println!(
        "generated {} subjects / {scans} scans under {}",
        cohort.subjects.len(),
        out.display()
    );
    Ok(())
}

fn register(cfg: &PipelineConfig) -> Result<()> {
    let cohort = cfg.run_dir.join("cohort");
    let out = cfg.run_dir.join("registered");
    let template = load_volume(&cohort.join("template.nii.gz"))?;
    let records = load_records(&cohort)?;
    fs::create_dir_all(out.join("transforms")).map_err(|e| Error::io(&out, e))?;
    fs::create_dir_all(out.join("masks")).map_err(|e| Error::io(&out, e))?;

    let points = grid_points(&template);
    let mut report_rows = Vec::new();
    // earliest scan's transform per subject, reused for that subject's masks
    let mut subject_transform: BTreeMap<String, (f64, crate::registration::RigidTransform)> =
        BTreeMap::new();
    for rec in &records {
        let img = load_volume(&cohort.join(&rec.path))?;
        let (affine, rep) = register_affine(&template, &img, &cfg.registration)?;
        let rigid = project_to_rigid(&affine, &points)?;
        let aligned = resample(&img, &rigid.to_affine(), &template)?;
        let dst = out.join(&rec.path);
        if let Some(dir) = dst.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_volume(&aligned, &dst)?;
        let stem = rec
            .path
            .file_name()
            .map(|s| s.to_string_lossy().replace(".nii.gz", ""))
            .unwrap_or_else(|| "scan".into());
        save_transform(
            &AnyTransform::Rigid(rigid.clone()),
            &out.join(format!("transforms/{stem}.json")),
        )?;
        let entry = subject_transform
            .entry(rec.subject_id.clone())
            .or_insert_with(|| (rec.time_years, rigid.clone()));
        if rec.time_years < entry.0 {
            *entry = (rec.time_years, rigid.clone());
        }
        report_rows.push(serde_json::json!({
            "path": rec.path,
            "iterations": rep.iterations,
            "initial_ssd": rep.initial_ssd,
            "final_ssd": rep.final_ssd,
            "in_field_fraction": rep.in_field_fraction,
        }));
    }

    for (sid, (_, rigid)) in &subject_transform {
        for kind in ["ventricle", "hippocampus"] {
            let name = format!("masks/{sid}_{kind}.nii.gz");
            let mask = load_volume(&cohort.join(&name))?;
            let aligned = resample(&mask, &rigid.to_affine(), &template)?;
            save_volume(&aligned, &out.join(&name))?;
        }
    }

    write_manifest(&records, &out.join("manifest.csv"))?;
    let report = serde_json::to_string_pretty(&report_rows).expect("report serializes");
    let report_path = out.join("report.json");
    fs::write(&report_path, report).map_err(|e| Error::io(&report_path, e))?;
    println!("registered {} scans into {}", records.len(), out.display());
    Ok(())
}

fn prep_pairs(cfg: &PipelineConfig) -> Result<()> {
    let root = image_root(&cfg.run_dir)?;
    let records = load_records(&root)?;
    validate_time_origin(&records)?;
    let out = pairs_dir(&cfg.run_dir);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut subjects: Vec<(String, u8)> = records
        .iter()
        .map(|r| (r.subject_id.clone(), r.status))
        .collect();
    subjects.sort();
    subjects.dedup();

    let split = split_holdout(
        &subjects,
        cfg.evaluation.holdout_per_status,
        cfg.stage_seed("split-test"),
    )?;
    let train_subjects: Vec<(String, u8)> = subjects
        .iter()
        .filter(|(sid, _)| split.train.contains(sid))
        .cloned()
        .collect();
    let val_split = if cfg.evaluation.val_per_status > 0 {
        split_holdout(
            &train_subjects,
            cfg.evaluation.val_per_status,
            cfg.stage_seed("split-val"),
        )?
    } else {
        log::warn!("val_per_status is 0; training will have no validation subjects");
        SubjectSplit {
            train: train_subjects.iter().map(|(s, _)| s.clone()).collect(),
            test: Vec::new(),
        }
    };
    split.save(&out.join("split.json"))?;
    val_split.save(&out.join("val_split.json"))?;

    let by_list = |ids: &[String]| -> Vec<ScanRecord> {
        records
            .iter()
            .filter(|r| ids.contains(&r.subject_id))
            .cloned()
            .collect()
    };
    let train_pairs = build_pairs(&by_list(&val_split.train))?;
    let val_pairs = if val_split.test.is_empty() {
        Vec::new()
    } else {
        build_pairs(&by_list(&val_split.test))?
    };
    let test_pairs = build_pairs(&by_list(&split.test))?;

    let standardizer = Standardizer::fit(&train_pairs)?;
    standardizer.save(&out.join("standardizer.json"))?;
    write_pairs(&train_pairs, &out.join("train_pairs.json"))?;
    write_pairs(&val_pairs, &out.join("val_pairs.json"))?;
    write_pairs(&test_pairs, &out.join("test_pairs.json"))?;
    println!(
        "pairs: {} train / {} val / {} test ({} train, {} val, {} test subjects)",
        train_pairs.len(),
        val_pairs.len(),
        test_pairs.len(),
        val_split.train.len(),
        val_split.test.len(),
        split.test.len()
    );
    Ok(())
}

fn train(cfg: &PipelineConfig, resume: bool) -> Result<()> {
    let root = image_root(&cfg.run_dir)?;
    let std = load_standardizer(&cfg.run_dir)?;
    let pdir = pairs_dir(&cfg.run_dir);
    let train_pairs = read_pairs(&pdir.join("train_pairs.json"))?;
    let val_pairs = read_pairs(&pdir.join("val_pairs.json"))?;
    let train_set = build_dataset(&train_pairs, &root, &std)?;
    let val_set = build_dataset(&val_pairs, &root, &std)?;
    let out = cfg.run_dir.join("models/cvae");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let state_path = out.join("state.ckpt");
    let outcome = if resume {
        if !state_path.exists() {
            return Err(Error::Data(format!(
                "--resume requested but {} does not exist",
                state_path.display()
            )));
        }
        trainer::resume(&state_path, &train_set, &val_set, &cfg.train, &out)?
    } else {
        trainer::train(&cfg.model, &train_set, &val_set, &cfg.train, &out)?
    };
    println!(
        "trained: best val total {:.4} (recon {:.4}, kl {:.4}) at {}; early stop: {}",
        outcome.best_val.total,
        outcome.best_val.recon,
        outcome.best_val.kl,
        outcome.best_checkpoint.display(),
        outcome.stopped_early
    );
    Ok(())
}

fn predict(
    cfg: &PipelineConfig,
    base: &Path,
    age: f64,
    status: u8,
    delta_t: f64,
    out: &Path,
) -> Result<()> {
    let model = load_cvae(&cfg.run_dir)?;
    let std = load_standardizer(&cfg.run_dir)?;
    let base_vol = load_volume(base)?;
    let pred = predict_future(
        &model,
        &base_vol,
        age,
        status,
        delta_t,
        &std,
        &cfg.evaluation.latent,
    )?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_volume(&pred, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn trajectory(
    cfg: &PipelineConfig,
    base: &Path,
    age: f64,
    status: u8,
    horizons: &[f64],
    out_dir: Option<&Path>,
) -> Result<()> {
    let model = load_cvae(&cfg.run_dir)?;
    let std = load_standardizer(&cfg.run_dir)?;
    let base_vol = load_volume(base)?;
    let request = TrajectoryRequest {
        age,
        status,
        horizons: if horizons.is_empty() {
            cfg.evaluation.horizons.clone()
        } else {
            horizons.to_vec()
        },
        latent: cfg.evaluation.latent.clone(),
    };
    let out = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run_dir.join("trajectory"));
    let index = write_trajectory(&model, &base_vol, &request, &std, &out)?;
    println!(
        "wrote {} horizon volumes + index.json under {}",
        index.volumes.len(),
        out.display()
    );
    Ok(())
}

fn classify(
    cfg: &PipelineConfig,
    base: &Path,
    target: &Path,
    age: f64,
    delta_t: f64,
    hypotheses: (u8, u8),
    out: Option<&Path>,
) -> Result<()> {
    let model = load_cvae(&cfg.run_dir)?;
    let std = load_standardizer(&cfg.run_dir)?;
    let base_vol = load_volume(base)?;
    let target_vol = load_volume(target)?;
    let posterior = status_posterior(
        &model,
        &base_vol,
        &target_vol,
        age,
        delta_t,
        &std,
        hypotheses,
    )?;
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run_dir.join("posterior/posterior.json"));
    if let Some(dir) = out_path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    posterior.save(&out_path)?;
    println!(
        "p(status={}) = {:.6} vs status={} (log f: {:.3} / {:.3}); wrote {}",
        hypotheses.0,
        posterior.p_null,
        hypotheses.1,
        posterior.log_f_null,
        posterior.log_f_alt,
        out_path.display()
    );
    Ok(())
}

fn baselines(cfg: &PipelineConfig) -> Result<()> {
    let root = image_root(&cfg.run_dir)?;
    let records = load_records(&root)?;
    let pdir = pairs_dir(&cfg.run_dir);
    let val_split = SubjectSplit::load(&pdir.join("val_split.json"))?;
    let models = cfg.run_dir.join("models");
    fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;

    // volumes per split, loaded once and keyed by manifest path
    let load_set = |ids: &[String]| -> Result<Vec<(ScanRecord, Volume)>> {
        records
            .iter()
            .filter(|r| ids.contains(&r.subject_id))
            .map(|r| Ok((r.clone(), load_volume(&root.join(&r.path))?)))
            .collect()
    };
    let train_scans = load_set(&val_split.train)?;
    let val_scans = if val_split.test.is_empty() {
        train_scans.clone()
    } else {
        load_set(&val_split.test)?
    };

    let train_vols: Vec<Volume> = train_scans.iter().map(|(_, v)| v.clone()).collect();
    let val_vols: Vec<Volume> = val_scans.iter().map(|(_, v)| v.clone()).collect();
    let (vae, history) = train_vae(&cfg.vae, &train_vols, &val_vols, &cfg.vae_train)?;
    let mut meta = BTreeMap::new();
    meta.insert("epochs".to_string(), serde_json::json!(history.len()));
    meta.insert(
        "best_val".to_string(),
        serde_json::json!(history.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min)),
    );
    vae.save(&meta, &models.join("vae.ckpt"))?;
    println!("vae: {} epochs", history.len());

    // latent LME over the training scans (train + val subjects)
    let mut subject_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut observations = Vec::new();
    for (rec, vol) in train_scans.iter().chain(&val_scans) {
        let next = subject_index.len();
        let idx = *subject_index.entry(rec.subject_id.as_str()).or_insert(next);
        observations.push(LatentObservation {
            subject: idx,
            time: rec.time_years,
            status: rec.status as f64,
            latent: vae.encode(vol)?.mean,
        });
    }
    let lme = fit_lme(&observations)?;
    lme.save(&models.join("lme.json"))?;
    println!("lme: {} observations / {} subjects", observations.len(), subject_index.len());

    // truncated SVD over (first scan, demographics) -> last scan
    let mut by_subject: BTreeMap<&str, Vec<&(ScanRecord, Volume)>> = BTreeMap::new();
    for item in train_scans.iter().chain(&val_scans) {
        by_subject.entry(item.0.subject_id.as_str()).or_default().push(item);
    }
    let mut svd_pairs = Vec::new();
    let mut self_paired = Vec::new();
    for (sid, mut scans) in by_subject {
        scans.sort_by(|a, b| a.0.time_years.total_cmp(&b.0.time_years));
        let first = scans.first().expect("subject has scans");
        let last = scans.last().expect("subject has scans");
        if scans.len() == 1 {
            self_paired.push(sid.to_string());
        }
        svd_pairs.push(SvdTrainingPair {
            first: first.1.clone(),
            last: last.1.clone(),
            age: first.0.age_at_scan,
            status: first.0.status as f64,
            elapsed: last.0.time_years - first.0.time_years,
        });
    }
    if !self_paired.is_empty() {
        log::warn!(
            "{} single-scan subjects enter the SVD baseline as self-pairs: {self_paired:?}",
            self_paired.len()
        );
    }
    for &k in &cfg.evaluation.svd_ranks {
        let k_eff = k.min(svd_pairs.len());
        if k_eff < k {
            log::warn!(
                "svd rank {k} clamped to {k_eff} (only {} training subjects)",
                svd_pairs.len()
            );
        }
        let model = fit_svd(&svd_pairs, k_eff)?;
        model.save(&models.join(format!("svd_{k}.ckpt")))?;
        println!("svd_{k}: fitted with rank {k_eff} on {} subjects", svd_pairs.len());
    }
    Ok(())
}

/// Everything `evaluate` needs per method; missing models are reported
/// with the stage that produces them.
struct MethodSet {
    cvae: CvaeModel,
    vae: VaeModel,
    lme: LmeModel,
    svds: Vec<(usize, SvdModel)>,
}

fn load_methods(cfg: &PipelineConfig) -> Result<MethodSet> {
    let models = cfg.run_dir.join("models");
    let vae_path = models.join("vae.ckpt");
    if !vae_path.exists() {
        return Err(Error::Data(format!(
            "{} not found; run `baselines` first",
            vae_path.display()
        )));
    }
    let mut svds = Vec::new();
    for &k in &cfg.evaluation.svd_ranks {
        svds.push((k, SvdModel::load(&models.join(format!("svd_{k}.ckpt")))?));
    }
    Ok(MethodSet {
        cvae: load_cvae(&cfg.run_dir)?,
        vae: VaeModel::load(&vae_path)?.0,
        lme: LmeModel::load(&models.join("lme.json"))?,
        svds,
    })
}

fn evaluate(cfg: &PipelineConfig) -> Result<()> {
    let root = image_root(&cfg.run_dir)?;
    let std = load_standardizer(&cfg.run_dir)?;
    let methods = load_methods(cfg)?;
    let pdir = pairs_dir(&cfg.run_dir);
    let test_pairs: Vec<ImagePair> = read_pairs(&pdir.join("test_pairs.json"))?
        .into_iter()
        .filter(|p| p.delta_t > 0.0 && p.delta_t >= cfg.evaluation.min_forward_years)
        .collect();
    if test_pairs.is_empty() {
        return Err(Error::Data(format!(
            "no held-out pairs look forward by at least {} years",
            cfg.evaluation.min_forward_years
        )));
    }
    let out = cfg.run_dir.join("evaluation");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut volume_cache: BTreeMap<PathBuf, Volume> = BTreeMap::new();
    let mut load_cached = |path: &Path, root: &Path| -> Result<Volume> {
        if let Some(v) = volume_cache.get(path) {
            return Ok(v.clone());
        }
        let v = load_volume(&root.join(path))?;
        volume_cache.insert(path.to_path_buf(), v.clone());
        Ok(v)
    };
    let mut mask_cache: BTreeMap<String, Vec<RoiMask>> = BTreeMap::new();

    let mut report = MseReport::new();
    for pair in &test_pairs {
        let base = load_cached(&pair.base.path, &root)?;
        let target = load_cached(&pair.target.path, &root)?;
        let masks = match mask_cache.get(&pair.subject_id) {
            Some(m) => m.clone(),
            None => {
                let sid = &pair.subject_id;
                let vent = load_volume(&root.join(format!("masks/{sid}_ventricle.nii.gz")))?;
                let hippo = load_volume(&root.join(format!("masks/{sid}_hippocampus.nii.gz")))?;
                let m = vec![
                    RoiMask::whole(base.shape),
                    RoiMask::from_volume("ventricles", &vent)?,
                    RoiMask::from_volume("hippocampus", &hippo)?,
                ];
                mask_cache.insert(sid.clone(), m.clone());
                m
            }
        };
        let pair_id = format!(
            "{}|t{:+.2}->t{:+.2}",
            pair.subject_id, pair.base.time_years, pair.target.time_years
        );

        let mut predictions: Vec<(String, Volume)> = vec![
            (
                "cvae".into(),
                predict_future(
                    &methods.cvae,
                    &base,
                    pair.age,
                    pair.status,
                    pair.delta_t,
                    &std,
                    &cfg.evaluation.latent,
                )?,
            ),
            (
                "vae_lme".into(),
                predict_vae_lme(
                    &methods.vae,
                    &methods.lme,
                    &base,
                    pair.status as f64,
                    pair.delta_t,
                )?,
            ),
            ("identity".into(), identity_predict(&base)),
        ];
        for (k, svd) in &methods.svds {
            predictions.push((
                format!("svd_{k}"),
                predict_svd(svd, &base, pair.age, pair.status as f64, pair.delta_t)?,
            ));
        }
        for (method, pred) in &predictions {
            for mask in &masks {
                report.add(
                    pair_id.clone(),
                    method.clone(),
                    mask.name.clone(),
                    roi_mse(pred, &target, mask)?,
                )?;
            }
        }
    }

    report.write_csv(&out.join("mse.csv"))?;
    let wins = report.win_rates()?;
    wins.save(&out.join("win_rates.json"))?;
    let summary = mse_distribution_plot(&report, &out.join("mse_distribution.png"))?;
    summary.save(&out.join("plot_summary.json"))?;
    for (roi, w) in &wins.per_roi {
        let mut best = ("", 0.0);
        for (m, f) in &w.strict_fraction {
            if *f >= best.1 {
                best = (m, *f);
            }
        }
        println!(
            "{roi}: {} pairs, best method {} (strict win rate {:.2})",
            w.pairs, best.0, best.1
        );
    }
    println!("wrote {}", out.join("mse.csv").display());
    Ok(())
}

fn flowviz(cfg: &PipelineConfig, index_path: &Path, out_dir: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let index: TrajectoryIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", index_path.display())))?;
    if index.volumes.len() < 2 {
        return Err(Error::Data(
            "flowviz needs at least two horizons to compute incremental flow".into(),
        ));
    }
    let base_dir = index_path.parent().unwrap_or(Path::new("."));
    let out = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run_dir.join("flowviz"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut entries = index.volumes.clone();
    entries.sort_by(|a, b| a.horizon_years.total_cmp(&b.horizon_years));
    let mut summary = Vec::new();
    for pair in entries.windows(2) {
        let v1 = load_volume(&base_dir.join(&pair[0].path))?;
        let v2 = load_volume(&base_dir.join(&pair[1].path))?;
        let flow = optical_flow(&v1, &v2, cfg.evaluation.flow_alpha, cfg.evaluation.flow_iters)?;
        let div = divergence_volume(&flow, &v1)?;
        let tag = format!(
            "{:+07.2}y_to_{:+07.2}y",
            pair[0].horizon_years, pair[1].horizon_years
        );
        let div_path = out.join(format!("divergence_{tag}.nii.gz"));
        save_volume(&div, &div_path)?;
        let mid = v1.shape[2] / 2;
        let png_path = out.join(format!("overlay_{tag}.png"));
        render_overlay(
            &Slice2d::from_volume(&v1, 2, mid)?,
            &Slice2d::from_volume(&div, 2, mid)?,
            &png_path,
        )?;
        let mean_div =
            div.data().iter().map(|v| *v as f64).sum::<f64>() / div.data().len() as f64;
        summary.push(serde_json::json!({
            "from_horizon_years": pair[0].horizon_years,
            "to_horizon_years": pair[1].horizon_years,
            "mean_divergence": mean_div,
            "divergence": div_path.file_name().map(|s| s.to_string_lossy().into_owned()),
            "overlay": png_path.file_name().map(|s| s.to_string_lossy().into_owned()),
        }));
    }
    let spath = out.join("flow_summary.json");
    fs::write(&spath, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(|e| Error::io(&spath, e))?;
    println!("wrote {} incremental flow steps under {}", summary.len(), out.display());
    Ok(())
}

fn report(cfg: &PipelineConfig) -> Result<()> {
    let out = cfg.run_dir.join("evaluation");
    let csv = out.join("mse.csv");
    if !csv.exists() {
        return Err(Error::Data(format!(
            "{} not found; run `evaluate` first",
            csv.display()
        )));
    }
    let mse = MseReport::read_csv(&csv)?;
    let wins = mse.win_rates()?;
    let medians = mse.medians();
    let doc = serde_json::json!({
        "pairs": wins.per_roi.values().map(|w| w.pairs).max().unwrap_or(0),
        "win_rates": wins,
        "median_mse": medians,
    });
    let rpath = out.join("report.json");
    fs::write(&rpath, serde_json::to_string_pretty(&doc).expect("report serializes"))
        .map_err(|e| Error::io(&rpath, e))?;

    let methods: BTreeSet<String> = mse.methods();
    for (roi, meds) in &medians {
        println!("== {roi} ==");
        for method in &methods {
            let w = wins.per_roi[roi].strict_fraction.get(method).copied().unwrap_or(0.0);
            println!(
                "  {method:<10} median mse {:>12.6e}   strict wins {:>5.1}%",
                meds[method],
                100.0 * w
            );
        }
    }
    println!("wrote {}", rpath.display());
    Ok(())
}
