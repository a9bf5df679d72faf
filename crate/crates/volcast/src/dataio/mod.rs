//! Manifest ingestion, pairwise dataset construction, covariate
//! standardization and status encoding.
//!
//! A manifest is a CSV with header `subject_id,path,age,status,time_years`,
//! one row per scan. Training samples are ordered pairs of scans of one
//! subject, both forward and backward in time, self-pairs included: a
//! subject with `n` scans contributes exactly `n^2` pairs.

mod nifti;
mod volume;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

pub use volume::{
    Volume, VolumeFormat, identity_affine, invert_affine, load_raw, load_volume, save_raw,
    save_volume, volume_format,
};

/// One scan of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub subject_id: String,
    pub path: PathBuf,
    /// Age in years at this scan.
    pub age_at_scan: f64,
    /// Ordered disease status code, 0..=5.
    pub status: u8,
    /// Years since the subject's first scan (0 for the first scan).
    pub time_years: f64,
}

/// An ordered (base, target) pair of scans of one subject. The covariates
/// are taken at the base scan; `delta_t` is signed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub subject_id: String,
    pub base: ScanRecord,
    pub target: ScanRecord,
    /// Age at the base scan.
    pub age: f64,
    /// Status at the base scan; future labels are treated as unknown.
    pub status: u8,
    /// `target.time_years - base.time_years`, in years.
    pub delta_t: f64,
}

pub const MANIFEST_HEADER: [&str; 5] = ["subject_id", "path", "age", "status", "time_years"];

pub fn write_manifest(records: &[ScanRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(MANIFEST_HEADER)
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in records {
        w.write_record([
            r.subject_id.as_str(),
            &r.path.to_string_lossy(),
            &format!("{}", r.age_at_scan),
            &format!("{}", r.status),
            &format!("{}", r.time_years),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a manifest CSV. The first five columns must be the fixed header;
/// extra columns are ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<ScanRecord>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() < 5 || headers.iter().take(5).ne(MANIFEST_HEADER) {
        return Err(Error::Data(format!(
            "{}: manifest header must start with {:?}, got {:?}",
            path.display(),
            MANIFEST_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        let field = |j: usize| -> Result<&str> {
            row.get(j).ok_or_else(|| {
                Error::Data(format!("{}: row {}: missing column {j}", path.display(), i + 2))
            })
        };
        let parse_f64 = |j: usize, name: &str| -> Result<f64> {
            field(j)?.trim().parse::<f64>().map_err(|e| {
                Error::Data(format!(
                    "{}: row {}: bad {name} {:?}: {e}",
                    path.display(),
                    i + 2,
                    field(j).unwrap_or("")
                ))
            })
        };
        let status: u8 = field(3)?.trim().parse().map_err(|e| {
            Error::Data(format!("{}: row {}: bad status: {e}", path.display(), i + 2))
        })?;
        if status > 5 {
            return Err(Error::Data(format!(
                "{}: row {}: status {status} outside 0..=5",
                path.display(),
                i + 2
            )));
        }
        out.push(ScanRecord {
            subject_id: field(0)?.to_string(),
            path: PathBuf::from(field(1)?),
            age_at_scan: parse_f64(2, "age")?,
            status,
            time_years: parse_f64(4, "time_years")?,
        });
    }
    Ok(out)
}

/// Check the per-subject time convention: each subject's earliest scan must
/// sit at `time_years == 0`.
pub fn validate_time_origin(records: &[ScanRecord]) -> Result<()> {
    let mut min_time: BTreeMap<&str, f64> = BTreeMap::new();
    for r in records {
        let e = min_time.entry(&r.subject_id).or_insert(f64::INFINITY);
        *e = e.min(r.time_years);
    }
    for (sid, t) in min_time {
        if t.abs() > 1e-9 {
            return Err(Error::Data(format!(
                "subject {sid}: first scan has time_years = {t}, expected 0"
            )));
        }
    }
    Ok(())
}

/// All ordered scan pairs per subject, self-pairs included.
pub fn build_pairs(records: &[ScanRecord]) -> Result<Vec<ImagePair>> {
    if records.is_empty() {
        return Err(Error::Data("no scan records to pair".into()));
    }
    let mut by_subject: BTreeMap<&str, Vec<&ScanRecord>> = BTreeMap::new();
    for r in records {
        by_subject.entry(&r.subject_id).or_default().push(r);
    }
    let mut pairs = Vec::new();
    for (sid, mut scans) in by_subject {
        scans.sort_by(|a, b| a.time_years.total_cmp(&b.time_years));
        for base in &scans {
            for target in &scans {
                pairs.push(ImagePair {
                    subject_id: sid.to_string(),
                    base: (*base).clone(),
                    target: (*target).clone(),
                    age: base.age_at_scan,
                    status: base.status,
                    delta_t: target.time_years - base.time_years,
                });
            }
        }
    }
    Ok(pairs)
}

/// Age and elapsed-time standardization fitted on training pairs
/// (population convention, so the fitted columns have variance exactly 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub age_mean: f64,
    pub age_std: f64,
    pub dt_mean: f64,
    pub dt_std: f64,
}

impl Standardizer {
    pub fn fit(pairs: &[ImagePair]) -> Result<Self> {
        let ages: Vec<f64> = pairs.iter().map(|p| p.age).collect();
        let dts: Vec<f64> = pairs.iter().map(|p| p.delta_t).collect();
        let (age_mean, age_std) = moments("age", &ages)?;
        let (dt_mean, dt_std) = moments("time difference", &dts)?;
        Ok(Standardizer {
            age_mean,
            age_std,
            dt_mean,
            dt_std,
        })
    }

    pub fn apply(&self, age: f64, delta_t: f64) -> (f64, f64) {
        (
            (age - self.age_mean) / self.age_std,
            (delta_t - self.dt_mean) / self.dt_std,
        )
    }

    pub fn invert(&self, age_std: f64, dt_std: f64) -> (f64, f64) {
        (
            age_std * self.age_std + self.age_mean,
            dt_std * self.dt_std + self.dt_mean,
        )
    }

    /// True when a raw `delta_t` sits more than `k` fitted standard
    /// deviations from the fitted mean (extrapolation warning).
    pub fn dt_is_outside(&self, delta_t: f64, k: f64) -> bool {
        (delta_t - self.dt_mean).abs() > k * self.dt_std
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("standardizer serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&json)
            .map_err(|e| Error::Data(format!("{}: bad standardizer: {e}", path.display())))
    }
}

fn moments(name: &str, xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::Data(format!(
            "standardizer needs at least 2 {name} values, got {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Data(format!(
            "{name} column has zero variance; cannot standardize"
        )));
    }
    Ok((mean, std))
}

/// Label scheme for disease status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatusScheme {
    /// CN/SMC/EMCI/MCI/LMCI/AD -> 0..=5
    Adni,
    /// CN/CI/AD -> 0/3/5
    Oasis,
}

pub fn encode_status(label: &str, scheme: StatusScheme) -> Result<u8> {
    let l = label.trim();
    let code = match scheme {
        StatusScheme::Adni => match l {
            "CN" => Some(0),
            "SMC" => Some(1),
            "EMCI" => Some(2),
            "MCI" => Some(3),
            "LMCI" => Some(4),
            "AD" => Some(5),
            _ => None,
        },
        StatusScheme::Oasis => match l {
            "CN" => Some(0),
            "CI" => Some(3),
            "AD" => Some(5),
            _ => None,
        },
    };
    code.ok_or_else(|| {
        let valid = match scheme {
            StatusScheme::Adni => "CN, SMC, EMCI, MCI, LMCI, AD",
            StatusScheme::Oasis => "CN, CI, AD",
        };
        Error::Data(format!("unknown status label {l:?}; expected one of {valid}"))
    })
}

/// Subject-level holdout split persisted as JSON id lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SubjectSplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("split serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&json)
            .map_err(|e| Error::Data(format!("{}: bad split file: {e}", path.display())))
    }
}

/// Hold out `per_category` subjects at random from each status category.
pub fn split_holdout(
    subjects: &[(String, u8)],
    per_category: usize,
    seed: u64,
) -> Result<SubjectSplit> {
    let mut by_status: BTreeMap<u8, Vec<&String>> = BTreeMap::new();
    for (sid, status) in subjects {
        by_status.entry(*status).or_default().push(sid);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (status, mut ids) in by_status {
        ids.sort();
        ids.dedup();
        if ids.len() < per_category {
            return Err(Error::Data(format!(
                "status {status} has {} subjects, cannot hold out {per_category}",
                ids.len()
            )));
        }
        use rand::seq::SliceRandom;
        let mut rng = seeds::rng(seed, "holdout", status as u64);
        ids.shuffle(&mut rng);
        for (i, sid) in ids.into_iter().enumerate() {
            if i < per_category {
                test.push(sid.clone());
            } else {
                train.push(sid.clone());
            }
        }
    }
    train.sort();
    test.sort();
    Ok(SubjectSplit { train, test })
}
