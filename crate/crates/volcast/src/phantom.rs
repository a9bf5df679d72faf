//! Synthetic longitudinal "brain-like" cohort generator.
//!
//! Each subject is a sphere phantom: a skull filled with tissue, a bright
//! central ventricle and a dimmer off-center hippocampus, all with smooth
//! compactly-supported intensity ramps. Disease dynamics are linear in
//! (status x elapsed years): the ventricle radius grows by
//! `1 + growth_rate * status * t` and the hippocampus shrinks by
//! `1 - shrink_rate * status * t`, clamped so nothing ever leaves the
//! skull. Noise is added after geometry, inside the skull only, so the
//! emitted ROI masks stay exact and every byte is reproducible from
//! `(spec, seed)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::RngExt;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{self, ScanRecord, Volume, save_volume};
use crate::error::{Error, Result};
use crate::seeds;

/// One status code with its cohort sampling weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatusWeight {
    pub code: u8,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Voxels per axis of the cubic grid.
    pub grid_size: usize,
    pub cohort_size: usize,
    pub seed: u64,
    pub statuses: Vec<StatusWeight>,
    /// Ventricle radius growth per year per status unit.
    pub ventricle_growth_rate: f64,
    /// Hippocampus radius shrink per year per status unit.
    pub hippocampus_shrink_rate: f64,
    /// Standard deviation of the additive intensity noise.
    pub noise_sigma: f64,
    /// Inclusive [min, max] scans per subject.
    pub scans_per_subject: [usize; 2],
    /// Inclusive [min, max] years between consecutive scans.
    pub visit_spacing_years: [f64; 2],
    pub voxel_size_mm: f64,
    /// Inclusive [min, max] baseline age in years.
    pub age_range: [f64; 2],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_size: 32,
            cohort_size: 60,
            seed: 0,
            statuses: vec![
                StatusWeight { code: 0, weight: 0.2 },
                StatusWeight { code: 2, weight: 0.3 },
                StatusWeight { code: 5, weight: 0.5 },
            ],
            ventricle_growth_rate: 0.02,
            hippocampus_shrink_rate: 0.01,
            noise_sigma: 0.02,
            scans_per_subject: [2, 4],
            visit_spacing_years: [1.0, 2.5],
            voxel_size_mm: 2.0,
            age_range: [60.0, 85.0],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        // Worst-case anatomy placement needs
        //   2*0.105g + 0.5*0.085g + 0.4 < (0.40 - 0.085)g - RAMP - 0.2,
        // which first holds at g = 26.
        if self.grid_size < 26 {
            return Err(Error::Config(format!(
                "phantom grid_size must be >= 26, got {}",
                self.grid_size
            )));
        }
        if self.cohort_size == 0 {
            return Err(Error::Config("phantom cohort_size must be positive".into()));
        }
        if self.statuses.is_empty() {
            return Err(Error::Config("phantom statuses list is empty".into()));
        }
        for sw in &self.statuses {
            if sw.code > 5 {
                return Err(Error::Config(format!(
                    "phantom status code {} outside 0..=5",
                    sw.code
                )));
            }
            if !(sw.weight > 0.0) {
                return Err(Error::Config(format!(
                    "phantom status weight for code {} must be positive",
                    sw.code
                )));
            }
        }
        if self.ventricle_growth_rate < 0.0 || self.hippocampus_shrink_rate < 0.0 {
            return Err(Error::Config("phantom atrophy rates must be >= 0".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("phantom noise_sigma must be >= 0".into()));
        }
        if self.scans_per_subject[0] < 1 || self.scans_per_subject[0] > self.scans_per_subject[1] {
            return Err(Error::Config(format!(
                "phantom scans_per_subject range [{}, {}] is invalid",
                self.scans_per_subject[0], self.scans_per_subject[1]
            )));
        }
        if !(self.visit_spacing_years[0] > 0.0)
            || self.visit_spacing_years[0] > self.visit_spacing_years[1]
        {
            return Err(Error::Config(format!(
                "phantom visit_spacing_years range [{}, {}] is invalid",
                self.visit_spacing_years[0], self.visit_spacing_years[1]
            )));
        }
        if !(self.voxel_size_mm > 0.0) {
            return Err(Error::Config("phantom voxel_size_mm must be positive".into()));
        }
        if self.age_range[0] > self.age_range[1] {
            return Err(Error::Config("phantom age_range is inverted".into()));
        }
        Ok(())
    }
}

/// Per-subject shape parameters, reproducible from `(spec.seed, index)`.
/// Centers and radii are in voxel units on the common grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectAnatomy {
    pub subject_id: String,
    pub baseline_age: f64,
    pub status: u8,
    pub skull_radius: f64,
    pub ventricle_center: [f64; 3],
    pub ventricle_radius: f64,
    pub hippocampus_center: [f64; 3],
    pub hippocampus_radius: f64,
    pub tissue_level: f64,
    pub ventricle_level: f64,
    pub hippocampus_level: f64,
    pub noise_seed: u64,
}

/// Half-width of the smooth intensity ramp at every structure boundary,
/// in voxels. The ramp has compact support: weight is exactly 1 inside
/// `r - RAMP`, exactly 0 outside `r + RAMP`.
const RAMP: f64 = 1.0;

/// Horizon (years) whose grown ventricle extent the emitted ROI mask covers.
const MASK_HORIZON_YEARS: f64 = 10.0;

fn smooth_ball(d: f64, r: f64) -> f64 {
    if r < 0.5 {
        // structure has atrophied away entirely
        return 0.0;
    }
    let x = ((d - (r - RAMP)) / (2.0 * RAMP)).clamp(0.0, 1.0);
    1.0 - (3.0 * x * x - 2.0 * x * x * x)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

impl SubjectAnatomy {
    /// Ventricle radius after `t` years, capped inside the skull.
    pub fn ventricle_radius_at(&self, spec: &PhantomSpec, t: f64) -> f64 {
        let grown = self.ventricle_radius
            * (1.0 + spec.ventricle_growth_rate * f64::from(self.status) * t);
        grown.min(0.9 * self.skull_radius)
    }

    /// Hippocampus radius after `t` years, floored at zero.
    pub fn hippocampus_radius_at(&self, spec: &PhantomSpec, t: f64) -> f64 {
        let factor = (1.0 - spec.hippocampus_shrink_rate * f64::from(self.status) * t).max(0.0);
        self.hippocampus_radius * factor
    }
}

/// Draw one subject's anatomy from the seeded distributions.
pub fn sample_anatomy(spec: &PhantomSpec, index: usize) -> SubjectAnatomy {
    let g = spec.grid_size as f64;
    let c = (g - 1.0) / 2.0;
    let mut rng = seeds::rng(spec.seed, "anatomy", index as u64);

    let skull_radius = g * rng.random_range(0.40..0.44);
    let ventricle_radius = g * rng.random_range(0.085..0.105);
    let ventricle_center = [
        c + rng.random_range(-0.5..0.5),
        c + rng.random_range(-0.5..0.5),
        c + rng.random_range(-0.5..0.5),
    ];
    let hippocampus_radius = g * rng.random_range(0.07..0.085);

    // Place the hippocampus on a shell that clears both the fully grown
    // ventricle (10-year status-5 horizon, i.e. factor 2) and the skull ramp.
    let dist_min = 2.0 * ventricle_radius + 0.5 * hippocampus_radius + 0.4;
    let dist_max = skull_radius - hippocampus_radius - RAMP - 0.2;
    debug_assert!(dist_min < dist_max);
    let dist = rng.random_range(dist_min..dist_max);
    let dir = loop {
        let v: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.2 && n <= 1.0 {
            break [v[0] / n, v[1] / n, v[2] / n];
        }
    };
    let hippocampus_center = [
        ventricle_center[0] + dist * dir[0],
        ventricle_center[1] + dist * dir[1],
        ventricle_center[2] + dist * dir[2],
    ];

    let status = {
        let total: f64 = spec.statuses.iter().map(|s| s.weight).sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = spec.statuses[spec.statuses.len() - 1].code;
        for sw in &spec.statuses {
            if u < sw.weight {
                chosen = sw.code;
                break;
            }
            u -= sw.weight;
        }
        chosen
    };

    SubjectAnatomy {
        subject_id: format!("sub-{index:03}"),
        baseline_age: rng.random_range(spec.age_range[0]..=spec.age_range[1]),
        status,
        skull_radius,
        ventricle_center,
        ventricle_radius,
        hippocampus_center,
        hippocampus_radius,
        tissue_level: rng.random_range(0.33..0.37),
        ventricle_level: rng.random_range(0.88..0.92),
        hippocampus_level: rng.random_range(0.53..0.57),
        noise_seed: seeds::derive(spec.seed, "noise", index as u64),
    }
}

fn grid_center(spec: &PhantomSpec) -> [f64; 3] {
    let c = (spec.grid_size as f64 - 1.0) / 2.0;
    [c, c, c]
}

/// Noise-free geometry render: the deterministic part of a scan.
pub fn render_geometry(spec: &PhantomSpec, anatomy: &SubjectAnatomy, t: f64) -> Volume {
    let n = spec.grid_size;
    let center = grid_center(spec);
    let r_vent = anatomy.ventricle_radius_at(spec, t);
    let r_hip = anatomy.hippocampus_radius_at(spec, t);
    let mut vol = Volume::zeros([n, n, n], spec.voxel_size_mm);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [x as f64, y as f64, z as f64];
                let w_skull = smooth_ball(dist(p, center), anatomy.skull_radius);
                if w_skull == 0.0 {
                    continue;
                }
                let mut v = w_skull * anatomy.tissue_level;
                let w_hip = smooth_ball(dist(p, anatomy.hippocampus_center), r_hip);
                v += w_hip * (anatomy.hippocampus_level - v);
                let w_vent = smooth_ball(dist(p, anatomy.ventricle_center), r_vent);
                v += w_vent * (anatomy.ventricle_level - v);
                vol.set(x, y, z, v as f32);
            }
        }
    }
    vol
}

/// Render one scan: geometry plus seeded noise confined to the skull.
/// The noise stream is a pure function of (anatomy, elapsed_years), so a
/// re-render of the same visit is bit-identical.
pub fn render_subject(spec: &PhantomSpec, anatomy: &SubjectAnatomy, elapsed_years: f64) -> Volume {
    let mut vol = render_geometry(spec, anatomy, elapsed_years);
    if spec.noise_sigma == 0.0 {
        return vol;
    }
    let n = spec.grid_size;
    let center = grid_center(spec);
    let mut rng = seeds::rng(anatomy.noise_seed, "scan", elapsed_years.to_bits());
    let normal = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [x as f64, y as f64, z as f64];
                let w_skull = smooth_ball(dist(p, center), anatomy.skull_radius);
                // draw even for outside voxels so the stream does not
                // depend on the skull radius
                let e: f64 = normal.sample(&mut rng);
                if w_skull > 0.0 {
                    let v = vol.at(x, y, z) as f64 + e * w_skull;
                    vol.set(x, y, z, v as f32);
                }
            }
        }
    }
    vol
}

fn binary_ball_mask(spec: &PhantomSpec, center: [f64; 3], radius: f64) -> Volume {
    let n = spec.grid_size;
    let mut vol = Volume::zeros([n, n, n], spec.voxel_size_mm);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                if dist([x as f64, y as f64, z as f64], center) <= radius {
                    vol.set(x, y, z, 1.0);
                }
            }
        }
    }
    vol
}

/// Binary ventricle ROI covering the structure out to its 10-year grown
/// extent, so the same mask works for every scan and predicted horizon.
pub fn ventricle_mask(spec: &PhantomSpec, anatomy: &SubjectAnatomy) -> Volume {
    let r = anatomy.ventricle_radius_at(spec, MASK_HORIZON_YEARS);
    binary_ball_mask(spec, anatomy.ventricle_center, r)
}

/// Binary hippocampus ROI at baseline extent (the structure only shrinks).
pub fn hippocampus_mask(spec: &PhantomSpec, anatomy: &SubjectAnatomy) -> Volume {
    binary_ball_mask(spec, anatomy.hippocampus_center, anatomy.hippocampus_radius)
}

/// Everything `generate_cohort` wrote, for downstream stages and tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortDescription {
    pub spec: PhantomSpec,
    pub subjects: Vec<SubjectScans>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectScans {
    pub anatomy: SubjectAnatomy,
    pub scan_times: Vec<f64>,
}

impl CohortDescription {
    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&json)
            .map_err(|e| Error::Data(format!("{}: bad cohort file: {e}", path.display())))
    }

    pub fn subject(&self, subject_id: &str) -> Option<&SubjectScans> {
        self.subjects
            .iter()
            .find(|s| s.anatomy.subject_id == subject_id)
    }
}

/// Generate a full cohort under `out_dir`:
///
/// ```text
/// out_dir/manifest.csv
/// out_dir/cohort.json                 anatomies + scan times
/// out_dir/template.nii.gz             noiseless mean baseline anatomy
/// out_dir/images/<sid>_s<k>.nii.gz
/// out_dir/masks/<sid>_ventricle.nii.gz, <sid>_hippocampus.nii.gz
/// ```
///
/// Manifest paths are relative to `out_dir`. Same spec, same bytes.
pub fn generate_cohort(spec: &PhantomSpec, out_dir: &Path) -> Result<CohortDescription> {
    spec.validate()?;
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;

    let n = spec.grid_size;
    let mut template_sum = vec![0.0f64; n * n * n];
    let mut records: Vec<ScanRecord> = Vec::new();
    let mut subjects = Vec::with_capacity(spec.cohort_size);

    for i in 0..spec.cohort_size {
        let anatomy = sample_anatomy(spec, i);
        let sid = anatomy.subject_id.clone();

        let mut rng = seeds::rng(spec.seed, "schedule", i as u64);
        let n_scans = rng.random_range(spec.scans_per_subject[0]..=spec.scans_per_subject[1]);
        let mut scan_times = vec![0.0];
        for _ in 1..n_scans {
            let gap =
                rng.random_range(spec.visit_spacing_years[0]..=spec.visit_spacing_years[1]);
            scan_times.push(scan_times.last().unwrap() + gap);
        }

        for (k, &t) in scan_times.iter().enumerate() {
            let vol = render_subject(spec, &anatomy, t);
            let rel = PathBuf::from(format!("images/{sid}_s{k}.nii.gz"));
            save_volume(&vol, &out_dir.join(&rel))?;
            records.push(ScanRecord {
                subject_id: sid.clone(),
                path: rel,
                age_at_scan: anatomy.baseline_age + t,
                status: anatomy.status,
                time_years: t,
            });
        }

        save_volume(
            &ventricle_mask(spec, &anatomy),
            &masks.join(format!("{sid}_ventricle.nii.gz")),
        )?;
        save_volume(
            &hippocampus_mask(spec, &anatomy),
            &masks.join(format!("{sid}_hippocampus.nii.gz")),
        )?;

        let baseline = render_geometry(spec, &anatomy, 0.0);
        for (acc, v) in template_sum.iter_mut().zip(baseline.data()) {
            *acc += *v as f64;
        }
        subjects.push(SubjectScans {
            anatomy,
            scan_times,
        });
    }

    let template_data: Vec<f32> = template_sum
        .iter()
        .map(|s| (s / spec.cohort_size as f64) as f32)
        .collect();
    let template = Volume::centered([n, n, n], spec.voxel_size_mm, template_data)?;
    save_volume(&template, &out_dir.join("template.nii.gz"))?;

    dataio::write_manifest(&records, &out_dir.join("manifest.csv"))?;

    let cohort = CohortDescription {
        spec: spec.clone(),
        subjects,
    };
    let cohort_path = out_dir.join("cohort.json");
    let json = serde_json::to_string_pretty(&cohort).expect("cohort serializes");
    fs::write(&cohort_path, json).map_err(|e| Error::io(&cohort_path, e))?;
    Ok(cohort)
}
