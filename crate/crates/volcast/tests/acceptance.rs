//! Acceptance gate: ten numbered criteria covering gradients, the KL
//! term, rigid projection, the SVD baseline, pair construction, the
//! end-to-end phantom benchmark, the status classifier, trajectory
//! direction, the flow operators, and determinism.
//!
//! Each criterion prints one `criterion N (...): PASS` line (visible
//! with `--nocapture`); a failure panics with the measured numbers.
//! Criteria 6-8 share one trained model, cached under the target
//! directory and keyed by its configuration, so only the first run
//! pays the training cost.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use volcast::analysis::{FlowField, RoiMask, divergence, optical_flow, roi_mse};
use volcast::baselines::{SvdTrainingPair, fit_svd, identity_predict, predict_svd};
use volcast::cvae::{
    ConditioningVector, CvaeModel, Gradients, LatentGaussian, ModelConfig, checkpoint,
    kl_divergence,
};
use volcast::dataio::{
    ImagePair, ScanRecord, Standardizer, SubjectSplit, Volume, build_pairs, load_volume,
};
use volcast::predictor::{LatentMode, TrajectoryRequest, posterior_from_means, predict_future,
    status_posterior, trajectory};
use volcast::registration::{AffineTransform, grid_points, project_to_rigid};
use volcast::seeds;

use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

// pinned tolerances and thresholds, one per criterion
const GRADIENT_MAX_REL_ERR: f64 = 1e-4;
const KL_MC_REL_TOL: f64 = 0.01;
const PROCRUSTES_REL_TOL: f64 = 1e-8;
const ROTATION_ORTHO_TOL: f64 = 1e-6;
const SVD_INVERSE_REL_ERR: f64 = 1e-6;
const PAIR_CASES: usize = 1000;
const WIN_RATE_MIN: f64 = 0.70;
const CLASSIFIER_ACCURACY_MIN: f64 = 0.80;
const POSTERIOR_CLOSED_FORM_TOL: f64 = 1e-12;
const TRAJECTORY_MIN_STEPS: usize = 8; // of 9
const DIVERGENCE_TOL: f64 = 1e-10;
const FLOW_ENDPOINT_ERR_MAX: f64 = 0.25;
const EPOCH_LOSS_REL_TOL: f64 = 1e-6;

const BIN: &str = env!("CARGO_BIN_EXE_volcast");

fn normal(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_volume(seed: u64, s: usize) -> Volume {
    let mut rng = seeds::rng(seed, "accept-vol", 0);
    let data: Vec<f32> = (0..s * s * s).map(|_| (normal(&mut rng) * 0.3) as f32).collect();
    Volume::centered([s, s, s], 1.0, data).unwrap()
}

// ---------------------------------------------------------------------------
// criterion 1

#[test]
fn c01_elbo_gradients_match_finite_differences() {
    let config = ModelConfig {
        latent_dim: 2,
        encoder_blocks: 2,
        channels: vec![2, 4],
        groupnorm_groups: 2,
        image_size: 8,
        ..ModelConfig::default()
    };
    let model = CvaeModel::init(config, 1301).unwrap();
    let base = random_volume(11, 8);
    let target = random_volume(12, 8);
    let cond = ConditioningVector {
        age_std: 0.4,
        delta_t_std: -0.9,
        status: 2.0,
    };
    let noise = vec![0.62, -1.13];

    let mut grads = Gradients::zeros_like(&model.params);
    model.loss_and_gradients(&base, &target, &cond, &noise, &mut grads).unwrap();

    // Central differences over an epsilon ladder. A wrong analytic gradient
    // disagrees with the finite difference at every step size; a spurious
    // disagreement appears only above a ReLU/maxpool kink distance (large
    // eps) or below the f64 cancellation floor (small eps), so the best
    // step of the three is the fair estimate.
    let eps_ladder = [1e-6, 1e-5, 1e-7];
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        for i in 0..model.params.get(name).len() {
            let analytic = grads.get(name)[i];
            let mut best = f64::INFINITY;
            let mut best_fd = 0.0;
            for eps in eps_ladder {
                let mut m = model.clone();
                let mut sink = Gradients::zeros_like(&m.params);
                let orig = m.params.get(name).data[i];
                m.params.get_mut(name).data[i] = orig + eps;
                let (up, _, _) =
                    m.loss_and_gradients(&base, &target, &cond, &noise, &mut sink).unwrap();
                m.params.get_mut(name).data[i] = orig - eps;
                sink.zero();
                let (down, _, _) =
                    m.loss_and_gradients(&base, &target, &cond, &noise, &mut sink).unwrap();
                let fd = (up - down) / (2.0 * eps);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
                if rel < best {
                    best = rel;
                    best_fd = fd;
                }
                if best < GRADIENT_MAX_REL_ERR {
                    break;
                }
            }
            assert!(
                best < GRADIENT_MAX_REL_ERR,
                "criterion 1 (gradient check): FAIL at {name}[{i}]: fd {best_fd:.8} vs analytic {analytic:.8} (rel {best:.2e})"
            );
            worst = worst.max(best);
            checked += 1;
        }
    }
    println!(
        "criterion 1 (gradient check): PASS — {checked} parameters, max relative error {worst:.2e} < {GRADIENT_MAX_REL_ERR:.0e}"
    );
}

// ---------------------------------------------------------------------------
// criterion 2

#[test]
fn c02_kl_closed_form_matches_monte_carlo() {
    let d = 6;
    let samples = 1_000_000usize;
    let mut rng = seeds::rng(2026, "accept-kl", 0);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let mean: Vec<f64> = (0..d)
            .map(|_| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * rng.random_range(0.5..2.0)
            })
            .collect();
        let logvar: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let g = LatentGaussian {
            mean: mean.clone(),
            logvar: logvar.clone(),
        };
        let closed = kl_divergence(&g);

        // KL(q || p) = E_q[log q(z) - log p(z)], z = mu + sigma * eps
        let sigma: Vec<f64> = logvar.iter().map(|lv| (lv / 2.0).exp()).collect();
        let mut acc = 0.0f64;
        for _ in 0..samples {
            let mut term = 0.0;
            for j in 0..d {
                let e = normal(&mut rng);
                let z = mean[j] + sigma[j] * e;
                term += 0.5 * (z * z - e * e - logvar[j]);
            }
            acc += term;
        }
        let mc = acc / samples as f64;
        let rel = (mc - closed).abs() / closed.abs();
        assert!(
            rel < KL_MC_REL_TOL,
            "criterion 2 (KL oracle): FAIL case {case}: closed {closed:.6} vs MC {mc:.6} (rel {rel:.4})"
        );
        worst = worst.max(rel);
    }
    println!(
        "criterion 2 (KL oracle): PASS — 20 cases x {samples} samples, max relative gap {worst:.4} < {KL_MC_REL_TOL}"
    );
}

// ---------------------------------------------------------------------------
// criterion 3

/// Sum over grid points of ||(La - Lb) p + (ta - tb)||^2 from the grid's
/// zeroth/first/second moments, so candidate transforms cost O(1).
struct GridMoments {
    n: f64,
    s: [f64; 3],
    m: [[f64; 3]; 3],
}

impl GridMoments {
    fn new(points: &[[f64; 3]]) -> Self {
        let mut s = [0.0; 3];
        let mut m = [[0.0; 3]; 3];
        for p in points {
            for a in 0..3 {
                s[a] += p[a];
                for b in 0..3 {
                    m[a][b] += p[a] * p[b];
                }
            }
        }
        GridMoments {
            n: points.len() as f64,
            s,
            m,
        }
    }

    fn sse(&self, a: &AffineTransform, b: &AffineTransform) -> f64 {
        let mut d = [[0.0; 3]; 3];
        let mut e = [0.0; 3];
        for r in 0..3 {
            e[r] = a.translation[r] - b.translation[r];
            for c in 0..3 {
                d[r][c] = a.linear[r][c] - b.linear[r][c];
            }
        }
        let mut sse = self.n * (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]);
        for r in 0..3 {
            for c in 0..3 {
                // tr(D M D^T) with symmetric M
                for k in 0..3 {
                    sse += d[r][c] * self.m[c][k] * d[r][k];
                }
                sse += 2.0 * e[r] * d[r][c] * self.s[c];
            }
        }
        sse
    }
}

fn quaternion_rotation(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            for k in 0..3 {
                out[r][c] += a[r][k] * b[k][c];
            }
        }
    }
    out
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[test]
fn c03_rigid_projection_beats_random_candidates() {
    let like = Volume::centered([16, 16, 16], 1.0, vec![0.0; 16 * 16 * 16]).unwrap();
    let points = grid_points(&like);
    let moments = GridMoments::new(&points);
    let mut rng = seeds::rng(33, "accept-procrustes", 0);
    let candidates_per_affine = 100_000usize;
    let mut worst_margin = f64::INFINITY;

    for case in 0..100 {
        let mut linear = [[0.0; 3]; 3];
        for (r, row) in linear.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = if r == c { 1.0 } else { 0.0 };
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let translation = [
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
        ];
        let affine = AffineTransform {
            linear,
            translation,
        };

        let rigid = project_to_rigid(&affine, &points).unwrap();
        let r = rigid.rotation;
        let rtr = mat_mul(&transpose(&r), &r);
        for (a, row) in rtr.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (v - want).abs() < ROTATION_ORTHO_TOL,
                    "criterion 3 (rigid projection): FAIL case {case}: R^T R [{a}][{b}] = {v}"
                );
            }
        }
        let det = det3(&r);
        assert!(
            (det - 1.0).abs() < ROTATION_ORTHO_TOL,
            "criterion 3 (rigid projection): FAIL case {case}: det R = {det}"
        );

        let closed = moments.sse(&affine, &rigid.to_affine());
        let mut best_random = f64::INFINITY;
        for k in 0..candidates_per_affine {
            let cand_rot = if k % 2 == 0 {
                quaternion_rotation([
                    normal(&mut rng),
                    normal(&mut rng),
                    normal(&mut rng),
                    normal(&mut rng),
                ])
            } else {
                // small perturbation of the closed-form optimum
                let tiny = quaternion_rotation([
                    1.0,
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                ]);
                mat_mul(&r, &tiny)
            };
            let cand_t = if k % 2 == 0 {
                [
                    rng.random_range(-6.0..6.0),
                    rng.random_range(-6.0..6.0),
                    rng.random_range(-6.0..6.0),
                ]
            } else {
                [
                    rigid.translation[0] + rng.random_range(-0.1..0.1),
                    rigid.translation[1] + rng.random_range(-0.1..0.1),
                    rigid.translation[2] + rng.random_range(-0.1..0.1),
                ]
            };
            let cand = AffineTransform {
                linear: cand_rot,
                translation: cand_t,
            };
            let sse = moments.sse(&affine, &cand);
            if sse < best_random {
                best_random = sse;
            }
        }
        assert!(
            closed <= best_random * (1.0 + PROCRUSTES_REL_TOL),
            "criterion 3 (rigid projection): FAIL case {case}: closed-form SSE {closed:.9} exceeds best random candidate {best_random:.9}"
        );
        worst_margin = worst_margin.min(best_random - closed);
    }
    println!(
        "criterion 3 (rigid projection): PASS — 100 affines x {candidates_per_affine} candidates, smallest margin to best random rigid {worst_margin:.3e}"
    );
}

fn transpose(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = m[c][r];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// criterion 4

#[test]
fn c04_svd_with_full_rank_reproduces_training_targets() {
    let n = 8usize;
    let s = 8usize; // 8^3 = 512 voxels
    let mut rng = seeds::rng(44, "accept-svd", 0);
    let mut pairs = Vec::new();
    for i in 0..n {
        let first = random_volume(100 + i as u64, s);
        let last = random_volume(200 + i as u64, s);
        pairs.push(SvdTrainingPair {
            first,
            last,
            age: rng.random_range(60.0..85.0),
            status: rng.random_range(0.0..5.0),
            elapsed: rng.random_range(0.5..8.0),
        });
    }
    let model = fit_svd(&pairs, n).unwrap();
    let mut worst = 0.0f64;
    for pair in &pairs {
        let pred = predict_svd(&model, &pair.first, pair.age, pair.status, pair.elapsed).unwrap();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (p, t) in pred.data().iter().zip(pair.last.data()) {
            let d = (*p - *t) as f64;
            num += d * d;
            den += (*t as f64) * (*t as f64);
        }
        let rel = (num / den).sqrt();
        assert!(
            rel < SVD_INVERSE_REL_ERR,
            "criterion 4 (SVD exact inverse): FAIL: relative error {rel:.3e}"
        );
        worst = worst.max(rel);
    }
    println!(
        "criterion 4 (SVD exact inverse): PASS — k = N = {n}, p = {}, worst relative error {worst:.3e} < {SVD_INVERSE_REL_ERR:.0e}",
        s * s * s
    );
}

// ---------------------------------------------------------------------------
// criterion 5

#[test]
fn c05_pair_construction_combinatorics() {
    let mut rng = seeds::rng(55, "accept-pairs", 0);
    for case in 0..PAIR_CASES {
        let n = rng.random_range(1..=6usize);
        let mut t = 0.0f64;
        let mut records = Vec::new();
        for k in 0..n {
            if k > 0 {
                t += rng.random_range(0.5..2.0);
            }
            records.push(ScanRecord {
                subject_id: "subj".into(),
                path: PathBuf::from(format!("images/subj_s{k}.nii.gz")),
                age_at_scan: 70.0 + t,
                status: 3,
                time_years: t,
            });
        }
        let pairs = build_pairs(&records).unwrap();
        assert_eq!(
            pairs.len(),
            n * n,
            "criterion 5 (pair combinatorics): FAIL case {case}: {} pairs from {n} scans",
            pairs.len()
        );
        let self_pairs = pairs
            .iter()
            .filter(|p| p.base.path == p.target.path)
            .collect::<Vec<_>>();
        assert_eq!(self_pairs.len(), n, "criterion 5 (pair combinatorics): FAIL case {case}");
        assert!(
            self_pairs.iter().all(|p| p.delta_t == 0.0),
            "criterion 5 (pair combinatorics): FAIL case {case}: self pair with nonzero delta_t"
        );
        let mut dt: BTreeMap<(&Path, &Path), f64> = BTreeMap::new();
        for p in &pairs {
            dt.insert((p.base.path.as_path(), p.target.path.as_path()), p.delta_t);
        }
        for ((b, t2), d) in &dt {
            let back = dt[&(*t2, *b)];
            assert_eq!(
                back, -*d,
                "criterion 5 (pair combinatorics): FAIL case {case}: delta_t not antisymmetric"
            );
        }
    }
    println!(
        "criterion 5 (pair combinatorics): PASS — {PAIR_CASES} random subjects, n^2 pairs, n self-pairs, antisymmetric delta_t"
    );
}

// ---------------------------------------------------------------------------
// shared trained fixture for criteria 6-8

const FIXTURE_CONFIG: &str = r#"
seed = 11
run_dir = "__RUN__"

[phantom]
grid_size = 32
cohort_size = 60

[model]
latent_dim = 8
encoder_blocks = 2
channels = [4, 8]
groupnorm_groups = 4
image_size = 32

[train]
learning_rate = 1e-3
batch_size = 4
max_epochs = 40
patience = 10
checkpoint_every = 10

[evaluation]
holdout_per_status = 2
val_per_status = 1
min_forward_years = 2.0
"#;

struct Fixture {
    cohort: PathBuf,
    model: CvaeModel,
    std: Standardizer,
    split: SubjectSplit,
    test_pairs: Vec<ImagePair>,
    records: Vec<ScanRecord>,
}

static FIXTURE: LazyLock<Fixture> = LazyLock::new(build_fixture);

fn run_cli(config: &Path, args: &[&str]) {
    let out = std::process::Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn volcast");
    assert!(
        out.status.success(),
        "fixture stage {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn build_fixture() -> Fixture {
    let key = seeds::derive(0, FIXTURE_CONFIG, 0);
    let cache = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("accept-{key:016x}"));
    let run = cache.join("run");
    let ckpt = run.join("models/cvae/best.ckpt");
    if !ckpt.exists() {
        let _ = fs::remove_dir_all(&cache);
        fs::create_dir_all(&cache).unwrap();
        let config = cache.join("accept.toml");
        fs::write(&config, FIXTURE_CONFIG.replace("__RUN__", run.to_str().unwrap())).unwrap();
        eprintln!("[acceptance] training shared fixture (one-time, cached in {})", cache.display());
        run_cli(&config, &["phantom-gen"]);
        run_cli(&config, &["prep-pairs"]);
        run_cli(&config, &["train"]);
    }
    let (model, _) = checkpoint::load(&ckpt).unwrap();
    let std = Standardizer::load(&run.join("pairs/standardizer.json")).unwrap();
    let split = SubjectSplit::load(&run.join("pairs/split.json")).unwrap();
    let test_pairs: Vec<ImagePair> =
        serde_json::from_str(&fs::read_to_string(run.join("pairs/test_pairs.json")).unwrap())
            .unwrap();
    let records = volcast::dataio::read_manifest(&run.join("cohort/manifest.csv")).unwrap();
    Fixture {
        cohort: run.join("cohort"),
        model,
        std,
        split,
        test_pairs,
        records,
    }
}

impl Fixture {
    fn forward_pairs(&self) -> Vec<&ImagePair> {
        self.test_pairs.iter().filter(|p| p.delta_t >= 2.0).collect()
    }

    fn volume(&self, rec: &ScanRecord) -> Volume {
        load_volume(&self.cohort.join(&rec.path)).unwrap()
    }

    fn ventricle_mask(&self, subject: &str) -> RoiMask {
        let vol =
            load_volume(&self.cohort.join(format!("masks/{subject}_ventricle.nii.gz"))).unwrap();
        RoiMask::from_volume("ventricles", &vol).unwrap()
    }
}

// ---------------------------------------------------------------------------
// criterion 6

#[test]
fn c06_cvae_beats_identity_on_heldout_forward_pairs() {
    let fx = &*FIXTURE;
    let pairs = fx.forward_pairs();
    assert!(pairs.len() >= 10, "only {} held-out forward pairs", pairs.len());
    let whole = RoiMask::whole([32, 32, 32]);
    let mut wins_whole = 0usize;
    let mut wins_vent = 0usize;
    for pair in &pairs {
        let base = fx.volume(&pair.base);
        let target = fx.volume(&pair.target);
        let pred = predict_future(
            &fx.model,
            &base,
            pair.age,
            pair.status,
            pair.delta_t,
            &fx.std,
            &LatentMode::Zero,
        )
        .unwrap();
        let ident = identity_predict(&base);
        let vent = fx.ventricle_mask(&pair.subject_id);
        if roi_mse(&pred, &target, &whole).unwrap() < roi_mse(&ident, &target, &whole).unwrap() {
            wins_whole += 1;
        }
        if roi_mse(&pred, &target, &vent).unwrap() < roi_mse(&ident, &target, &vent).unwrap() {
            wins_vent += 1;
        }
    }
    let n = pairs.len();
    let fw = wins_whole as f64 / n as f64;
    let fv = wins_vent as f64 / n as f64;
    assert!(
        fw >= WIN_RATE_MIN,
        "criterion 6 (phantom benchmark): FAIL: whole-volume win rate {fw:.2} ({wins_whole}/{n})"
    );
    assert!(
        fv >= WIN_RATE_MIN,
        "criterion 6 (phantom benchmark): FAIL: ventricle win rate {fv:.2} ({wins_vent}/{n})"
    );
    println!(
        "criterion 6 (phantom benchmark): PASS — {n} held-out forward pairs, win rate vs identity: whole {fw:.2}, ventricles {fv:.2} (threshold {WIN_RATE_MIN})"
    );
}

// ---------------------------------------------------------------------------
// criterion 7

#[test]
fn c07_status_classifier_separates_extreme_statuses() {
    // closed-form two-way posterior examples
    let p0 = posterior_from_means(&[0.0, 0.0], &[2.0f64.sqrt(), 0.0]);
    let want = 1.0 / (1.0 + (-1.0f64).exp());
    assert!(
        (p0 - want).abs() < POSTERIOR_CLOSED_FORM_TOL,
        "criterion 7 (status classifier): FAIL closed form: {p0} vs {want}"
    );
    // log-domain stability across a ||mu||^2 difference of 200
    let big: Vec<f64> = vec![(200.0f64 / 2.0).sqrt(); 2];
    let p_small = posterior_from_means(&big, &[0.0, 0.0]);
    let p_large = posterior_from_means(&[0.0, 0.0], &big);
    assert!(p_small.is_finite() && p_small > 0.0 && p_small < 1e-40);
    assert!((p_large - 1.0).abs() < 1e-12 && p_large <= 1.0);

    let fx = &*FIXTURE;
    let status_of = |sid: &str| -> u8 {
        fx.records.iter().find(|r| r.subject_id == sid).unwrap().status
    };
    let pairs: Vec<&ImagePair> = fx
        .forward_pairs()
        .into_iter()
        .filter(|p| {
            let s = status_of(&p.subject_id);
            s == 0 || s == 5
        })
        .collect();
    assert!(pairs.len() >= 5, "only {} extreme-status pairs", pairs.len());
    let mut correct = 0usize;
    for pair in &pairs {
        let base = fx.volume(&pair.base);
        let target = fx.volume(&pair.target);
        let post = status_posterior(
            &fx.model,
            &base,
            &target,
            pair.age,
            pair.delta_t,
            &fx.std,
            (0, 5),
        )
        .unwrap();
        let truth = status_of(&pair.subject_id);
        let predicted = if post.p_null > 0.5 { 0 } else { 5 };
        if predicted == truth {
            correct += 1;
        }
    }
    let acc = correct as f64 / pairs.len() as f64;
    assert!(
        acc >= CLASSIFIER_ACCURACY_MIN,
        "criterion 7 (status classifier): FAIL: accuracy {acc:.2} ({correct}/{})",
        pairs.len()
    );
    println!(
        "criterion 7 (status classifier): PASS — accuracy {acc:.2} on {} pairs (threshold {CLASSIFIER_ACCURACY_MIN}); closed-form p_0 within {POSTERIOR_CLOSED_FORM_TOL:.0e}",
        pairs.len()
    );
}

// ---------------------------------------------------------------------------
// criterion 8

#[test]
fn c08_trajectory_expands_ventricles_monotonically() {
    let fx = &*FIXTURE;
    let status_of = |sid: &str| -> u8 {
        fx.records.iter().find(|r| r.subject_id == sid).unwrap().status
    };
    let sid = fx
        .split
        .test
        .iter()
        .find(|s| status_of(s) == 5)
        .expect("a held-out status-5 subject");
    let rec = fx
        .records
        .iter()
        .filter(|r| &r.subject_id == sid)
        .min_by(|a, b| a.time_years.total_cmp(&b.time_years))
        .unwrap();
    let base = fx.volume(rec);
    let request = TrajectoryRequest {
        age: rec.age_at_scan,
        status: 5,
        horizons: (1..=10).map(|h| h as f64).collect(),
        latent: LatentMode::Zero,
    };
    let vols = trajectory(&fx.model, &base, &request, &fx.std).unwrap();
    assert_eq!(vols.len(), 10);
    let mask = fx.ventricle_mask(sid);

    let mut positive_divergence = 0usize;
    let mut nondecreasing_proxy = 0usize;
    let mut mean_divs = Vec::new();
    for w in vols.windows(2) {
        let flow = optical_flow(&w[0].1, &w[1].1, 0.5, 400).unwrap();
        let div = divergence(&flow);
        let mean_div: f64 =
            mask.indices().map(|i| div[i]).sum::<f64>() / mask.count() as f64;
        mean_divs.push(mean_div);
        if mean_div > 0.0 {
            positive_divergence += 1;
        }
        let sum_a: f64 = mask.indices().map(|i| w[0].1.data()[i] as f64).sum();
        let sum_b: f64 = mask.indices().map(|i| w[1].1.data()[i] as f64).sum();
        if sum_b >= sum_a {
            nondecreasing_proxy += 1;
        }
    }
    assert!(
        positive_divergence >= TRAJECTORY_MIN_STEPS,
        "criterion 8 (trajectory direction): FAIL: positive ROI divergence in {positive_divergence}/9 steps (means {mean_divs:?})"
    );
    assert!(
        nondecreasing_proxy >= TRAJECTORY_MIN_STEPS,
        "criterion 8 (trajectory direction): FAIL: ventricle intensity proxy non-decreasing in {nondecreasing_proxy}/9 steps"
    );
    println!(
        "criterion 8 (trajectory direction): PASS — subject {sid}: positive ROI flow divergence {positive_divergence}/9 steps, non-decreasing intensity proxy {nondecreasing_proxy}/9 steps"
    );
}

// ---------------------------------------------------------------------------
// criterion 9

#[test]
fn c09_flow_operators_are_calibrated() {
    // divergence of a constant field is zero everywhere
    let shape = [12usize, 12, 12];
    let n = shape[0] * shape[1] * shape[2];
    let constant = FlowField::new(shape, [vec![0.7; n], vec![-1.3; n], vec![0.2; n]]).unwrap();
    let div = divergence(&constant);
    assert!(
        div.iter().all(|d| d.abs() < DIVERGENCE_TOL),
        "criterion 9 (flow operators): FAIL: constant field divergence up to {:?}",
        div.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()))
    );

    // divergence of the identity field u(x) = x is exactly 3
    let mut u = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let i = x + shape[0] * (y + shape[1] * z);
                u[0][i] = x as f64;
                u[1][i] = y as f64;
                u[2][i] = z as f64;
            }
        }
    }
    let ident = FlowField::new(shape, u).unwrap();
    let div = divergence(&ident);
    assert!(
        div.iter().all(|d| (d - 3.0).abs() < DIVERGENCE_TOL),
        "criterion 9 (flow operators): FAIL: identity field divergence not 3"
    );

    // recover a known half-voxel shift of a smooth blob
    let s = 16usize;
    let blob = |cx: f64| -> Volume {
        let sigma2 = 2.0 * 3.0f64 * 3.0;
        // pushed x-fastest, matching the volume layout
        let mut data = Vec::with_capacity(s * s * s);
        for z in 0..s {
            for y in 0..s {
                for x in 0..s {
                    let d2 = (x as f64 - cx).powi(2)
                        + (y as f64 - 7.5).powi(2)
                        + (z as f64 - 7.5).powi(2);
                    data.push((-d2 / sigma2).exp() as f32);
                }
            }
        }
        Volume::centered([s, s, s], 1.0, data).unwrap()
    };
    let v1 = blob(7.5);
    let v2 = blob(8.0);
    let flow = optical_flow(&v1, &v2, 0.5, 2000).unwrap();
    let peak = v1.data().iter().cloned().fold(f32::MIN, f32::max);
    let mut epe_sum = 0.0f64;
    let mut count = 0usize;
    let (ux, uy, uz) = (flow.component(0), flow.component(1), flow.component(2));
    for (i, v) in v1.data().iter().enumerate() {
        if *v > 0.3 * peak {
            let e = (ux[i] - 0.5).powi(2) + uy[i].powi(2) + uz[i].powi(2);
            epe_sum += e.sqrt();
            count += 1;
        }
    }
    let epe = epe_sum / count as f64;
    assert!(
        epe < FLOW_ENDPOINT_ERR_MAX,
        "criterion 9 (flow operators): FAIL: mean endpoint error {epe:.3} voxels over {count} interior voxels"
    );
    println!(
        "criterion 9 (flow operators): PASS — divergence exact on constant/identity fields; half-voxel shift recovered with mean endpoint error {epe:.3} < {FLOW_ENDPOINT_ERR_MAX} voxels"
    );
}

// ---------------------------------------------------------------------------
// criterion 10

#[test]
fn c10_fixed_seed_reproduces_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut first: Option<(Vec<u8>, Vec<u8>, Vec<u8>, f64)> = None;
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let config = dir.path().join(format!("{name}.toml"));
        fs::write(
            &config,
            format!(
                r#"
seed = 5
run_dir = "{}"

[phantom]
grid_size = 28
cohort_size = 12
scans_per_subject = [2, 3]
visit_spacing_years = [0.6, 1.2]

[model]
latent_dim = 4
encoder_blocks = 2
channels = [2, 4]
groupnorm_groups = 2
image_size = 28

[train]
learning_rate = 1e-4
batch_size = 4
max_epochs = 1
patience = 1

[evaluation]
holdout_per_status = 1
val_per_status = 1
min_forward_years = 0.5
"#,
                run.display()
            ),
        )
        .unwrap();
        run_cli(&config, &["phantom-gen"]);
        run_cli(&config, &["prep-pairs"]);
        run_cli(&config, &["train"]);

        let manifest = fs::read(run.join("cohort/manifest.csv")).unwrap();
        let split = fs::read(run.join("pairs/split.json")).unwrap();
        let val_split = fs::read(run.join("pairs/val_split.json")).unwrap();
        let log = fs::read_to_string(run.join("models/cvae/train_log.csv")).unwrap();
        let row = log.lines().nth(1).expect("epoch 1 row");
        let train_total: f64 = row.split(',').nth(1).unwrap().parse().unwrap();

        match &first {
            None => first = Some((manifest, split, val_split, train_total)),
            Some((m, s, v, loss)) => {
                assert_eq!(*m, manifest, "criterion 10 (determinism): FAIL: manifests differ");
                assert_eq!(*s, split, "criterion 10 (determinism): FAIL: splits differ");
                assert_eq!(*v, val_split, "criterion 10 (determinism): FAIL: val splits differ");
                let rel = (loss - train_total).abs() / loss.abs();
                assert!(
                    rel <= EPOCH_LOSS_REL_TOL,
                    "criterion 10 (determinism): FAIL: epoch-1 loss {loss} vs {train_total} (rel {rel:.2e})"
                );
                println!(
                    "criterion 10 (determinism): PASS — identical manifests and splits; epoch-1 loss relative gap {rel:.2e} <= {EPOCH_LOSS_REL_TOL:.0e}"
                );
            }
        }
    }
}
