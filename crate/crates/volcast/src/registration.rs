//! Template-to-image affine registration with contrast matching, and
//! projection of the fitted affine onto the closest rigid transform.
//!
//! Direction convention: a transform maps *template* world coordinates to
//! *image* world coordinates. Resampling an image into template space
//! therefore pulls samples through the forward transform.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataio::Volume;
use crate::error::{Error, Result};

/// General linear map `x -> L x + t` over world coordinates (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub linear: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

/// Rotation + translation, `x -> R x + s`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let l = &self.linear;
        [
            l[0][0] * p[0] + l[0][1] * p[1] + l[0][2] * p[2] + self.translation[0],
            l[1][0] * p[0] + l[1][1] * p[1] + l[1][2] * p[2] + self.translation[1],
            l[2][0] * p[0] + l[2][1] * p[1] + l[2][2] * p[2] + self.translation[2],
        ]
    }

    pub fn det(&self) -> f64 {
        Matrix3::from_row_slice(&self.linear.concat()).determinant()
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let l = Matrix3::from_row_slice(&self.linear.concat());
        let inv = l
            .try_inverse()
            .ok_or_else(|| Error::Numerics("affine linear part is singular".into()))?;
        let t = Vector3::from_column_slice(&self.translation);
        let it = -(inv * t);
        Ok(AffineTransform {
            linear: mat3_to_rows(&inv),
            translation: [it[0], it[1], it[2]],
        })
    }
}

impl RigidTransform {
    pub fn to_affine(&self) -> AffineTransform {
        AffineTransform {
            linear: self.rotation,
            translation: self.translation,
        }
    }

    /// Max deviation of `R^T R` from the identity.
    pub fn orthogonality_defect(&self) -> f64 {
        let r = Matrix3::from_row_slice(&self.rotation.concat());
        let gram = r.transpose() * r;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - want).abs());
            }
        }
        worst
    }

    pub fn det(&self) -> f64 {
        Matrix3::from_row_slice(&self.rotation.concat()).determinant()
    }
}

fn mat3_to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[(i, j)];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// persistence

#[derive(Serialize, Deserialize)]
struct TransformJson {
    /// Row-major 3x3.
    linear: Vec<f64>,
    translation: [f64; 3],
    kind: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTransform {
    Affine(AffineTransform),
    Rigid(RigidTransform),
}

impl AnyTransform {
    pub fn to_affine(&self) -> AffineTransform {
        match self {
            AnyTransform::Affine(a) => a.clone(),
            AnyTransform::Rigid(r) => r.to_affine(),
        }
    }
}

pub fn save_transform(t: &AnyTransform, path: &Path) -> Result<()> {
    let (linear, translation, kind) = match t {
        AnyTransform::Affine(a) => (a.linear, a.translation, "affine"),
        AnyTransform::Rigid(r) => (r.rotation, r.translation, "rigid"),
    };
    let json = TransformJson {
        linear: linear.concat(),
        translation,
        kind: kind.into(),
    };
    let text = serde_json::to_string_pretty(&json).expect("transform serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_transform(path: &Path) -> Result<AnyTransform> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json: TransformJson = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: bad transform file: {e}", path.display())))?;
    if json.linear.len() != 9 {
        return Err(Error::Data(format!(
            "{}: transform linear part has {} entries, expected 9",
            path.display(),
            json.linear.len()
        )));
    }
    let mut linear = [[0.0; 3]; 3];
    for i in 0..3 {
        linear[i].copy_from_slice(&json.linear[3 * i..3 * i + 3]);
    }
    match json.kind.as_str() {
        "affine" => {
            let a = AffineTransform {
                linear,
                translation: json.translation,
            };
            if a.det().abs() < 1e-12 {
                return Err(Error::Data(format!(
                    "{}: affine transform is singular",
                    path.display()
                )));
            }
            Ok(AnyTransform::Affine(a))
        }
        "rigid" => {
            let r = RigidTransform {
                rotation: linear,
                translation: json.translation,
            };
            if r.orthogonality_defect() > 1e-6 || (r.det() - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "{}: rigid transform fails orthogonality/determinant check",
                    path.display()
                )));
            }
            Ok(AnyTransform::Rigid(r))
        }
        other => Err(Error::Data(format!(
            "{}: unknown transform kind {other:?}",
            path.display()
        ))),
    }
}

// ---------------------------------------------------------------------------
// rigid projection

/// Centroid and centered coordinate covariance of a point set.
#[derive(Debug, Clone)]
pub struct GridStats {
    pub centroid: [f64; 3],
    /// `C = sum (x - centroid)(x - centroid)^T`
    pub covariance: [[f64; 3]; 3],
    pub count: usize,
}

pub fn grid_stats(points: &[[f64; 3]]) -> Result<GridStats> {
    if points.len() < 4 {
        return Err(Error::Data(format!(
            "rigid projection needs >= 4 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    Ok(GridStats {
        centroid: c,
        covariance: cov,
        count: points.len(),
    })
}

/// World coordinates of every voxel of `vol`.
pub fn grid_points(vol: &Volume) -> Vec<[f64; 3]> {
    let [nx, ny, nz] = vol.shape;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out.push(vol.voxel_to_world([x as f64, y as f64, z as f64]));
            }
        }
    }
    out
}

/// Closest rigid transform to `a` over the point set, minimizing
/// `sum_x ||(Lx + t) - (Rx + s)||^2`. With centroid `x̄` and centered
/// covariance `C`, the optimum is `R = U diag(1,1,det(UV^T)) V^T` from the
/// SVD `U S V^T = L C`, and `s = (L - R) x̄ + t`.
pub fn project_to_rigid_stats(a: &AffineTransform, stats: &GridStats) -> Result<RigidTransform> {
    let c = Matrix3::from_row_slice(&stats.covariance.concat());
    let svd_c = c.svd(false, false);
    let max_sv = svd_c.singular_values.max();
    let min_sv = svd_c.singular_values.min();
    if !(max_sv > 0.0) || min_sv / max_sv < 1e-12 {
        return Err(Error::Numerics(
            "rigid projection: coordinate covariance is rank-deficient".into(),
        ));
    }
    let l = Matrix3::from_row_slice(&a.linear.concat());
    let m = l * c;
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let d = (u * vt).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let r = u * fix * vt;
    let xb = Vector3::from_column_slice(&stats.centroid);
    let t = Vector3::from_column_slice(&a.translation);
    let s = (l - r) * xb + t;
    Ok(RigidTransform {
        rotation: mat3_to_rows(&r),
        translation: [s[0], s[1], s[2]],
    })
}

pub fn project_to_rigid(a: &AffineTransform, points: &[[f64; 3]]) -> Result<RigidTransform> {
    project_to_rigid_stats(a, &grid_stats(points)?)
}

/// `sum_x ||(Lx + t) - (Rx + s)||^2` over the point set summarized by
/// `stats`, evaluated in closed form:
/// `tr(D C D^T) + n ||D x̄ + (t - s)||^2` with `D = L - R`.
pub fn projection_sse(a: &AffineTransform, r: &RigidTransform, stats: &GridStats) -> f64 {
    let d = Matrix3::from_row_slice(&a.linear.concat())
        - Matrix3::from_row_slice(&r.rotation.concat());
    let c = Matrix3::from_row_slice(&stats.covariance.concat());
    let quad = (d * c * d.transpose()).trace();
    let xb = Vector3::from_column_slice(&stats.centroid);
    let e = Vector3::from_column_slice(&a.translation) - Vector3::from_column_slice(&r.translation);
    let shift = d * xb + e;
    quad + stats.count as f64 * shift.norm_squared()
}

/// Uniformly distributed random rotation matrix (via a normalized
/// quaternion). Used by stochastic optimality checks.
pub fn random_rotation(rng: &mut impl rand::Rng) -> [[f64; 3]; 3] {
    use rand_distr::{Distribution, StandardNormal};
    let q: [f64; 4] = {
        let mut q = [0.0; 4];
        for v in &mut q {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        for v in &mut q {
            *v /= n;
        }
        q
    };
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
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

// ---------------------------------------------------------------------------
// affine registration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub max_iters: usize,
    /// Step along the normalized linear-part gradient (dimensionless).
    pub step_linear: f64,
    /// Step along the normalized translation gradient (mm).
    pub step_translation: f64,
    /// Convergence tolerance on the relative SSD decrease.
    pub tol: f64,
    /// Consecutive rejected proposals before declaring divergence.
    pub max_rejects: usize,
    /// Initialize translation from the intensity centers of mass.
    pub com_init: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            max_iters: 300,
            step_linear: 0.02,
            step_translation: 1.0,
            tol: 1e-9,
            max_rejects: 40,
            com_init: true,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("registration max_iters must be positive".into()));
        }
        if !(self.step_linear > 0.0) || !(self.step_translation > 0.0) {
            return Err(Error::Config("registration step sizes must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("registration tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegistrationReport {
    pub iterations: usize,
    pub initial_ssd: f64,
    pub final_ssd: f64,
    /// Contrast gain and offset fitted at the solution.
    pub gain: f64,
    pub offset: f64,
    pub in_field_fraction: f64,
}

/// Trilinear sample of `vol` at fractional voxel coordinates, with the
/// gradient in voxel units. `None` when outside the valid interpolation box.
fn sample_with_grad(vol: &Volume, p: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let [nx, ny, nz] = vol.shape;
    if !(p[0] >= 0.0
        && p[1] >= 0.0
        && p[2] >= 0.0
        && p[0] <= (nx - 1) as f64
        && p[1] <= (ny - 1) as f64
        && p[2] <= (nz - 1) as f64)
    {
        return None;
    }
    let clamp = |v: f64, n: usize| -> usize { (v.floor() as usize).min(n.saturating_sub(2)) };
    let x0 = clamp(p[0], nx);
    let y0 = clamp(p[1], ny);
    let z0 = clamp(p[2], nz);
    let fx = p[0] - x0 as f64;
    let fy = p[1] - y0 as f64;
    let fz = p[2] - z0 as f64;
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let z1 = (z0 + 1).min(nz - 1);
    let v = |x: usize, y: usize, z: usize| vol.at(x, y, z) as f64;
    let c000 = v(x0, y0, z0);
    let c100 = v(x1, y0, z0);
    let c010 = v(x0, y1, z0);
    let c110 = v(x1, y1, z0);
    let c001 = v(x0, y0, z1);
    let c101 = v(x1, y0, z1);
    let c011 = v(x0, y1, z1);
    let c111 = v(x1, y1, z1);
    let c00 = c000 + (c100 - c000) * fx;
    let c10 = c010 + (c110 - c010) * fx;
    let c01 = c001 + (c101 - c001) * fx;
    let c11 = c011 + (c111 - c011) * fx;
    let c0 = c00 + (c10 - c00) * fy;
    let c1 = c01 + (c11 - c01) * fy;
    let value = c0 + (c1 - c0) * fz;
    let gx = ((c100 - c000) * (1.0 - fy) + (c110 - c010) * fy) * (1.0 - fz)
        + ((c101 - c001) * (1.0 - fy) + (c111 - c011) * fy) * fz;
    let gy = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz;
    let gz = c1 - c0;
    Some((value, [gx, gy, gz]))
}

fn center_of_mass(vol: &Volume) -> [f64; 3] {
    let [nx, ny, nz] = vol.shape;
    let mut num = [0.0; 3];
    let mut den = 0.0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let w = (vol.at(x, y, z) as f64).max(0.0);
                let p = vol.voxel_to_world([x as f64, y as f64, z as f64]);
                for a in 0..3 {
                    num[a] += w * p[a];
                }
                den += w;
            }
        }
    }
    if den > 0.0 {
        [num[0] / den, num[1] / den, num[2] / den]
    } else {
        vol.voxel_to_world([
            (nx as f64 - 1.0) / 2.0,
            (ny as f64 - 1.0) / 2.0,
            (nz as f64 - 1.0) / 2.0,
        ])
    }
}

struct SsdEval {
    ssd: f64,
    gain: f64,
    offset: f64,
    in_field: usize,
    grad_linear: [[f64; 3]; 3],
    grad_translation: [f64; 3],
}

/// SSD (after the closed-form contrast fit) and its gradient w.r.t. (L, t).
fn evaluate(
    template_pts: &[([f64; 3], f64)],
    image: &Volume,
    world_to_voxel: &[[f64; 4]; 4],
    a: &AffineTransform,
    with_grad: bool,
) -> SsdEval {
    let mut pulled: Vec<(usize, f64, [f64; 3], [f64; 3])> =
        Vec::with_capacity(template_pts.len());
    // contrast normal equations: fit gain*T + offset ~ I over in-field voxels
    let (mut st, mut si, mut stt, mut sti, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (idx, (x, tval)) in template_pts.iter().enumerate() {
        let y = a.apply(*x);
        let u = [
            world_to_voxel[0][0] * y[0]
                + world_to_voxel[0][1] * y[1]
                + world_to_voxel[0][2] * y[2]
                + world_to_voxel[0][3],
            world_to_voxel[1][0] * y[0]
                + world_to_voxel[1][1] * y[1]
                + world_to_voxel[1][2] * y[2]
                + world_to_voxel[1][3],
            world_to_voxel[2][0] * y[0]
                + world_to_voxel[2][1] * y[1]
                + world_to_voxel[2][2] * y[2]
                + world_to_voxel[2][3],
        ];
        if let Some((ival, grad)) = sample_with_grad(image, u) {
            pulled.push((idx, ival, grad, *x));
            st += tval;
            si += ival;
            stt += tval * tval;
            sti += tval * ival;
            n += 1.0;
        }
    }
    let det = n * stt - st * st;
    let (gain, offset) = if det.abs() > 1e-12 * (n * stt).abs().max(1.0) {
        let g = (n * sti - st * si) / det;
        (g, (si - g * st) / n)
    } else {
        (1.0, if n > 0.0 { (si - st) / n } else { 0.0 })
    };

    let mut ssd = 0.0;
    let mut gl = [[0.0; 3]; 3];
    let mut gt = [0.0; 3];
    for (idx, ival, grad_voxel, x) in &pulled {
        let tval = template_pts[*idx].1;
        let r = gain * tval + offset - ival;
        ssd += r * r;
        if with_grad {
            // chain rule through voxel coords: dI/dy = M^T * dI/du
            let g = [
                world_to_voxel[0][0] * grad_voxel[0]
                    + world_to_voxel[1][0] * grad_voxel[1]
                    + world_to_voxel[2][0] * grad_voxel[2],
                world_to_voxel[0][1] * grad_voxel[0]
                    + world_to_voxel[1][1] * grad_voxel[1]
                    + world_to_voxel[2][1] * grad_voxel[2],
                world_to_voxel[0][2] * grad_voxel[0]
                    + world_to_voxel[1][2] * grad_voxel[1]
                    + world_to_voxel[2][2] * grad_voxel[2],
            ];
            for i in 0..3 {
                let c = -2.0 * r * g[i];
                gt[i] += c;
                for j in 0..3 {
                    gl[i][j] += c * x[j];
                }
            }
        }
    }
    SsdEval {
        ssd,
        gain,
        offset,
        in_field: pulled.len(),
        grad_linear: gl,
        grad_translation: gt,
    }
}

/// Fit the affine mapping template world coordinates to image world
/// coordinates by gradient descent on the contrast-adjusted SSD. Each
/// iteration first solves the linear contrast map (gain, offset) in closed
/// form, then takes a backtracking step on (L, t); accepted steps never
/// increase the SSD.
pub fn register_affine(
    template: &Volume,
    image: &Volume,
    cfg: &RegistrationConfig,
) -> Result<(AffineTransform, RegistrationReport)> {
    cfg.validate()?;
    if template.variance() < 1e-18 {
        return Err(Error::Data(
            "registration: template is constant; contrast fit is degenerate".into(),
        ));
    }
    if image.variance() < 1e-18 {
        return Err(Error::Data(
            "registration: image is constant; contrast fit is degenerate".into(),
        ));
    }

    let [nx, ny, nz] = template.shape;
    let mut template_pts = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let w = template.voxel_to_world([x as f64, y as f64, z as f64]);
                template_pts.push((w, template.at(x, y, z) as f64));
            }
        }
    }
    let world_to_voxel = image.world_to_voxel_matrix()?;

    let mut a = AffineTransform::identity();
    if cfg.com_init {
        let ct = center_of_mass(template);
        let ci = center_of_mass(image);
        for i in 0..3 {
            a.translation[i] = ci[i] - ct[i];
        }
    }

    let mut eval = evaluate(&template_pts, image, &world_to_voxel, &a, true);
    if (eval.in_field as f64) < 0.05 * template_pts.len() as f64 {
        return Err(Error::Data(format!(
            "registration: only {}/{} template voxels land inside the image",
            eval.in_field,
            template_pts.len()
        )));
    }
    let initial_ssd = eval.ssd;
    let mut alpha = 1.0;
    let mut rejects_in_a_row = 0usize;
    let mut iterations = 0usize;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        let gl_norm = eval
            .grad_linear
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let gt_norm = eval
            .grad_translation
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if gl_norm + gt_norm == 0.0 {
            break;
        }

        let mut accepted = false;
        while alpha > 1e-12 {
            let mut cand = a.clone();
            if gl_norm > 0.0 {
                for i in 0..3 {
                    for j in 0..3 {
                        cand.linear[i][j] -=
                            alpha * cfg.step_linear * eval.grad_linear[i][j] / gl_norm;
                    }
                }
            }
            if gt_norm > 0.0 {
                for i in 0..3 {
                    cand.translation[i] -=
                        alpha * cfg.step_translation * eval.grad_translation[i] / gt_norm;
                }
            }
            let cand_eval = evaluate(&template_pts, image, &world_to_voxel, &cand, true);
            if cand_eval.ssd < eval.ssd && cand_eval.in_field > 0 {
                let rel_drop = (eval.ssd - cand_eval.ssd) / eval.ssd.max(1e-300);
                a = cand;
                eval = cand_eval;
                accepted = true;
                rejects_in_a_row = 0;
                alpha = (alpha * 1.5).min(1.0);
                if rel_drop < cfg.tol {
                    iterations += 0; // converged on this accepted step
                    let report = RegistrationReport {
                        iterations,
                        initial_ssd,
                        final_ssd: eval.ssd,
                        gain: eval.gain,
                        offset: eval.offset,
                        in_field_fraction: eval.in_field as f64 / template_pts.len() as f64,
                    };
                    return Ok((a, report));
                }
                break;
            }
            alpha *= 0.5;
            rejects_in_a_row += 1;
            if rejects_in_a_row >= cfg.max_rejects {
                let grad_scale = (gl_norm + gt_norm) / eval.ssd.max(1e-300);
                if grad_scale > 1e-6 {
                    return Err(Error::Numerics(format!(
                        "registration diverged: {} consecutive rejected steps at iteration {} \
                         (ssd {:.6e}, |grad_L| {:.3e}, |grad_t| {:.3e}, step scale {:.3e})",
                        rejects_in_a_row, iterations, eval.ssd, gl_norm, gt_norm, alpha
                    )));
                }
                break;
            }
        }
        if !accepted {
            break; // step size exhausted at a (near-)stationary point
        }
    }

    let report = RegistrationReport {
        iterations,
        initial_ssd,
        final_ssd: eval.ssd,
        gain: eval.gain,
        offset: eval.offset,
        in_field_fraction: eval.in_field as f64 / template_pts.len() as f64,
    };
    Ok((a, report))
}

// ---------------------------------------------------------------------------
// resampling

/// Pull `source` onto the grid of `like` through `transform`, which maps
/// target (output) world coordinates to source world coordinates. Voxels
/// that land outside the source field of view are 0.
pub fn resample(source: &Volume, transform: &AffineTransform, like: &Volume) -> Result<Volume> {
    let world_to_voxel = source.world_to_voxel_matrix()?;
    let [nx, ny, nz] = like.shape;
    let mut out = Volume::new(
        like.shape,
        like.voxel_size,
        like.grid_to_world,
        vec![0.0; nx * ny * nz],
    )?;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let w = like.voxel_to_world([x as f64, y as f64, z as f64]);
                let s = transform.apply(w);
                let u = [
                    world_to_voxel[0][0] * s[0]
                        + world_to_voxel[0][1] * s[1]
                        + world_to_voxel[0][2] * s[2]
                        + world_to_voxel[0][3],
                    world_to_voxel[1][0] * s[0]
                        + world_to_voxel[1][1] * s[1]
                        + world_to_voxel[1][2] * s[2]
                        + world_to_voxel[1][3],
                    world_to_voxel[2][0] * s[0]
                        + world_to_voxel[2][1] * s[1]
                        + world_to_voxel[2][2] * s[2]
                        + world_to_voxel[2][3],
                ];
                out.set(x, y, z, source.sample_trilinear(u) as f32);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// crop + downsample

/// Crop `[min, min+size)` then block-mean downsample by `factor`.
/// `factor` must divide every cropped extent. The output affine keeps block
/// centers at their original world positions and scales the voxel size.
pub fn crop_downsample(
    vol: &Volume,
    crop_min: [usize; 3],
    crop_size: [usize; 3],
    factor: usize,
) -> Result<Volume> {
    if factor == 0 {
        return Err(Error::Config("downsample factor must be positive".into()));
    }
    for a in 0..3 {
        if crop_size[a] == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if crop_min[a] + crop_size[a] > vol.shape[a] {
            return Err(Error::Config(format!(
                "crop box [{}..{}) exceeds volume extent {} on axis {a}",
                crop_min[a],
                crop_min[a] + crop_size[a],
                vol.shape[a]
            )));
        }
        if crop_size[a] % factor != 0 {
            return Err(Error::Config(format!(
                "downsample factor {factor} does not divide cropped size {} on axis {a}",
                crop_size[a]
            )));
        }
    }
    let out_shape = [
        crop_size[0] / factor,
        crop_size[1] / factor,
        crop_size[2] / factor,
    ];
    let mut data = vec![0.0f32; out_shape[0] * out_shape[1] * out_shape[2]];
    let inv_block = 1.0 / (factor * factor * factor) as f64;
    for oz in 0..out_shape[2] {
        for oy in 0..out_shape[1] {
            for ox in 0..out_shape[0] {
                let mut sum = 0.0f64;
                for dz in 0..factor {
                    for dy in 0..factor {
                        for dx in 0..factor {
                            sum += vol.at(
                                crop_min[0] + ox * factor + dx,
                                crop_min[1] + oy * factor + dy,
                                crop_min[2] + oz * factor + dz,
                            ) as f64;
                        }
                    }
                }
                data[ox + out_shape[0] * (oy + out_shape[1] * oz)] = (sum * inv_block) as f32;
            }
        }
    }

    // new voxel (0,0,0) center sits at the mean of its source block centers
    let f = factor as f64;
    let mut affine = vol.grid_to_world;
    let origin_voxel = [
        crop_min[0] as f64 + (f - 1.0) / 2.0,
        crop_min[1] as f64 + (f - 1.0) / 2.0,
        crop_min[2] as f64 + (f - 1.0) / 2.0,
    ];
    let origin_world = vol.voxel_to_world(origin_voxel);
    for i in 0..3 {
        for j in 0..3 {
            affine[i][j] *= f;
        }
        affine[i][3] = origin_world[i];
    }
    let voxel_size = [
        vol.voxel_size[0] * f,
        vol.voxel_size[1] * f,
        vol.voxel_size[2] * f,
    ];
    Volume::new(out_shape, voxel_size, affine, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{self, PhantomSpec};
    use crate::seeds;

    fn test_image() -> Volume {
        let spec = PhantomSpec {
            grid_size: 24,
            cohort_size: 1,
            seed: 3,
            noise_sigma: 0.0,
            ..PhantomSpec::default()
        };
        let anatomy = phantom::sample_anatomy(&spec, 0);
        phantom::render_geometry(&spec, &anatomy, 0.0)
    }

    /// Shift content by `d` world mm: out(x) = in(x - d).
    fn shifted(vol: &Volume, d: [f64; 3]) -> Volume {
        let t = AffineTransform {
            linear: AffineTransform::identity().linear,
            translation: [-d[0], -d[1], -d[2]],
        };
        resample(vol, &t, vol).unwrap()
    }

    #[test]
    fn identity_is_a_fixed_point() {
        let vol = test_image();
        let (a, report) = register_affine(&vol, &vol, &RegistrationConfig::default()).unwrap();
        for i in 0..3 {
            assert!(a.translation[i].abs() < 0.2, "t = {:?}", a.translation);
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((a.linear[i][j] - want).abs() < 0.02);
            }
        }
        assert!(report.final_ssd <= report.initial_ssd);
    }

    #[test]
    fn recovers_two_voxel_shift() {
        let vol = test_image();
        let d = [2.0 * vol.voxel_size[0], 0.0, 0.0];
        let image = shifted(&vol, d);
        let (a, _) = register_affine(&vol, &image, &RegistrationConfig::default()).unwrap();
        // the transform maps template coords to image coords: expect t ~ +d
        let err = (a.translation[0] - d[0]).hypot(a.translation[1]).hypot(a.translation[2]);
        assert!(
            err < 0.5 * vol.voxel_size[0],
            "translation {:?}, want {d:?}",
            a.translation
        );
    }

    #[test]
    fn contrast_change_yields_near_identity_and_zero_ssd() {
        let vol = test_image();
        let mut image = vol.clone();
        for v in image.data_mut() {
            *v = 2.0 * *v + 5.0;
        }
        let (a, report) = register_affine(&vol, &image, &RegistrationConfig::default()).unwrap();
        assert!((report.gain - 2.0).abs() < 0.05, "gain {}", report.gain);
        assert!((report.offset - 5.0).abs() < 0.1, "offset {}", report.offset);
        assert!(
            report.final_ssd < 1e-6 * report.initial_ssd.max(1.0),
            "ssd {}",
            report.final_ssd
        );
        for i in 0..3 {
            assert!(a.translation[i].abs() < 0.2);
        }
    }

    #[test]
    fn constant_image_is_rejected() {
        let vol = test_image();
        let flat = Volume::zeros(vol.shape, vol.voxel_size[0]);
        assert!(register_affine(&vol, &flat, &RegistrationConfig::default()).is_err());
        assert!(register_affine(&flat, &vol, &RegistrationConfig::default()).is_err());
    }

    fn cube_grid_points(n: usize, spacing: f64) -> Vec<[f64; 3]> {
        let c = (n as f64 - 1.0) / 2.0;
        let mut pts = Vec::new();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    pts.push([
                        (x as f64 - c) * spacing,
                        (y as f64 - c) * spacing,
                        (z as f64 - c) * spacing,
                    ]);
                }
            }
        }
        pts
    }

    #[test]
    fn already_rigid_is_a_fixed_point() {
        let mut rng = seeds::rng(5, "rigid-fixed", 0);
        let rot = random_rotation(&mut rng);
        let a = AffineTransform {
            linear: rot,
            translation: [3.0, -1.0, 0.5],
        };
        let pts = cube_grid_points(8, 2.0);
        let r = project_to_rigid(&a, &pts).unwrap();
        for i in 0..3 {
            assert!((r.translation[i] - a.translation[i]).abs() < 1e-10);
            for j in 0..3 {
                assert!((r.rotation[i][j] - a.linear[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn isotropic_scale_projects_to_identity_rotation() {
        let a = AffineTransform {
            linear: [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]],
            translation: [0.0; 3],
        };
        let pts = cube_grid_points(6, 1.0); // centered grid, centroid 0
        let r = project_to_rigid(&a, &pts).unwrap();
        for i in 0..3 {
            assert!(r.translation[i].abs() < 1e-10, "s = {:?}", r.translation);
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((r.rotation[i][j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn closed_form_beats_random_rigid_candidates() {
        let pts = cube_grid_points(8, 1.5);
        let stats = grid_stats(&pts).unwrap();
        let mut rng = seeds::rng(5, "rigid-search", 1);
        use rand::RngExt;
        for case in 0..5 {
            let mut linear = random_rotation(&mut rng);
            // add shear and anisotropic scale
            for i in 0..3 {
                for j in 0..3 {
                    linear[i][j] += rng.random_range(-0.3..0.3);
                }
                linear[i][i] *= rng.random_range(0.8..1.3);
            }
            let a = AffineTransform {
                linear,
                translation: [
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ],
            };
            let r = project_to_rigid_stats(&a, &stats).unwrap();
            assert!(r.orthogonality_defect() < 1e-6);
            assert!((r.det() - 1.0).abs() < 1e-6);
            let best = projection_sse(&a, &r, &stats);
            for _ in 0..2000 {
                let cand = RigidTransform {
                    rotation: random_rotation(&mut rng),
                    translation: [
                        rng.random_range(-6.0..6.0),
                        rng.random_range(-6.0..6.0),
                        rng.random_range(-6.0..6.0),
                    ],
                };
                let sse = projection_sse(&a, &cand, &stats);
                assert!(
                    best <= sse * (1.0 + 1e-8),
                    "case {case}: closed form {best} vs candidate {sse}"
                );
            }
            // spot-check the closed-form SSE expansion against a direct sum
            let direct: f64 = pts
                .iter()
                .map(|p| {
                    let u = a.apply(*p);
                    let v = r.to_affine().apply(*p);
                    (u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)
                })
                .sum();
            assert!((direct - best).abs() <= 1e-9 * direct.max(1.0));
        }
    }

    #[test]
    fn coplanar_points_are_degenerate() {
        let mut pts = Vec::new();
        for y in 0..5 {
            for x in 0..5 {
                pts.push([x as f64, y as f64, 0.0]);
            }
        }
        let a = AffineTransform::identity();
        assert!(project_to_rigid(&a, &pts).is_err());
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let vol = test_image();
        let out = resample(&vol, &AffineTransform::identity(), &vol).unwrap();
        assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn resample_one_voxel_shift_moves_grid_values() {
        let vol = test_image();
        let dx = vol.voxel_size[0];
        // transform target world -> source world: sample at x + dx,
        // so out(x,y,z) = in(x+1,y,z)
        let t = AffineTransform {
            linear: AffineTransform::identity().linear,
            translation: [dx, 0.0, 0.0],
        };
        let out = resample(&vol, &t, &vol).unwrap();
        let [nx, ny, nz] = vol.shape;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx - 1 {
                    assert_eq!(out.at(x, y, z), vol.at(x + 1, y, z));
                }
                assert_eq!(out.at(nx - 1, y, z), 0.0); // out of field
            }
        }
    }

    #[test]
    fn rotation_round_trip_is_close() {
        let vol = test_image();
        let theta: f64 = 0.3;
        let (c, s) = (theta.cos(), theta.sin());
        let rot = AffineTransform {
            linear: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        };
        let back = rot.inverse().unwrap();
        let once = resample(&vol, &rot, &vol).unwrap();
        let twice = resample(&once, &back, &vol).unwrap();
        // compare interior only: rotation clips corners
        let [nx, ny, nz] = vol.shape;
        let m = 6;
        let mut mse = 0.0;
        let mut count = 0;
        for z in m..nz - m {
            for y in m..ny - m {
                for x in m..nx - m {
                    let d = (twice.at(x, y, z) - vol.at(x, y, z)) as f64;
                    mse += d * d;
                    count += 1;
                }
            }
        }
        mse /= count as f64;
        let range = 0.9f64;
        assert!(mse < 1e-3 * range * range, "round-trip mse {mse}");
    }

    #[test]
    fn crop_downsample_enumeration_oracle() {
        // 4^3 volume of values 1..64, factor 2
        let data: Vec<f32> = (1..=64).map(|v| v as f32).collect();
        let vol = Volume::centered([4, 4, 4], 1.0, data).unwrap();
        let out = crop_downsample(&vol, [0, 0, 0], [4, 4, 4], 2).unwrap();
        assert_eq!(out.shape, [2, 2, 2]);
        assert_eq!(out.voxel_size, [2.0, 2.0, 2.0]);
        for oz in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut sum = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                sum += vol.at(2 * ox + dx, 2 * oy + dy, 2 * oz + dz);
                            }
                        }
                    }
                    assert_eq!(out.at(ox, oy, oz), sum / 8.0);
                }
            }
        }
        // block centers keep their world positions
        let w_out = out.voxel_to_world([0.0, 0.0, 0.0]);
        let w_in = vol.voxel_to_world([0.5, 0.5, 0.5]);
        for a in 0..3 {
            assert!((w_out[a] - w_in[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_downsample_trivial_cases() {
        let vol = test_image();
        // factor 1 = crop only
        let cropped = crop_downsample(&vol, [2, 3, 4], [8, 8, 8], 1).unwrap();
        assert_eq!(cropped.shape, [8, 8, 8]);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(cropped.at(x, y, z), vol.at(x + 2, y + 3, z + 4));
                }
            }
        }
        // constant stays constant
        let mut flat = Volume::zeros([8, 8, 8], 1.0);
        for v in flat.data_mut() {
            *v = 3.25;
        }
        let down = crop_downsample(&flat, [0, 0, 0], [8, 8, 8], 2).unwrap();
        assert!(down.data().iter().all(|v| *v == 3.25));
        // misaligned factor
        assert!(crop_downsample(&vol, [0, 0, 0], [9, 8, 8], 2).is_err());
        // out-of-bounds crop
        assert!(crop_downsample(&vol, [20, 0, 0], [8, 8, 8], 1).is_err());
    }

    #[test]
    fn transform_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("affine.json");
        let a = AffineTransform {
            linear: [[1.1, 0.2, 0.0], [0.0, 0.9, 0.1], [0.05, 0.0, 1.0]],
            translation: [1.0, -2.0, 3.0],
        };
        save_transform(&AnyTransform::Affine(a.clone()), &p).unwrap();
        assert_eq!(load_transform(&p).unwrap(), AnyTransform::Affine(a.clone()));

        let text = fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["kind"], "affine");
        assert_eq!(v["linear"].as_array().unwrap().len(), 9);
        assert_eq!(v["linear"][1], 0.2); // row-major: element (0,1)

        let pr = dir.path().join("rigid.json");
        let mut rng = seeds::rng(9, "json", 0);
        let r = RigidTransform {
            rotation: random_rotation(&mut rng),
            translation: [0.5, 0.0, -0.25],
        };
        save_transform(&AnyTransform::Rigid(r.clone()), &pr).unwrap();
        assert_eq!(load_transform(&pr).unwrap(), AnyTransform::Rigid(r));

        // a non-orthogonal matrix marked rigid is rejected
        let bad = dir.path().join("bad.json");
        fs::write(
            &bad,
            r#"{"linear":[2,0,0,0,1,0,0,0,1],"translation":[0,0,0],"kind":"rigid"}"#,
        )
        .unwrap();
        assert!(load_transform(&bad).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        /// The projected rotation is orthogonal with determinant +1 for any
        /// nondegenerate affine.
        #[test]
        fn projection_is_special_orthogonal(seed in 0u64..1000) {
            let mut rng = seeds::rng(seed, "proj-prop", 0);
            use rand::RngExt;
            let mut linear = random_rotation(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    linear[i][j] += rng.random_range(-0.4..0.4);
                }
            }
            let a = AffineTransform {
                linear,
                translation: [
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                ],
            };
            let pts = cube_grid_points(5, 2.0);
            if let Ok(r) = project_to_rigid(&a, &pts) {
                proptest::prop_assert!(r.orthogonality_defect() < 1e-6);
                proptest::prop_assert!((r.det() - 1.0).abs() < 1e-6);
            }
        }
    }
}
