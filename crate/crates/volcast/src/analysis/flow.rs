//! Dense 3D optical flow (Horn-Schunck) and flow divergence.
//!
//! The flow minimizes sum((I_t + grad(I) . u)^2) + alpha^2 * sum over grid
//! edges of |u_a - u_b|^2 by coordinate descent: each voxel update solves
//! its own 3x3 stationarity system exactly (Sherman-Morrison), so the
//! energy is non-increasing sweep over sweep, which the solver monitors.

use crate::dataio::Volume;
use crate::error::{Error, Result};

/// Voxel-displacement field; component a stores motion along axis a in
/// voxels per step, laid out like `Volume` data (x fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub shape: [usize; 3],
    u: [Vec<f64>; 3],
}

impl FlowField {
    pub fn zeros(shape: [usize; 3]) -> Self {
        let n = shape.iter().product();
        FlowField {
            shape,
            u: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn new(shape: [usize; 3], u: [Vec<f64>; 3]) -> Result<Self> {
        let n: usize = shape.iter().product();
        for (a, comp) in u.iter().enumerate() {
            if comp.len() != n {
                return Err(Error::Shape(format!(
                    "flow component {a} has {} values for shape {shape:?}",
                    comp.len()
                )));
            }
            if comp.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerics(format!("flow component {a} is not finite")));
            }
        }
        Ok(FlowField { shape, u })
    }

    pub fn len(&self) -> usize {
        self.u[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.u[0].is_empty()
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.u[axis]
    }

    #[inline]
    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    pub fn at(&self, axis: usize, x: usize, y: usize, z: usize) -> f64 {
        self.u[axis][self.idx(x, y, z)]
    }

    /// Total squared difference across grid edges, the smoothness term
    /// without its alpha^2 weight.
    pub fn smoothness(&self) -> f64 {
        let [nx, ny, nz] = self.shape;
        let mut acc = 0.0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = self.idx(x, y, z);
                    for (axis, extent) in [(0usize, nx), (1, ny), (2, nz)] {
                        let coord = [x, y, z][axis];
                        if coord + 1 < extent {
                            let j = match axis {
                                0 => self.idx(x + 1, y, z),
                                1 => self.idx(x, y + 1, z),
                                _ => self.idx(x, y, z + 1),
                            };
                            for comp in &self.u {
                                let d = comp[i] - comp[j];
                                acc += d * d;
                            }
                        }
                    }
                }
            }
        }
        acc
    }
}

/// Central differences in the interior, one-sided at the boundary.
fn spatial_gradients(img: &[f64], shape: [usize; 3]) -> [Vec<f64>; 3] {
    let [nx, ny, nz] = shape;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut out = [vec![0.0; img.len()], vec![0.0; img.len()], vec![0.0; img.len()]];
    let diff = |lo: f64, hi: f64, two_sided: bool| {
        if two_sided { 0.5 * (hi - lo) } else { hi - lo }
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = idx(x, y, z);
                let (xl, xh) = (x.saturating_sub(1), (x + 1).min(nx - 1));
                out[0][i] = diff(img[idx(xl, y, z)], img[idx(xh, y, z)], x > 0 && x + 1 < nx);
                let (yl, yh) = (y.saturating_sub(1), (y + 1).min(ny - 1));
                out[1][i] = diff(img[idx(x, yl, z)], img[idx(x, yh, z)], y > 0 && y + 1 < ny);
                let (zl, zh) = (z.saturating_sub(1), (z + 1).min(nz - 1));
                out[2][i] = diff(img[idx(x, y, zl)], img[idx(x, y, zh)], z > 0 && z + 1 < nz);
            }
        }
    }
    out
}

fn flow_energy(g: &[Vec<f64>; 3], it: &[f64], flow: &FlowField, alpha: f64) -> f64 {
    let mut data = 0.0;
    for i in 0..it.len() {
        let r = it[i]
            + g[0][i] * flow.u[0][i]
            + g[1][i] * flow.u[1][i]
            + g[2][i] * flow.u[2][i];
        data += r * r;
    }
    data + alpha * alpha * flow.smoothness()
}

/// Horn-Schunck flow from `v1` to `v2`; returns the field and the energy
/// after each sweep.
pub fn optical_flow_with_energy(
    v1: &Volume,
    v2: &Volume,
    alpha: f64,
    iters: usize,
) -> Result<(FlowField, Vec<f64>)> {
    if v1.shape != v2.shape {
        return Err(Error::Shape(format!(
            "flow inputs have shapes {:?} and {:?}",
            v1.shape, v2.shape
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("flow smoothness alpha must be > 0, got {alpha}")));
    }
    let [nx, ny, nz] = v1.shape;
    let avg: Vec<f64> = v1
        .data()
        .iter()
        .zip(v2.data())
        .map(|(a, b)| 0.5 * (*a as f64 + *b as f64))
        .collect();
    let it: Vec<f64> = v1
        .data()
        .iter()
        .zip(v2.data())
        .map(|(a, b)| *b as f64 - *a as f64)
        .collect();
    if avg.iter().chain(&it).any(|v| !v.is_finite()) {
        return Err(Error::Numerics("flow inputs contain non-finite voxels".into()));
    }
    let g = spatial_gradients(&avg, v1.shape);
    let mut flow = FlowField::zeros(v1.shape);
    let a2 = alpha * alpha;
    let mut energies = Vec::with_capacity(iters);
    let mut prev = flow_energy(&g, &it, &flow, alpha);
    for sweep in 0..iters {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    let mut sums = [0.0f64; 3];
                    let mut deg = 0.0f64;
                    let mut take = |j: usize| {
                        sums[0] += flow.u[0][j];
                        sums[1] += flow.u[1][j];
                        sums[2] += flow.u[2][j];
                        deg += 1.0;
                    };
                    if x > 0 {
                        take(i - 1);
                    }
                    if x + 1 < nx {
                        take(i + 1);
                    }
                    if y > 0 {
                        take(i - nx);
                    }
                    if y + 1 < ny {
                        take(i + nx);
                    }
                    if z > 0 {
                        take(i - nx * ny);
                    }
                    if z + 1 < nz {
                        take(i + nx * ny);
                    }
                    let ubar = [sums[0] / deg, sums[1] / deg, sums[2] / deg];
                    let gv = [g[0][i], g[1][i], g[2][i]];
                    let g2 = gv[0] * gv[0] + gv[1] * gv[1] + gv[2] * gv[2];
                    let s = (gv[0] * ubar[0] + gv[1] * ubar[1] + gv[2] * ubar[2] + it[i])
                        / (a2 * deg + g2);
                    for c in 0..3 {
                        flow.u[c][i] = ubar[c] - gv[c] * s;
                    }
                }
            }
        }
        let e = flow_energy(&g, &it, &flow, alpha);
        if e > prev + 1e-8 * prev.abs().max(1.0) {
            log::warn!("flow energy increased at sweep {sweep}: {prev} -> {e}");
        }
        energies.push(e);
        prev = e;
    }
    debug_assert!(flow.u.iter().flatten().all(|v| v.is_finite()));
    Ok((flow, energies))
}

pub fn optical_flow(v1: &Volume, v2: &Volume, alpha: f64, iters: usize) -> Result<FlowField> {
    optical_flow_with_energy(v1, v2, alpha, iters).map(|(f, _)| f)
}

/// div u = du1/dx1 + du2/dx2 + du3/dx3, central differences in the
/// interior and one-sided at the boundary.
pub fn divergence(flow: &FlowField) -> Vec<f64> {
    let [nx, ny, nz] = flow.shape;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut out = vec![0.0; flow.len()];
    let diff = |comp: &[f64], lo: usize, hi: usize, two_sided: bool| {
        if two_sided {
            0.5 * (comp[hi] - comp[lo])
        } else {
            comp[hi] - comp[lo]
        }
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = idx(x, y, z);
                let (xl, xh) = (x.saturating_sub(1), (x + 1).min(nx - 1));
                let (yl, yh) = (y.saturating_sub(1), (y + 1).min(ny - 1));
                let (zl, zh) = (z.saturating_sub(1), (z + 1).min(nz - 1));
                out[i] = diff(&flow.u[0], idx(xl, y, z), idx(xh, y, z), x > 0 && x + 1 < nx)
                    + diff(&flow.u[1], idx(x, yl, z), idx(x, yh, z), y > 0 && y + 1 < ny)
                    + diff(&flow.u[2], idx(x, y, zl), idx(x, y, zh), z > 0 && z + 1 < nz);
            }
        }
    }
    out
}

/// Divergence packed into a volume that reuses `like`'s geometry.
pub fn divergence_volume(flow: &FlowField, like: &Volume) -> Result<Volume> {
    if like.shape != flow.shape {
        return Err(Error::Shape(format!(
            "reference volume shape {:?} differs from flow shape {:?}",
            like.shape, flow.shape
        )));
    }
    let data: Vec<f32> = divergence(flow).iter().map(|v| *v as f32).collect();
    Volume::new(like.shape, like.voxel_size, like.grid_to_world, data)
}
