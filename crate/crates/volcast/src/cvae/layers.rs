//! The network's building blocks as plain functions over flat f64 buffers,
//! each with a hand-derived backward pass. Feature maps are
//! [channels][d][h][w]; every backward *accumulates* into its gradient
//! buffers so batches can share them.

/// Output index range along one axis for kernel offset `k` (0..3) with
/// padding 1: input index `p + k - 1` must stay inside `0..n`.
#[inline]
fn out_range(k: usize, n: usize) -> (usize, usize) {
    let lo = usize::from(k == 0);
    let hi = if k == 2 { n - 1 } else { n };
    (lo, hi)
}

/// 3x3x3 convolution, stride 1, zero padding 1.
/// `inp`: [c_in][d][h][w]; `weight`: [c_out][c_in][3][3][3]; `out`: [c_out][d][h][w].
pub fn conv3(
    inp: &[f64],
    c_in: usize,
    dims: [usize; 3],
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    out: &mut [f64],
) {
    let [d, h, w] = dims;
    let vol = d * h * w;
    debug_assert_eq!(inp.len(), c_in * vol);
    debug_assert_eq!(out.len(), c_out * vol);
    debug_assert_eq!(weight.len(), c_out * c_in * 27);
    debug_assert_eq!(bias.len(), c_out);
    for co in 0..c_out {
        out[co * vol..(co + 1) * vol].fill(bias[co]);
    }
    for co in 0..c_out {
        for ci in 0..c_in {
            let in_base = ci * vol;
            let w_base = (co * c_in + ci) * 27;
            for kz in 0..3 {
                let (z0, z1) = out_range(kz, d);
                for ky in 0..3 {
                    let (y0, y1) = out_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1) = out_range(kx, w);
                        let wv = weight[w_base + kz * 9 + ky * 3 + kx];
                        if wv == 0.0 || x1 <= x0 {
                            continue;
                        }
                        let len = x1 - x0;
                        for z in z0..z1 {
                            let iz = z + kz - 1;
                            for y in y0..y1 {
                                let iy = y + ky - 1;
                                let o_off = co * vol + (z * h + y) * w + x0;
                                let i_off = in_base + (iz * h + iy) * w + (x0 + kx - 1);
                                let irow = &inp[i_off..i_off + len];
                                let orow = &mut out[o_off..o_off + len];
                                for (o, i) in orow.iter_mut().zip(irow) {
                                    *o += wv * *i;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`conv3`]. Accumulates into `grad_in`, `grad_w`, `grad_b`.
#[allow(clippy::too_many_arguments)]
pub fn conv3_backward(
    grad_out: &[f64],
    inp: &[f64],
    c_in: usize,
    dims: [usize; 3],
    weight: &[f64],
    c_out: usize,
    grad_in: &mut [f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let [d, h, w] = dims;
    let vol = d * h * w;
    for co in 0..c_out {
        let g: f64 = grad_out[co * vol..(co + 1) * vol].iter().sum();
        grad_b[co] += g;
    }
    for co in 0..c_out {
        for ci in 0..c_in {
            let in_base = ci * vol;
            let w_base = (co * c_in + ci) * 27;
            for kz in 0..3 {
                let (z0, z1) = out_range(kz, d);
                for ky in 0..3 {
                    let (y0, y1) = out_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1) = out_range(kx, w);
                        if x1 <= x0 {
                            continue;
                        }
                        let len = x1 - x0;
                        let wv = weight[w_base + kz * 9 + ky * 3 + kx];
                        let mut wgrad = 0.0;
                        for z in z0..z1 {
                            let iz = z + kz - 1;
                            for y in y0..y1 {
                                let iy = y + ky - 1;
                                let o_off = co * vol + (z * h + y) * w + x0;
                                let i_off = in_base + (iz * h + iy) * w + (x0 + kx - 1);
                                let grow = &grad_out[o_off..o_off + len];
                                let irow = &inp[i_off..i_off + len];
                                let mut dot = 0.0;
                                for (g, i) in grow.iter().zip(irow) {
                                    dot += *g * *i;
                                }
                                wgrad += dot;
                                if wv != 0.0 {
                                    let gin = &mut grad_in[i_off..i_off + len];
                                    for (gi, g) in gin.iter_mut().zip(grow) {
                                        *gi += wv * *g;
                                    }
                                }
                            }
                        }
                        grad_w[w_base + kz * 9 + ky * 3 + kx] += wgrad;
                    }
                }
            }
        }
    }
}

/// Convolution whose kernel spans the entire remaining feature map (a
/// fully connected head): `out[o] = b[o] + sum_i w[o][i] * inp[i]`.
pub fn global_conv(inp: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = inp.len();
    debug_assert_eq!(weight.len(), out.len() * n);
    for (o, (b, wrow)) in out.iter_mut().zip(bias.iter().zip(weight.chunks(n))) {
        let mut acc = *b;
        for (w, x) in wrow.iter().zip(inp) {
            acc += w * x;
        }
        *o = acc;
    }
}

pub fn global_conv_backward(
    grad_out: &[f64],
    inp: &[f64],
    weight: &[f64],
    grad_in: &mut [f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let n = inp.len();
    for (o, g) in grad_out.iter().enumerate() {
        grad_b[o] += g;
        let wrow = &weight[o * n..(o + 1) * n];
        let gwrow = &mut grad_w[o * n..(o + 1) * n];
        for i in 0..n {
            gwrow[i] += g * inp[i];
            grad_in[i] += g * wrow[i];
        }
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub struct GroupNormCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Group normalization with per-channel affine. `x`: [c][vol].
pub fn group_norm(
    x: &[f64],
    c: usize,
    vol: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
) -> GroupNormCache {
    debug_assert_eq!(c % groups, 0);
    let cg = c / groups;
    let n = (cg * vol) as f64;
    let mut mean = Vec::with_capacity(groups);
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let lo = g * cg * vol;
        let hi = lo + cg * vol;
        let xs = &x[lo..hi];
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
        let is = 1.0 / (v + GROUP_NORM_EPS).sqrt();
        for ch in 0..cg {
            let gamma_c = gamma[g * cg + ch];
            let beta_c = beta[g * cg + ch];
            let base = lo + ch * vol;
            for i in 0..vol {
                out[base + i] = gamma_c * (x[base + i] - m) * is + beta_c;
            }
        }
        mean.push(m);
        inv_std.push(is);
    }
    GroupNormCache { mean, inv_std }
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    grad_out: &[f64],
    x: &[f64],
    c: usize,
    vol: usize,
    groups: usize,
    gamma: &[f64],
    cache: &GroupNormCache,
    grad_in: &mut [f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) {
    let cg = c / groups;
    let n = (cg * vol) as f64;
    for g in 0..groups {
        let lo = g * cg * vol;
        let m = cache.mean[g];
        let is = cache.inv_std[g];
        // s1 = sum d_xhat, s2 = sum d_xhat * xhat over the group
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for ch in 0..cg {
            let gamma_c = gamma[g * cg + ch];
            let base = lo + ch * vol;
            let mut dg = 0.0;
            let mut db = 0.0;
            for i in 0..vol {
                let xhat = (x[base + i] - m) * is;
                let dy = grad_out[base + i];
                dg += dy * xhat;
                db += dy;
                let dxh = dy * gamma_c;
                s1 += dxh;
                s2 += dxh * xhat;
            }
            grad_gamma[g * cg + ch] += dg;
            grad_beta[g * cg + ch] += db;
        }
        for ch in 0..cg {
            let gamma_c = gamma[g * cg + ch];
            let base = lo + ch * vol;
            for i in 0..vol {
                let xhat = (x[base + i] - m) * is;
                let dxh = grad_out[base + i] * gamma_c;
                grad_in[base + i] += is * (dxh - s1 / n - xhat * s2 / n);
            }
        }
    }
}

pub fn relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward of ReLU given the *pre-activation* values.
pub fn relu_backward(grad: &mut [f64], pre: &[f64]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2x2 max pooling, stride 2. Returns the pooled map and the flat argmax
/// index (into `x`) per output cell.
pub fn maxpool2(x: &[f64], c: usize, dims: [usize; 3]) -> (Vec<f64>, Vec<usize>) {
    let [d, h, w] = dims;
    debug_assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let ovol = od * oh * ow;
    let vol = d * h * w;
    let mut out = vec![0.0; c * ovol];
    let mut arg = vec![0usize; c * ovol];
    for ch in 0..c {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ch * vol
                                    + ((2 * oz + dz) * h + (2 * oy + dy)) * w
                                    + (2 * ox + dx);
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = ch * ovol + (oz * oh + oy) * ow + ox;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad_out: &[f64], argmax: &[usize], grad_in: &mut [f64]) {
    for (g, i) in grad_out.iter().zip(argmax) {
        grad_in[*i] += *g;
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(x: &[f64], c: usize, dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0; c * od * oh * ow];
    let vol = d * h * w;
    let ovol = od * oh * ow;
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let irow = ch * vol + ((z / 2) * h + y / 2) * w;
                let orow = ch * ovol + (z * oh + y) * ow;
                for x_o in 0..ow {
                    out[orow + x_o] = x[irow + x_o / 2];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward(
    grad_out: &[f64],
    c: usize,
    dims: [usize; 3],
    grad_in: &mut [f64],
) {
    let [d, h, w] = dims; // input (small) dims
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let vol = d * h * w;
    let ovol = od * oh * ow;
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let irow = ch * vol + ((z / 2) * h + y / 2) * w;
                let orow = ch * ovol + (z * oh + y) * ow;
                for x_o in 0..ow {
                    grad_in[irow + x_o / 2] += grad_out[orow + x_o];
                }
            }
        }
    }
}

/// Add a linear embedding of the conditioning vector to every voxel of the
/// corresponding channel: `feat[c][..] += W[c] . cond + b[c]`.
pub fn add_embedding(
    feat: &mut [f64],
    vol: usize,
    weight: &[f64],
    bias: &[f64],
    cond: &[f64],
) {
    let k = cond.len();
    let c = bias.len();
    debug_assert_eq!(weight.len(), c * k);
    debug_assert_eq!(feat.len(), c * vol);
    for ch in 0..c {
        let mut a = bias[ch];
        for (w, x) in weight[ch * k..(ch + 1) * k].iter().zip(cond) {
            a += w * x;
        }
        for v in &mut feat[ch * vol..(ch + 1) * vol] {
            *v += a;
        }
    }
}

/// Backward of [`add_embedding`]. The gradient w.r.t. the feature map is the
/// identity (pass `grad` through unchanged); this accumulates the embedding
/// parameter gradients and the gradient w.r.t. the conditioning vector.
pub fn add_embedding_backward(
    grad: &[f64],
    vol: usize,
    weight: &[f64],
    cond: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_cond: &mut [f64],
) {
    let k = cond.len();
    let c = grad_b.len();
    for ch in 0..c {
        let s: f64 = grad[ch * vol..(ch + 1) * vol].iter().sum();
        grad_b[ch] += s;
        for i in 0..k {
            grad_w[ch * k + i] += s * cond[i];
            grad_cond[i] += s * weight[ch * k + i];
        }
    }
}
