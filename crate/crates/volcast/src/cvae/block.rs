//! The repeated composite unit: conv3 -> group norm -> add conditioning
//! embedding -> ReLU. The embedding is added after normalization (so it is
//! not immediately normalized away) and before the nonlinearity.

use super::layers;
use super::params::{Gradients, ModelParameters};

pub(crate) struct UnitCache {
    pub input: Vec<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub dims: [usize; 3],
    pub pre_norm: Vec<f64>,
    pub gn: layers::GroupNormCache,
    pub pre_relu: Vec<f64>,
}

/// Forward through `{prefix}.{weight,bias,norm.*,embed.*}`. Consumes the
/// input buffer (it is retained in the cache for the backward pass).
pub(crate) fn unit_forward(
    params: &ModelParameters,
    prefix: &str,
    input: Vec<f64>,
    c_in: usize,
    dims: [usize; 3],
    cond: &[f64],
    groups: usize,
) -> (Vec<f64>, UnitCache) {
    let weight = params.get(&format!("{prefix}.weight"));
    let bias = params.get(&format!("{prefix}.bias"));
    let gamma = params.get(&format!("{prefix}.norm.gamma"));
    let beta = params.get(&format!("{prefix}.norm.beta"));
    let embed_w = params.get(&format!("{prefix}.embed.weight"));
    let embed_b = params.get(&format!("{prefix}.embed.bias"));
    let c_out = weight.shape[0];
    debug_assert_eq!(weight.shape[1], c_in);
    let vol: usize = dims.iter().product();

    let mut pre_norm = vec![0.0; c_out * vol];
    layers::conv3(
        &input,
        c_in,
        dims,
        &weight.data,
        &bias.data,
        c_out,
        &mut pre_norm,
    );
    let mut act = vec![0.0; c_out * vol];
    let gn = layers::group_norm(
        &pre_norm,
        c_out,
        vol,
        groups,
        &gamma.data,
        &beta.data,
        &mut act,
    );
    layers::add_embedding(&mut act, vol, &embed_w.data, &embed_b.data, cond);
    let pre_relu = act.clone();
    layers::relu(&mut act);
    (
        act,
        UnitCache {
            input,
            c_in,
            c_out,
            dims,
            pre_norm,
            gn,
            pre_relu,
        },
    )
}

/// Backward through the unit. Accumulates parameter gradients into `grads`
/// and the conditioning gradient into `grad_cond`; returns the gradient
/// w.r.t. the unit input.
pub(crate) fn unit_backward(
    params: &ModelParameters,
    prefix: &str,
    cache: &UnitCache,
    mut grad_out: Vec<f64>,
    cond: &[f64],
    groups: usize,
    grads: &mut Gradients,
    grad_cond: &mut [f64],
) -> Vec<f64> {
    let weight = params.get(&format!("{prefix}.weight"));
    let gamma = params.get(&format!("{prefix}.norm.gamma"));
    let embed_w = params.get(&format!("{prefix}.embed.weight"));
    let (c_in, c_out, dims) = (cache.c_in, cache.c_out, cache.dims);
    let vol: usize = dims.iter().product();

    layers::relu_backward(&mut grad_out, &cache.pre_relu);

    let mut g_embed_w = vec![0.0; embed_w.len()];
    let mut g_embed_b = vec![0.0; c_out];
    layers::add_embedding_backward(
        &grad_out,
        vol,
        &embed_w.data,
        cond,
        &mut g_embed_w,
        &mut g_embed_b,
        grad_cond,
    );
    grads.accumulate(&format!("{prefix}.embed.weight"), &g_embed_w);
    grads.accumulate(&format!("{prefix}.embed.bias"), &g_embed_b);

    let mut grad_pre_norm = vec![0.0; c_out * vol];
    let mut g_gamma = vec![0.0; c_out];
    let mut g_beta = vec![0.0; c_out];
    layers::group_norm_backward(
        &grad_out,
        &cache.pre_norm,
        c_out,
        vol,
        groups,
        &gamma.data,
        &cache.gn,
        &mut grad_pre_norm,
        &mut g_gamma,
        &mut g_beta,
    );
    grads.accumulate(&format!("{prefix}.norm.gamma"), &g_gamma);
    grads.accumulate(&format!("{prefix}.norm.beta"), &g_beta);

    let mut grad_input = vec![0.0; c_in * vol];
    let mut g_w = vec![0.0; weight.len()];
    let mut g_b = vec![0.0; c_out];
    layers::conv3_backward(
        &grad_pre_norm,
        &cache.input,
        c_in,
        dims,
        &weight.data,
        c_out,
        &mut grad_input,
        &mut g_w,
        &mut g_b,
    );
    grads.accumulate(&format!("{prefix}.weight"), &g_w);
    grads.accumulate(&format!("{prefix}.bias"), &g_b);
    grad_input
}
