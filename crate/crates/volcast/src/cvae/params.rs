//! Named parameter tensors and their gradients.
//!
//! Tensor names are part of the checkpoint contract:
//!
//! ```text
//! encoder.block{1..B}.conv{1,2}.{weight,bias}
//! encoder.block{1..B}.conv{1,2}.norm.{gamma,beta}
//! encoder.block{1..B}.conv{1,2}.embed.{weight,bias}
//! encoder.head.{weight,bias}
//! decoder.down{1..B}.conv{1,2}.*        (same leaf names as encoder convs)
//! decoder.bottleneck.*
//! decoder.up{1..B}.conv{1,2}.*
//! decoder.out.{weight,bias}
//! ```
//!
//! Conv weights are [c_out][c_in][3][3][3]; the encoder head weight is
//! [2*d_z][c_B * (s/2^B)^3]; embedding weights are [c_out][cond_len].

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParameters {
    pub fn empty() -> Self {
        ModelParameters {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Panics on a missing name: tensor layout is an internal invariant
    /// established at init/load time.
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor {name:?}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter tensor {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Structural equality of names and shapes (not values).
    pub fn same_layout(&self, other: &ModelParameters) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape == tb.shape)
    }
}

/// Per-tensor gradient buffers matching a parameter layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    map: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParameters) -> Self {
        Gradients {
            map: params
                .iter()
                .map(|(n, t)| (n.clone(), vec![0.0; t.len()]))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing gradient buffer {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing gradient buffer {name:?}"))
    }

    /// Accumulate `delta` into the named buffer.
    pub fn accumulate(&mut self, name: &str, delta: &[f64]) {
        let buf = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing gradient buffer {name:?}"));
        debug_assert_eq!(buf.len(), delta.len());
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += *d;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for buf in self.map.values_mut() {
            for v in buf.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn zero(&mut self) {
        for buf in self.map.values_mut() {
            buf.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.map
            .values()
            .all(|buf| buf.iter().all(|v| v.is_finite()))
    }
}

pub(crate) enum Init {
    /// Normal with std sqrt(2 / fan_in) — hidden conv weights feeding ReLU.
    Kaiming { fan_in: usize },
    /// Normal with std sqrt(1 / fan_in) — linear output heads.
    Xavier { fan_in: usize },
    /// Small normal — conditioning embeddings start gentle.
    SmallNormal,
    Zero,
    One,
}

/// Deterministic initialization: each tensor gets its own stream derived
/// from (seed, tensor index in name order), so values depend only on the
/// architecture and the seed.
pub(crate) fn init_tensors(specs: Vec<(String, Vec<usize>, Init)>, seed: u64) -> ModelParameters {
    let mut sorted = specs;
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut params = ModelParameters::empty();
    for (idx, (name, shape, init)) in sorted.into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let mut rng = seeds::rng(seed, "init", idx as u64);
        let data: Vec<f64> = match init {
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        e * std
                    })
                    .collect()
            }
            Init::Xavier { fan_in } => {
                let std = (1.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        e * std
                    })
                    .collect()
            }
            Init::SmallNormal => (0..n)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    e * 0.01
                })
                .collect(),
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
        };
        params.insert(name, Tensor::from_vec(&shape, data));
    }
    params
}

/// Check that every tensor in `params` is finite (post-load validation and
/// non-finite-loss diagnostics).
pub fn check_finite(params: &ModelParameters) -> Result<()> {
    for (name, t) in params.iter() {
        if !t.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerics(format!(
                "parameter tensor {name} contains non-finite values"
            )));
        }
    }
    Ok(())
}
