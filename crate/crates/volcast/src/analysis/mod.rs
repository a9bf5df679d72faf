//! Evaluation utilities: ROI-restricted MSE, per-pair win rates across
//! methods, optical-flow divergence maps, and simple PNG renderings.

pub mod flow;
pub mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::Volume;
use crate::error::{Error, Result};

pub use flow::{FlowField, divergence, divergence_volume, optical_flow, optical_flow_with_energy};
pub use plot::{PlotSummary, Slice2d, mse_distribution_plot, render_overlay};

/// Binary region-of-interest mask on the model grid.
#[derive(Debug, Clone)]
pub struct RoiMask {
    pub name: String,
    shape: [usize; 3],
    data: Vec<bool>,
}

impl RoiMask {
    /// Threshold a volume at 0.5 into a mask. Errors if no voxel is set.
    pub fn from_volume(name: impl Into<String>, vol: &Volume) -> Result<Self> {
        let data: Vec<bool> = vol.data().iter().map(|v| *v > 0.5).collect();
        Self::new(name, vol.shape, data)
    }

    pub fn new(name: impl Into<String>, shape: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let name = name.into();
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "mask {name} has {} voxels for shape {shape:?}",
                data.len()
            )));
        }
        if !data.iter().any(|b| *b) {
            return Err(Error::Data(format!("mask {name} is empty")));
        }
        Ok(RoiMask { name, shape, data })
    }

    /// All-true mask covering the full grid.
    pub fn whole(shape: [usize; 3]) -> Self {
        RoiMask {
            name: "whole".into(),
            shape,
            data: vec![true; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
    }
}

/// Mean squared error over the mask-true voxels.
pub fn roi_mse(pred: &Volume, truth: &Volume, mask: &RoiMask) -> Result<f64> {
    if pred.shape != truth.shape || pred.shape != mask.shape {
        return Err(Error::Shape(format!(
            "roi_mse shapes differ: pred {:?}, truth {:?}, mask {:?}",
            pred.shape, truth.shape, mask.shape
        )));
    }
    let p = pred.data();
    let t = truth.data();
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in mask.indices() {
        let d = p[i] as f64 - t[i] as f64;
        acc += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!("mask {} is empty", mask.name)));
    }
    Ok(acc / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub pair_id: String,
    pub method: String,
    pub roi: String,
    pub mse: f64,
}

/// Per-pair, per-method, per-ROI error table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MseReport {
    pub rows: Vec<MseRow>,
}

impl MseReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        pair_id: impl Into<String>,
        method: impl Into<String>,
        roi: impl Into<String>,
        mse: f64,
    ) -> Result<()> {
        if !mse.is_finite() || mse < 0.0 {
            return Err(Error::Data(format!("MSE must be finite and >= 0, got {mse}")));
        }
        self.rows.push(MseRow {
            pair_id: pair_id.into(),
            method: method.into(),
            roi: roi.into(),
            mse,
        });
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn methods(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.method.clone()).collect()
    }

    pub fn rois(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.roi.clone()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            rows.push(rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
        }
        Ok(MseReport { rows })
    }

    /// Win-rate tally per ROI. Every pair must carry one MSE per method.
    pub fn win_rates(&self) -> Result<WinRates> {
        if self.rows.is_empty() {
            return Err(Error::Data("win_rates on an empty report".into()));
        }
        let mut per_roi = BTreeMap::new();
        for roi in self.rois() {
            // pair -> method -> mse
            let mut table: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
            let mut methods: BTreeSet<&str> = BTreeSet::new();
            for row in self.rows.iter().filter(|r| r.roi == roi) {
                methods.insert(&row.method);
                let prev = table
                    .entry(&row.pair_id)
                    .or_default()
                    .insert(&row.method, row.mse);
                if prev.is_some() {
                    return Err(Error::Data(format!(
                        "duplicate entry for pair {} method {} roi {roi}",
                        row.pair_id, row.method
                    )));
                }
            }
            let mut strict: BTreeMap<String, usize> =
                methods.iter().map(|m| (m.to_string(), 0)).collect();
            let mut ties = strict.clone();
            for (pair, row) in &table {
                if row.len() != methods.len() {
                    let missing: Vec<&str> = methods
                        .iter()
                        .filter(|m| !row.contains_key(**m))
                        .copied()
                        .collect();
                    return Err(Error::Data(format!(
                        "pair {pair} roi {roi} is missing methods {missing:?}"
                    )));
                }
                let best = row.values().fold(f64::INFINITY, |a, b| a.min(*b));
                let winners: Vec<&str> = row
                    .iter()
                    .filter_map(|(m, v)| (*v == best).then_some(*m))
                    .collect();
                if winners.len() == 1 {
                    *strict.get_mut(winners[0]).unwrap() += 1;
                } else {
                    for w in winners {
                        *ties.get_mut(w).unwrap() += 1;
                    }
                }
            }
            let n = table.len();
            let frac = |counts: BTreeMap<String, usize>| {
                counts
                    .into_iter()
                    .map(|(m, c)| (m, c as f64 / n as f64))
                    .collect::<BTreeMap<String, f64>>()
            };
            per_roi.insert(
                roi,
                RoiWins {
                    pairs: n,
                    strict_fraction: frac(strict),
                    tie_fraction: frac(ties),
                },
            );
        }
        Ok(WinRates { per_roi })
    }

    /// Median MSE per ROI and method; None only for an empty report.
    pub fn medians(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        let mut out: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        for row in &self.rows {
            out.entry(row.roi.clone())
                .or_default()
                .entry(row.method.clone())
                .or_default()
                .push(row.mse);
        }
        out.into_iter()
            .map(|(roi, methods)| {
                let m = methods
                    .into_iter()
                    .map(|(method, mut vals)| {
                        vals.sort_by(|a, b| a.total_cmp(b));
                        let n = vals.len();
                        let med = if n % 2 == 1 {
                            vals[n / 2]
                        } else {
                            0.5 * (vals[n / 2 - 1] + vals[n / 2])
                        };
                        (method, med)
                    })
                    .collect();
                (roi, m)
            })
            .collect()
    }
}

/// Strict wins award the unique minimum; exact ties are tallied separately
/// for every method sharing the minimum, so tie fractions can sum past 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiWins {
    pub pairs: usize,
    pub strict_fraction: BTreeMap<String, f64>,
    pub tie_fraction: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRates {
    pub per_roi: BTreeMap<String, RoiWins>,
}

impl WinRates {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("encode win rates: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
