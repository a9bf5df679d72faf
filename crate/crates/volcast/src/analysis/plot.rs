//! PNG renderings: divergence overlays on anatomy slices and log-scale
//! MSE distribution strips. Pixel output is deliberately simple so tests
//! can reason about exact channel values.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::Serialize;

use super::MseReport;
use crate::dataio::Volume;
use crate::error::{Error, Result};

/// Zero MSE values are plotted at this floor on the log axis.
pub const MSE_PLOT_FLOOR: f64 = 1e-12;

/// A 2D slice extracted from a volume; `shape = [width, height]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2d {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Slice2d {
    pub fn new(shape: [usize; 2], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape[0] * shape[1] {
            return Err(Error::Shape(format!(
                "slice data has {} values for shape {shape:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("slice contains non-finite values".into()));
        }
        Ok(Slice2d { shape, data })
    }

    /// Extract the plane `axis = index`; the remaining axes keep their
    /// order as (width, height).
    pub fn from_volume(vol: &Volume, axis: usize, index: usize) -> Result<Self> {
        if axis > 2 {
            return Err(Error::Config(format!("slice axis must be 0..=2, got {axis}")));
        }
        if index >= vol.shape[axis] {
            return Err(Error::Config(format!(
                "slice index {index} out of range for axis {axis} of shape {:?}",
                vol.shape
            )));
        }
        let (wa, ha) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let shape = [vol.shape[wa], vol.shape[ha]];
        let mut data = Vec::with_capacity(shape[0] * shape[1]);
        for j in 0..shape[1] {
            for i in 0..shape[0] {
                let mut c = [0usize; 3];
                c[axis] = index;
                c[wa] = i;
                c[ha] = j;
                data.push(vol.at(c[0], c[1], c[2]) as f64);
            }
        }
        Slice2d::new(shape, data)
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i + self.shape[0] * j]
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })
}

/// Grayscale anatomy underlay with a diverging overlay: positive values
/// blend toward blue (expansion), negative toward red (contraction), and
/// the blend weight ramps linearly from 0 at zero divergence to 1 at the
/// symmetric color limit max(|divergence|).
pub fn render_overlay(base: &Slice2d, div: &Slice2d, path: &Path) -> Result<()> {
    if base.shape != div.shape {
        return Err(Error::Shape(format!(
            "base slice {:?} and divergence slice {:?} differ",
            base.shape, div.shape
        )));
    }
    let lo = base.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = base.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let limit = div.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let [w, h] = base.shape;
    let mut img = RgbImage::new(w as u32, h as u32);
    for j in 0..h {
        for i in 0..w {
            let v = base.at(i, j);
            let gray = if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round()
            } else {
                128.0
            };
            let d = div.at(i, j);
            let a = if limit > 0.0 { d.abs() / limit } else { 0.0 };
            let color = if d > 0.0 {
                [0.0, 0.0, 255.0]
            } else {
                [255.0, 0.0, 0.0]
            };
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = ((1.0 - a) * gray + a * color[c]).round() as u8;
            }
            img.put_pixel(i as u32, j as u32, Rgb(px));
        }
    }
    save_png(&img, path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotRow {
    pub roi: String,
    pub method: String,
    pub color: [u8; 3],
    pub y_top: u32,
    pub y_bottom: u32,
    pub median: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotSummary {
    pub axis_min_log10: f64,
    pub axis_max_log10: f64,
    pub floor: f64,
    pub rows: Vec<PlotRow>,
}

impl PlotSummary {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("encode plot summary: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [140, 86, 75],
];
const BAND_H: u32 = 24;
const PLOT_W: u32 = 600;
const MARGIN: u32 = 20;

/// One horizontal strip per (ROI, method): every MSE becomes a dot on a
/// log10 axis, with the median drawn as a black vertical marker. Returns
/// the summary describing rows, colors and axis so the image can be read
/// back and checked.
pub fn mse_distribution_plot(report: &MseReport, path: &Path) -> Result<PlotSummary> {
    if report.is_empty() {
        return Err(Error::Data("cannot plot an empty report".into()));
    }
    let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for row in &report.rows {
        grouped
            .entry((row.roi.clone(), row.method.clone()))
            .or_default()
            .push(row.mse.max(MSE_PLOT_FLOOR));
    }
    let all_min = grouped
        .values()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let all_max = grouped
        .values()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut amin = all_min.log10().floor();
    let mut amax = all_max.log10().ceil();
    if amax - amin < 1.0 {
        amin -= 0.5;
        amax = amin + 1.0;
    }

    let medians = report.medians();
    let methods: Vec<String> = report.methods().into_iter().collect();
    let n_rows = grouped.len() as u32;
    let width = PLOT_W + 2 * MARGIN;
    let height = n_rows * BAND_H + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));

    let x_of = |lv: f64| -> u32 {
        let t = ((lv - amin) / (amax - amin)).clamp(0.0, 1.0);
        MARGIN + (t * (PLOT_W - 1) as f64).round() as u32
    };

    // decade gridlines
    let mut dec = amin.ceil() as i64;
    while dec as f64 <= amax {
        let x = x_of(dec as f64);
        for y in MARGIN..height - MARGIN {
            img.put_pixel(x, y, Rgb([220, 220, 220]));
        }
        dec += 1;
    }

    let mut rows = Vec::new();
    for (r, ((roi, method), vals)) in grouped.iter().enumerate() {
        let y_top = MARGIN + r as u32 * BAND_H;
        let y_bottom = y_top + BAND_H - 1;
        let color = PALETTE[methods.iter().position(|m| m == method).unwrap() % PALETTE.len()];
        for (k, v) in vals.iter().enumerate() {
            let x = x_of(v.log10());
            let y = y_top + 4 + (k as u32 * 7) % (BAND_H - 8);
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let px = (x as i32 + dx).clamp(0, width as i32 - 1) as u32;
                    let py = (y as i32 + dy).clamp(0, height as i32 - 1) as u32;
                    img.put_pixel(px, py, Rgb(color));
                }
            }
        }
        let median = medians[roi][method].max(MSE_PLOT_FLOOR);
        let mx = x_of(median.log10());
        for y in y_top..=y_bottom {
            img.put_pixel(mx, y, Rgb([0, 0, 0]));
        }
        rows.push(PlotRow {
            roi: roi.clone(),
            method: method.clone(),
            color,
            y_top,
            y_bottom,
            median: medians[roi][method],
            count: vals.len(),
        });
    }
    save_png(&img, path)?;
    Ok(PlotSummary {
        axis_min_log10: amin,
        axis_max_log10: amax,
        floor: MSE_PLOT_FLOOR,
        rows,
    })
}
