//! The in-memory 3D volume type and the raw little-endian float32 format.
//!
//! Memory layout is x-fastest: `idx = x + nx*(y + ny*z)`, which matches the
//! NIfTI on-disk order so buffers move between formats without reshuffling.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3D scalar intensity grid with voxel size and a grid-to-world affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `[nx, ny, nz]`
    pub shape: [usize; 3],
    /// mm per axis
    pub voxel_size: [f64; 3],
    /// 4x4 row-major affine mapping voxel indices `(x, y, z, 1)` to world mm.
    pub grid_to_world: [[f64; 4]; 4],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        shape: [usize; 3],
        voxel_size: [f64; 3],
        grid_to_world: [[f64; 4]; 4],
        data: Vec<f32>,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(Error::Shape(format!("empty volume shape {shape:?}")));
        }
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} ({} voxels)",
                data.len(),
                shape,
                n
            )));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Data(format!(
                "voxel sizes must be positive and finite, got {voxel_size:?}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("volume contains non-finite values".into()));
        }
        Ok(Volume {
            shape,
            voxel_size,
            grid_to_world,
            data,
        })
    }

    /// Volume on an isotropic grid with the world origin at the grid centre.
    pub fn centered(shape: [usize; 3], voxel_mm: f64, data: Vec<f32>) -> Result<Self> {
        let mut affine = [[0.0; 4]; 4];
        for a in 0..3 {
            affine[a][a] = voxel_mm;
            affine[a][3] = -voxel_mm * (shape[a] as f64 - 1.0) / 2.0;
        }
        affine[3][3] = 1.0;
        Volume::new(shape, [voxel_mm; 3], affine, data)
    }

    pub fn zeros(shape: [usize; 3], voxel_mm: f64) -> Self {
        let n = shape.iter().product();
        Volume::centered(shape, voxel_mm, vec![0.0; n]).expect("valid zero volume")
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// World coordinates of a (possibly fractional) voxel index.
    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let a = &self.grid_to_world;
        let mut out = [0.0; 3];
        for r in 0..3 {
            out[r] = a[r][0] * v[0] + a[r][1] * v[1] + a[r][2] * v[2] + a[r][3];
        }
        out
    }

    /// Inverse of `voxel_to_world`; errors on a singular affine.
    pub fn world_to_voxel_matrix(&self) -> Result<[[f64; 4]; 4]> {
        invert_affine(&self.grid_to_world)
            .ok_or_else(|| Error::Numerics("grid_to_world affine is singular".into()))
    }

    /// Trilinear sample at a fractional voxel coordinate; 0 outside the grid.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let [nx, ny, nz] = self.shape;
        let x0 = p[0].floor();
        let y0 = p[1].floor();
        let z0 = p[2].floor();
        let fx = p[0] - x0;
        let fy = p[1] - y0;
        let fz = p[2] - z0;
        let (x0, y0, z0) = (x0 as i64, y0 as i64, z0 as i64);
        let mut acc = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let (xi, yi, zi) = (x0 + dx, y0 + dy, z0 + dz);
                    if xi < 0 || yi < 0 || zi < 0 {
                        continue;
                    }
                    let (xi, yi, zi) = (xi as usize, yi as usize, zi as usize);
                    if xi >= nx || yi >= ny || zi >= nz {
                        continue;
                    }
                    let w = (if dx == 0 { 1.0 - fx } else { fx })
                        * (if dy == 0 { 1.0 - fy } else { fy })
                        * (if dz == 0 { 1.0 - fz } else { fz });
                    acc += w * self.data[self.index(xi, yi, zi)] as f64;
                }
            }
        }
        acc
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| {
                let d = v as f64 - m;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }
}

pub fn invert_affine(a: &[[f64; 4]; 4]) -> Option<[[f64; 4]; 4]> {
    let m = nalgebra::Matrix4::from_fn(|r, c| a[r][c]);
    let inv = m.try_inverse()?;
    let mut out = [[0.0; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            out[r][c] = inv[(r, c)];
        }
    }
    Some(out)
}

pub fn identity_affine() -> [[f64; 4]; 4] {
    let mut a = [[0.0; 4]; 4];
    for i in 0..4 {
        a[i][i] = 1.0;
    }
    a
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSidecar {
    format: String,
    dtype: String,
    byte_order: String,
    shape: [usize; 3],
    voxel_size_mm: [f64; 3],
    grid_to_world: [[f64; 4]; 4],
}

const RAW_FORMAT: &str = "volcast-raw-v1";

/// Paths used by the raw format: `<stem>.raw` holds the voxel buffer,
/// `<stem>.json` the sidecar. `path` may point at either file.
fn raw_pair(path: &Path) -> (PathBuf, PathBuf) {
    let stem = path.with_extension("");
    (stem.with_extension("raw"), stem.with_extension("json"))
}

pub fn save_raw(vol: &Volume, path: &Path) -> Result<()> {
    let (raw_path, json_path) = raw_pair(path);
    let sidecar = RawSidecar {
        format: RAW_FORMAT.into(),
        dtype: "float32".into(),
        byte_order: "little".into(),
        shape: vol.shape,
        voxel_size_mm: vol.voxel_size,
        grid_to_world: vol.grid_to_world,
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Data(format!("sidecar encode: {e}")))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(vol.data.len() * 4);
    for v in &vol.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

pub fn load_raw(path: &Path) -> Result<Volume> {
    let (raw_path, json_path) = raw_pair(path);
    let json = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: RawSidecar = serde_json::from_str(&json)
        .map_err(|e| Error::Data(format!("{}: malformed sidecar: {e}", json_path.display())))?;
    if sidecar.format != RAW_FORMAT {
        return Err(Error::Data(format!(
            "{}: unknown format {:?}",
            json_path.display(),
            sidecar.format
        )));
    }
    if sidecar.dtype != "float32" || sidecar.byte_order != "little" {
        return Err(Error::Data(format!(
            "{}: unsupported dtype/byte order {}/{}",
            json_path.display(),
            sidecar.dtype,
            sidecar.byte_order
        )));
    }
    let n: usize = sidecar.shape.iter().product();
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() != n * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes for shape {:?}, found {}",
            raw_path.display(),
            n * 4,
            sidecar.shape,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(
        sidecar.shape,
        sidecar.voxel_size_mm,
        sidecar.grid_to_world,
        data,
    )
}

/// Format dispatch by extension: `.nii` / `.nii.gz` for NIfTI, `.raw` or
/// `.json` for the raw pair.
pub fn load_volume(path: &Path) -> Result<Volume> {
    match volume_format(path) {
        VolumeFormat::Nifti => super::nifti::load_nifti(path),
        VolumeFormat::Raw => load_raw(path),
    }
}

pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    match volume_format(path) {
        VolumeFormat::Nifti => super::nifti::save_nifti(vol, path),
        VolumeFormat::Raw => save_raw(vol, path),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    Raw,
}

pub fn volume_format(path: &Path) -> VolumeFormat {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        VolumeFormat::Nifti
    } else {
        VolumeFormat::Raw
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Volume {
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        Volume::new(
            [2, 3, 4],
            [1.0, 2.0, 3.0],
            identity_affine(),
            data,
        )
        .unwrap()
    }

    #[test]
    fn raw_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let vol = toy();
        let p = dir.path().join("vol.raw");
        save_raw(&vol, &p).unwrap();
        let back = load_raw(&p).unwrap();
        assert_eq!(vol, back);
    }

    #[test]
    fn truncated_raw_reports_error() {
        let dir = tempfile::tempdir().unwrap();
        let vol = toy();
        let p = dir.path().join("vol.raw");
        save_raw(&vol, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_raw(&p).unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");
    }

    #[test]
    fn non_finite_rejected() {
        let err = Volume::new(
            [1, 1, 2],
            [1.0; 3],
            identity_affine(),
            vec![1.0, f32::NAN],
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn trilinear_matches_grid_on_integer_points() {
        let vol = toy();
        for z in 0..4 {
            for y in 0..3 {
                for x in 0..2 {
                    let s = vol.sample_trilinear([x as f64, y as f64, z as f64]);
                    assert_eq!(s as f32, vol.at(x, y, z));
                }
            }
        }
    }

    #[test]
    fn trilinear_interpolates_midpoints() {
        let vol = toy();
        let s = vol.sample_trilinear([0.5, 0.0, 0.0]);
        let expect = 0.5 * (vol.at(0, 0, 0) + vol.at(1, 0, 0)) as f64;
        assert!((s - expect).abs() < 1e-12);
    }
}
