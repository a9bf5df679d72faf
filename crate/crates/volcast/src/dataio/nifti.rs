//! Minimal NIfTI-1 support: single-file `.nii` / `.nii.gz`, float32 output,
//! common scalar datatypes on input with `scl_slope`/`scl_inter` applied.
//!
//! The writer emits little-endian float32 with `sform` set from the volume's
//! grid-to-world affine. The reader accepts either endianness.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::Compression;
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;

use crate::error::{Error, Result};

use super::volume::Volume;

const HDR_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

fn is_gz(path: &Path, bytes: &[u8]) -> bool {
    let by_name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_ascii_lowercase().ends_with(".gz"))
        .unwrap_or(false);
    by_name || (bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b)
}

struct Header<'a> {
    buf: &'a [u8],
    swapped: bool,
}

impl<'a> Header<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let raw: [u8; 2] = self.buf[off..off + 2].try_into().unwrap();
        let v = i16::from_le_bytes(raw);
        if self.swapped { v.swap_bytes() } else { v }
    }

    fn f32_at(&self, off: usize) -> f32 {
        let raw: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        let bits = u32::from_le_bytes(raw);
        f32::from_bits(if self.swapped { bits.swap_bytes() } else { bits })
    }
}

pub fn load_nifti(path: &Path) -> Result<Volume> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if is_gz(path, &raw) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: gzip decode failed: {e}", path.display())))?;
        out
    } else {
        raw
    };
    if bytes.len() < HDR_SIZE {
        return Err(Error::Data(format!(
            "{}: truncated NIfTI header ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }

    // sizeof_hdr doubles as the endianness probe.
    let sizeof_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let swapped = match sizeof_le {
        348 => false,
        _ if sizeof_le.swap_bytes() == 348 => true,
        _ => {
            return Err(Error::Data(format!(
                "{}: not a NIfTI-1 file (sizeof_hdr = {sizeof_le})",
                path.display()
            )));
        }
    };
    let hdr = Header {
        buf: &bytes[..HDR_SIZE],
        swapped,
    };

    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::Data(format!(
            "{}: unsupported magic {:?} (only single-file n+1 NIfTI is supported)",
            path.display(),
            magic
        )));
    }

    let ndim = hdr.i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Data(format!(
            "{}: invalid dim[0] = {ndim}",
            path.display()
        )));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate() {
        let v = hdr.i16_at(40 + 2 * (i + 1));
        if i < ndim as usize {
            if v <= 0 {
                return Err(Error::Data(format!(
                    "{}: non-positive dim[{}] = {v}",
                    path.display(),
                    i + 1
                )));
            }
            *d = v as usize;
        }
    }
    if dims[3..].iter().any(|&d| d > 1) {
        return Err(Error::Data(format!(
            "{}: only 3D volumes are supported, got dims {:?}",
            path.display(),
            &dims[..ndim as usize]
        )));
    }
    let shape = [dims[0], dims[1], dims[2]];
    let n: usize = shape.iter().product();

    let datatype = hdr.i16_at(70);
    let elem = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported NIfTI datatype {other}",
                path.display()
            )));
        }
    };

    let vox_offset = hdr.f32_at(108);
    if !vox_offset.is_finite() || vox_offset < HDR_SIZE as f32 {
        return Err(Error::Data(format!(
            "{}: invalid vox_offset {vox_offset}",
            path.display()
        )));
    }
    let start = vox_offset as usize;
    let need = start + n * elem;
    if bytes.len() < need {
        return Err(Error::Data(format!(
            "{}: truncated NIfTI data: need {need} bytes, have {}",
            path.display(),
            bytes.len()
        )));
    }
    let data_bytes = &bytes[start..need];

    let slope_raw = hdr.f32_at(112);
    let inter_raw = hdr.f32_at(116);
    let (slope, inter) = if slope_raw == 0.0 || !slope_raw.is_finite() {
        (1.0f32, 0.0f32)
    } else {
        (slope_raw, if inter_raw.is_finite() { inter_raw } else { 0.0 })
    };

    let take = |i: usize| -> f32 {
        let off = i * elem;
        let raw = &data_bytes[off..off + elem];
        let val = match datatype {
            DT_UINT8 => raw[0] as f32,
            DT_INT8 => raw[0] as i8 as f32,
            DT_INT16 => swap16(raw, hdr.swapped) as f32,
            DT_UINT16 => swap16(raw, hdr.swapped) as u16 as f32,
            DT_INT32 => swap32(raw, hdr.swapped) as i32 as f32,
            DT_UINT32 => swap32(raw, hdr.swapped) as f32,
            DT_FLOAT32 => f32::from_bits(swap32(raw, hdr.swapped)),
            DT_FLOAT64 => {
                let bits = u64::from_le_bytes(raw.try_into().unwrap());
                f64::from_bits(if hdr.swapped { bits.swap_bytes() } else { bits }) as f32
            }
            _ => unreachable!(),
        };
        val * slope + inter
    };
    let data: Vec<f32> = (0..n).map(take).collect();

    let pixdim = [
        hdr.f32_at(80) as f64,
        hdr.f32_at(84) as f64,
        hdr.f32_at(88) as f64,
    ];
    let sform_code = hdr.i16_at(254);
    let qform_code = hdr.i16_at(252);
    let affine = if sform_code > 0 {
        let mut a = [[0.0f64; 4]; 4];
        for (r, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
            for c in 0..4 {
                a[r][c] = hdr.f32_at(base + 4 * c) as f64;
            }
        }
        a[3][3] = 1.0;
        a
    } else if qform_code > 0 {
        qform_affine(&hdr)
    } else {
        let mut a = [[0.0f64; 4]; 4];
        for i in 0..3 {
            a[i][i] = if pixdim[i] > 0.0 { pixdim[i] } else { 1.0 };
        }
        a[3][3] = 1.0;
        a
    };

    let voxel_size = std::array::from_fn(|i| {
        if pixdim[i].is_finite() && pixdim[i] > 0.0 {
            pixdim[i]
        } else {
            // column norm of the linear part
            (0..3).map(|r| affine[r][i] * affine[r][i]).sum::<f64>().sqrt().max(1.0)
        }
    });

    Volume::new(shape, voxel_size, affine, data)
}

fn swap16(raw: &[u8], swapped: bool) -> i16 {
    let v = i16::from_le_bytes(raw.try_into().unwrap());
    if swapped { v.swap_bytes() } else { v }
}

fn swap32(raw: &[u8], swapped: bool) -> u32 {
    let v = u32::from_le_bytes(raw.try_into().unwrap());
    if swapped { v.swap_bytes() } else { v }
}

fn qform_affine(hdr: &Header) -> [[f64; 4]; 4] {
    let b = hdr.f32_at(256) as f64;
    let c = hdr.f32_at(260) as f64;
    let d = hdr.f32_at(264) as f64;
    let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
    let qfac = {
        let q = hdr.f32_at(76) as f64;
        if q < 0.0 { -1.0 } else { 1.0 }
    };
    let px = hdr.f32_at(80) as f64;
    let py = hdr.f32_at(84) as f64;
    let pz = hdr.f32_at(88) as f64 * qfac;
    let r = [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        ],
    ];
    let off = [
        hdr.f32_at(268) as f64,
        hdr.f32_at(272) as f64,
        hdr.f32_at(276) as f64,
    ];
    let scale = [px, py, pz];
    let mut out = [[0.0; 4]; 4];
    for row in 0..3 {
        for col in 0..3 {
            out[row][col] = r[row][col] * scale[col];
        }
        out[row][3] = off[row];
    }
    out[3][3] = 1.0;
    out
}

pub fn save_nifti(vol: &Volume, path: &Path) -> Result<()> {
    let n = vol.num_voxels();
    let mut bytes = vec![0u8; VOX_OFFSET + n * 4];

    let put_i32 = |b: &mut [u8], off: usize, v: i32| b[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_i16 = |b: &mut [u8], off: usize, v: i16| b[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |b: &mut [u8], off: usize, v: f32| b[off..off + 4].copy_from_slice(&v.to_le_bytes());

    put_i32(&mut bytes, 0, 348);
    // dim
    put_i16(&mut bytes, 40, 3);
    for i in 0..3 {
        if vol.shape[i] > i16::MAX as usize {
            return Err(Error::Data(format!(
                "volume dimension {} too large for NIfTI-1",
                vol.shape[i]
            )));
        }
        put_i16(&mut bytes, 42 + 2 * i, vol.shape[i] as i16);
    }
    for i in 3..7 {
        put_i16(&mut bytes, 42 + 2 * i, 1);
    }
    put_i16(&mut bytes, 70, DT_FLOAT32);
    put_i16(&mut bytes, 72, 32); // bitpix
    // pixdim: qfac then voxel sizes
    put_f32(&mut bytes, 76, 1.0);
    for i in 0..3 {
        put_f32(&mut bytes, 80 + 4 * i, vol.voxel_size[i] as f32);
    }
    put_f32(&mut bytes, 108, VOX_OFFSET as f32);
    put_f32(&mut bytes, 112, 1.0); // scl_slope
    put_f32(&mut bytes, 116, 0.0); // scl_inter
    put_i16(&mut bytes, 252, 0); // qform_code
    put_i16(&mut bytes, 254, 1); // sform_code: scanner aligned
    for (r, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
        for c in 0..4 {
            put_f32(&mut bytes, base + 4 * c, vol.grid_to_world[r][c] as f32);
        }
    }
    bytes[344..348].copy_from_slice(b"n+1\0");
    // bytes 348..352 stay zero: no header extensions

    for (i, v) in vol.data().iter().enumerate() {
        bytes[VOX_OFFSET + 4 * i..VOX_OFFSET + 4 * i + 4].copy_from_slice(&v.to_le_bytes());
    }

    if path
        .file_name()
        .map(|f| f.to_string_lossy().to_ascii_lowercase().ends_with(".gz"))
        .unwrap_or(false)
    {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = GzEncoder::new(file, Compression::default());
        use std::io::Write;
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
        Ok(())
    } else {
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}
