//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic `VOLCKPT1`, a little-endian u64 header length, a
//! JSON header (model config, tensor directory, free-form metadata), then
//! all tensor payloads as little-endian f64 in directory order. The
//! directory makes files readable without the producing code: each entry
//! records the tensor name, shape, and element offset into the payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CvaeModel, ModelConfig, ModelParameters, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VOLCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element (not byte) offset into the payload.
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

/// Core writer: any named-tensor store plus an arbitrary JSON config and
/// metadata. Shared by model checkpoints, trainer state, and the baseline
/// models.
pub(crate) fn save_tensors(
    config: &serde_json::Value,
    params: &ModelParameters,
    meta: &BTreeMap<String, serde_json::Value>,
    path: &Path,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.len() as u64,
        });
        offset += t.len() as u64;
    }
    let header = Header {
        config: config.clone(),
        tensors,
        meta: meta.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Data(format!("encode header: {e}")))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header_json).map_err(io)?;
    for (_, t) in params.iter() {
        for v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Core reader: returns the stored config, tensors, and metadata after
/// directory and finiteness validation (no model-layout check).
pub(crate) fn load_tensors(
    path: &Path,
) -> Result<(serde_json::Value, ModelParameters, BTreeMap<String, serde_json::Value>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 30 {
        return Err(Error::Data("checkpoint header is implausibly large".into()));
    }
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(io)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Data(format!("decode checkpoint header: {e}")))?;

    let mut params = ModelParameters::empty();
    let mut expected_offset = 0u64;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io)?;
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        if numel as u64 != entry.len {
            return Err(Error::Data(format!(
                "tensor {} declares len {} but shape {:?}",
                entry.name, entry.len, entry.shape
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::Data(format!(
                "tensor {} has offset {}, expected {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let start = (entry.offset as usize) * 8;
        let end = start + numel * 8;
        if end > payload.len() {
            return Err(Error::Data(format!(
                "checkpoint payload truncated at tensor {}",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.insert(&entry.name, Tensor::from_vec(&entry.shape, data));
        expected_offset += entry.len;
    }
    if (expected_offset as usize) * 8 != payload.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} payload bytes, directory covers {}",
            payload.len(),
            expected_offset * 8
        )));
    }
    super::check_finite(&params)?;
    Ok((header.config, params, header.meta))
}

/// Write `model` (and optional metadata such as the training epoch) to
/// `path`.
pub fn save(
    model: &CvaeModel,
    meta: &BTreeMap<String, serde_json::Value>,
    path: &Path,
) -> Result<()> {
    let config = serde_json::to_value(&model.config)
        .map_err(|e| Error::Data(format!("encode model config: {e}")))?;
    save_tensors(&config, &model.params, meta, path)
}

/// Read a model checkpoint; validates the tensor directory against the
/// stored config and checks all values are finite.
pub fn load(path: &Path) -> Result<(CvaeModel, BTreeMap<String, serde_json::Value>)> {
    let (config_json, params, meta) = load_tensors(path)?;
    let config: ModelConfig = serde_json::from_value(config_json)
        .map_err(|e| Error::Data(format!("decode model config: {e}")))?;
    config.validate()?;
    let model = CvaeModel { config, params };
    model.check_layout()?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> CvaeModel {
        let cfg = ModelConfig {
            latent_dim: 3,
            encoder_blocks: 2,
            channels: vec![4, 8],
            image_size: 8,
            ..ModelConfig::default()
        };
        CvaeModel::init(cfg, 17).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), serde_json::json!(12));
        save(&model, &meta, &path).unwrap();

        let (loaded, meta2) = load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(meta2.get("epoch"), Some(&serde_json::json!(12)));
        assert_eq!(loaded.params.len(), model.params.len());
        for (name, t) in model.params.iter() {
            let l = loaded.params.try_get(name).expect("tensor present");
            assert_eq!(l.shape, t.shape);
            for (a, b) in l.data.iter().zip(&t.data) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} not bitwise equal");
            }
        }
    }

    #[test]
    fn second_save_is_byte_identical() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let meta = BTreeMap::new();
        save(&model, &meta, &a).unwrap();
        save(&model, &meta, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT00000000").unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&model, &BTreeMap::new(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn missing_tensor_is_rejected() {
        // hand-build a header that drops one tensor
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.ckpt");
        save(&model, &BTreeMap::new(), &good).unwrap();

        let mut tensors = Vec::new();
        let mut offset = 0u64;
        let mut payload = Vec::new();
        for (name, t) in model.params.iter() {
            if name == "decoder.out.bias" {
                continue;
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.len() as u64,
            });
            offset += t.len() as u64;
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            config: serde_json::to_value(&model.config).unwrap(),
            tensors,
            meta: BTreeMap::new(),
        };
        let hj = serde_json::to_vec(&header).unwrap();
        let path = dir.path().join("bad.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(hj.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&hj);
        bytes.extend_from_slice(&payload);
        std::fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("tensors"), "{err}");
    }
}
