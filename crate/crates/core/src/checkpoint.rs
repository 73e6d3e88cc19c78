//! Tensor container: a JSON manifest plus a little-endian f64 blob.
//!
//! Layout of a container file:
//!
//! ```text
//! [8-byte magic "TNSRBOX1"][u64 LE manifest length][manifest JSON][blob]
//! ```
//!
//! The manifest lists tensor names, shapes, and byte offsets into the
//! blob. Model checkpoints and dataset exports share this container;
//! round trips are bit-exact.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTModel};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"TNSRBOX1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
    /// Byte length of the tensor payload.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// In-memory form of a container.
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save_container(path: &Path, container: &Container) -> Result<()> {
    let mut entries = Vec::with_capacity(container.tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in &container.tensors {
        let bytes = tensor.le_bytes();
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: blob.len() as u64,
            len: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        version: VERSION,
        kind: container.kind.clone(),
        meta: container.meta.clone(),
        tensors: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    file.write_all(&blob)?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Container> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::corrupt("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(Error::corrupt(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::corrupt("file too short for manifest length"))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)
        .map_err(|_| Error::corrupt("file too short for manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| Error::corrupt(e.to_string()))?;
    if manifest.version != VERSION {
        return Err(Error::corrupt(format!(
            "unsupported container version {}",
            manifest.version
        )));
    }
    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;

    let expected_blob: u64 = manifest.tensors.iter().map(|e| e.len).sum();
    if blob.len() as u64 != expected_blob {
        return Err(Error::corrupt(format!(
            "blob is {} bytes, manifest expects {}",
            blob.len(),
            expected_blob
        )));
    }

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        if entry.len as usize != numel * 8 {
            return Err(Error::corrupt(format!(
                "tensor {} has shape {:?} but {} bytes",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if end > blob.len() {
            return Err(Error::corrupt(format!(
                "tensor {} extends past the blob end",
                entry.name
            )));
        }
        let values: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), values)
            .map_err(|e| Error::corrupt(format!("tensor {}: {e}", entry.name)))?;
        tensors.push((entry.name.clone(), tensor));
    }
    Ok(Container {
        kind: manifest.kind,
        meta: manifest.meta,
        tensors,
    })
}

const MODEL_KIND: &str = "vit-model";

/// Write a model checkpoint.
pub fn save_model(path: &Path, model: &ViTModel) -> Result<()> {
    let container = Container {
        kind: MODEL_KIND.to_string(),
        meta: serde_json::to_value(&model.config)?,
        tensors: model
            .params()
            .into_iter()
            .map(|(name, t)| (name, t.clone()))
            .collect(),
    };
    save_container(path, &container)
}

/// Load a model checkpoint; the round trip is bit-exact.
pub fn load_model(path: &Path) -> Result<ViTModel> {
    let container = load_container(path)?;
    if container.kind != MODEL_KIND {
        return Err(Error::corrupt(format!(
            "container kind {:?}, expected {MODEL_KIND:?}",
            container.kind
        )));
    }
    let config: ViTConfig =
        serde_json::from_value(container.meta).map_err(|e| Error::corrupt(e.to_string()))?;
    config.validate().map_err(|e| Error::corrupt(e.to_string()))?;
    let mut model = ViTModel::with_zero_params(config)?;

    let mut loaded = std::collections::BTreeMap::new();
    for (name, tensor) in container.tensors {
        loaded.insert(name, tensor);
    }
    for (name, param) in model.params_mut() {
        let tensor = loaded
            .remove(&name)
            .ok_or_else(|| Error::corrupt(format!("missing tensor {name}")))?;
        if tensor.shape() != param.shape() {
            return Err(Error::corrupt(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                tensor.shape(),
                param.shape()
            )));
        }
        *param = tensor;
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::vit::{InitScheme, ViTConfig};

    fn config() -> ViTConfig {
        ViTConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            layer_norm_eps: 1e-6,
            init: InitScheme::default(),
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let mut rng = stream(1, "ckpt");
        let model = ViTModel::init(config(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model.param_hash(), loaded.param_hash());
        assert_eq!(model.config, loaded.config);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut rng = stream(2, "ckpt-trunc");
        let model = ViTModel::init(config(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &model).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "got {err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not-a-container");
        std::fs::write(&path, b"PLAINTEXT????").unwrap();
        assert!(matches!(load_container(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let mut rng = stream(3, "ckpt-shape");
        let model = ViTModel::init(config(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        let mut container = Container {
            kind: "vit-model".into(),
            meta: serde_json::to_value(&model.config).unwrap(),
            tensors: model
                .params()
                .into_iter()
                .map(|(name, t)| (name, t.clone()))
                .collect(),
        };
        // Swap a tensor for one with an incompatible shape.
        container.tensors[0].1 = Tensor::zeros(vec![2, 2]);
        save_container(&path, &container).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Corrupt(_))));
    }
}
