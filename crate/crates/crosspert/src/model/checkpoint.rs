//! Checkpoint persistence: a `manifest.json` describing the config and every
//! tensor, next to a `params.bin` holding the raw values.
//!
//! `params.bin` concatenates all tensors of the three networks in a fixed
//! order (basal encoder, perturbation encoder, decoder; within each, layer
//! order) as little-endian 32-bit floats, row-major. The manifest records,
//! per tensor, its name, shape, dtype, byte offset, and byte length, plus an
//! FNV-1a 64-bit digest of the whole binary so corruption is detected before
//! any value is trusted. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::util::{atomic_write, fnv1a64_hex};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: ModelConfig,
    params_digest: String,
    tensors: Vec<TensorEntry>,
}

/// The three network prefixes, in serialization order.
const SECTIONS: [&str; 3] = ["es", "ep", "dec"];

/// Writes `manifest.json` and `params.bin` into `dir`, creating it if needed.
pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<()> {
    let sections = [&model.params.es, &model.params.ep, &model.params.dec];
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for (prefix, params) in SECTIONS.iter().zip(sections) {
        for (name, tensor) in params.named_tensors() {
            let offset = blob.len() as u64;
            for &v in tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: format!("{prefix}.{name}"),
                shape: tensor.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                byte_len: blob.len() as u64 - offset,
            });
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        params_digest: fnv1a64_hex(&blob),
        tensors,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("could not serialize checkpoint manifest: {e}")))?;
    atomic_write(&dir.join(PARAMS_FILE), &blob)?;
    atomic_write(&dir.join(MANIFEST_FILE), manifest_json.as_bytes())?;
    Ok(())
}

/// Reads a checkpoint directory back into a model, verifying the format
/// version, the digest, and every tensor's dtype, bounds, and shape.
pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Format(format!("invalid checkpoint manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let params_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    let digest = fnv1a64_hex(&blob);
    if digest != manifest.params_digest {
        return Err(Error::Format(format!(
            "params.bin digest {digest} does not match manifest digest {}",
            manifest.params_digest
        )));
    }

    // Build a fresh model from the config so every tensor already has the
    // shape the topology implies, then overwrite values by name.
    let mut model: Model<f32> = Model::new(manifest.config.clone())?;
    let mut entries: std::collections::HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    if entries.len() != manifest.tensors.len() {
        return Err(Error::Format("duplicate tensor name in manifest".into()));
    }

    let sections = [
        &mut model.params.es,
        &mut model.params.ep,
        &mut model.params.dec,
    ];
    for (prefix, params) in SECTIONS.iter().zip(sections) {
        for (name, tensor) in params.named_tensors_mut() {
            let full = format!("{prefix}.{name}");
            let entry = entries.remove(full.as_str()).ok_or_else(|| {
                Error::Format(format!("checkpoint manifest is missing tensor {full}"))
            })?;
            if entry.dtype != "f32" {
                return Err(Error::Format(format!(
                    "tensor {full} has unsupported dtype {}",
                    entry.dtype
                )));
            }
            if entry.shape != tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor {full} has shape {:?} in the manifest but the config implies {:?}",
                    entry.shape,
                    tensor.shape()
                )));
            }
            let expected_len = tensor.data().len() as u64 * 4;
            if entry.byte_len != expected_len {
                return Err(Error::Format(format!(
                    "tensor {full} spans {} bytes but its shape needs {expected_len}",
                    entry.byte_len
                )));
            }
            let start = usize::try_from(entry.offset)
                .map_err(|_| Error::Format(format!("tensor {full} offset overflows")))?;
            let end = start
                .checked_add(entry.byte_len as usize)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| {
                    Error::Format(format!(
                        "tensor {full} extends past the end of params.bin ({} bytes)",
                        blob.len()
                    ))
                })?;
            for (dst, chunk) in tensor
                .data_mut()
                .iter_mut()
                .zip(blob[start..end].chunks_exact(4))
            {
                *dst = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
            }
        }
    }
    if let Some(stray) = entries.keys().next() {
        return Err(Error::Format(format!(
            "checkpoint manifest names tensor {stray} that the config does not imply"
        )));
    }
    Ok(model)
}
