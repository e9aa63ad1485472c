// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoints are a JSON header naming every tensor with its shape and byte
//! offset, next to a flat little-endian `f64` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Weights};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "ablation-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Blob file name, relative to the header.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

fn blob_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

/// Writes `header_path` and a sibling `.bin` blob.
pub fn save(weights: &Weights<f64>, header_path: &Path, metadata: serde_json::Map<String, serde_json::Value>) -> Result<()> {
    let blob = blob_path(header_path);
    let mut bytes = Vec::with_capacity(weights.num_params() * 8);
    let mut tensors = Vec::new();
    for (name, t) in weights.named() {
        let offset = bytes.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset, bytes: bytes.len() - offset });
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: 1,
        config: weights.config.clone(),
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", header_path.display())))?
            .to_string(),
        tensors,
        metadata,
    };
    fs::write(&blob, &bytes)?;
    fs::write(header_path, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn load(header_path: &Path) -> Result<(Weights<f64>, CheckpointHeader)> {
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(header_path)?)?;
    if header.format != FORMAT || header.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(&header.blob))?;
    let mut weights = Weights::<f64>::zeros(&header.config)?;
    let expected: Vec<(String, Vec<usize>)> =
        weights.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "header lists {} tensors, the config needs {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((dst, (name, shape)), entry) in weights.params_mut().into_iter().zip(expected).zip(&header.tensors) {
        if entry.name != name || entry.shape != shape {
            return Err(Error::Checkpoint(format!("expected {name} {shape:?}, found {} {:?}", entry.name, entry.shape)));
        }
        let n: usize = shape.iter().product();
        if entry.bytes != n * 8 || entry.offset + entry.bytes > bytes.len() {
            return Err(Error::Checkpoint(format!("tensor {name} lies outside the blob")));
        }
        let data = bytes[entry.offset..entry.offset + entry.bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of eight")))
            .collect();
        *dst = Tensor::new(shape, data)?;
    }
    Ok((weights, header))
}
