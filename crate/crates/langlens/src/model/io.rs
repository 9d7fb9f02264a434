//! Weight file format.
//!
//! A weight file is a JSON manifest followed by a binary payload:
//!
//! ```text
//! [8 bytes]  manifest length, little-endian u64
//! [manifest] JSON: model config, optional note, ordered tensor index
//!            of { name, shape, offset } with offsets into the payload
//! [payload]  little-endian f64 values, row-major, tensor after tensor
//! ```
//!
//! Loading validates every tensor name, shape, and byte range against the
//! config before reconstructing the model, so a truncated payload or an
//! unknown tensor is rejected with a format error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::model::{ModelConfig, NamedTensorMap, TransformerWeights};

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Container<M> {
    #[serde(flatten)]
    meta: M,
    tensors: Vec<TensorEntry>,
}

/// Encode metadata plus named tensors into the container layout.
pub(crate) fn encode_container<M: Serialize>(
    meta: &M,
    tensors: &[(String, Vec<usize>, Vec<f64>)],
) -> Vec<u8> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, shape, data) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset: payload.len() as u64,
        });
        for value in data {
            payload.extend_from_slice(&value.to_le_bytes());
        }
    }
    // The manifest is one flat JSON object: the meta fields followed by
    // the tensor index.
    let meta_value = serde_json::to_value(meta).expect("meta serializes");
    let mut object = match meta_value {
        serde_json::Value::Object(map) => map,
        _ => panic!("container metadata must serialize to a JSON object"),
    };
    object.insert(
        "tensors".to_string(),
        serde_json::to_value(&entries).expect("entries serialize"),
    );
    let manifest_bytes =
        serde_json::to_vec(&serde_json::Value::Object(object)).expect("manifest serializes");

    let mut out = Vec::with_capacity(8 + manifest_bytes.len() + payload.len());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&payload);
    out
}

/// Decode a container, validating tensor byte ranges and exact payload use.
pub(crate) fn decode_container<M: serde::de::DeserializeOwned>(
    bytes: &[u8],
) -> Result<(M, NamedTensorMap)> {
    if bytes.len() < 8 {
        return Err(Error::Format(
            "file shorter than the length prefix".to_string(),
        ));
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().expect("checked length")) as usize;
    let manifest_end = 8usize
        .checked_add(manifest_len)
        .ok_or_else(|| Error::Format("manifest length overflows".to_string()))?;
    if bytes.len() < manifest_end {
        return Err(Error::Format(format!(
            "manifest declares {manifest_len} bytes but only {} remain",
            bytes.len() - 8
        )));
    }
    let manifest: Container<M> = serde_json::from_slice(&bytes[8..manifest_end])
        .map_err(|e| Error::Format(format!("manifest is not valid JSON: {e}")))?;
    let payload = &bytes[manifest_end..];

    let mut total: usize = 0;
    let mut tensors = NamedTensorMap::new();
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(count * 8)
            .ok_or_else(|| Error::Format(format!("tensor {} range overflows", entry.name)))?;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "tensor {} needs bytes {start}..{end} but payload has {}",
                entry.name,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("chunk of 8")));
        }
        if tensors
            .insert(entry.name.clone(), (entry.shape.clone(), data))
            .is_some()
        {
            return Err(Error::Format(format!(
                "duplicate tensor name {}",
                entry.name
            )));
        }
        total += count * 8;
    }
    if total != payload.len() {
        return Err(Error::Format(format!(
            "payload holds {} bytes but manifest accounts for {total}",
            payload.len()
        )));
    }
    Ok((manifest.meta, tensors))
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightMeta {
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

/// Serialize weights to the container format (no provenance note).
pub fn weights_to_bytes(weights: &TransformerWeights) -> Vec<u8> {
    encode_container(
        &WeightMeta {
            config: weights.config,
            note: None,
        },
        &weights.named_tensors(),
    )
}

/// Deserialize weights, returning the optional provenance note alongside.
pub fn weights_from_bytes(bytes: &[u8]) -> Result<(TransformerWeights, Option<String>)> {
    let (meta, tensors) = decode_container::<WeightMeta>(bytes)?;
    meta.config.validate()?;
    let weights = TransformerWeights::from_named_tensors(meta.config, tensors)?;
    Ok((weights, meta.note))
}

/// Save weights to `path` (atomically).
pub fn save_weights(path: &Path, weights: &TransformerWeights) -> Result<()> {
    write_atomic(path, &weights_to_bytes(weights))
}

/// Save weights with a provenance note, e.g. naming the fine-tuning mask.
pub fn save_weights_with_note(path: &Path, weights: &TransformerWeights, note: &str) -> Result<()> {
    let bytes = encode_container(
        &WeightMeta {
            config: weights.config,
            note: Some(note.to_string()),
        },
        &weights.named_tensors(),
    );
    write_atomic(path, &bytes)
}

/// Load weights from `path`; the provenance note, if any, is discarded.
pub fn load_weights(path: &Path) -> Result<TransformerWeights> {
    let bytes = std::fs::read(path)?;
    weights_from_bytes(&bytes).map(|(w, _)| w)
}
