//! Checkpoint files.
//!
//! ```text
//! [u64 LE: header length N][N bytes UTF-8 JSON header][tensor bytes]
//! ```
//!
//! The header is a JSON object. `__metadata__` holds `{"config": <model
//! config JSON string>}`; every other key is a tensor name mapped to
//! `{"dtype": "F32"|"F64", "shape": [..], "offset": B}` where `B` is the byte
//! offset of the tensor inside the data section. Tensors are stored
//! little-endian, row-major, back to back in header order.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{default_trainable, ModelConfig, ModelParams, Param};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const METADATA: &str = "__metadata__";

pub fn encode_checkpoint<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let mut header = Map::new();
    let config = serde_json::to_string(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    header.insert(METADATA.into(), json!({ "config": config }));
    let mut offset = 0usize;
    for p in params.params() {
        header.insert(
            p.name.clone(),
            json!({ "dtype": T::DTYPE, "shape": p.value.shape(), "offset": offset }),
        );
        offset += p.value.len() * T::BYTES;
    }
    let header = serde_json::to_vec(&Value::Object(header)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in params.params() {
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn parse_header(bytes: &[u8]) -> Result<(Map<String, Value>, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file shorter than the 8-byte header length".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let avail = (bytes.len() - 8) as u64;
    if n > avail {
        return Err(Error::Checkpoint(format!(
            "header length {n} exceeds the {avail} bytes that follow it"
        )));
    }
    let n = n as usize;
    let header: Value = serde_json::from_slice(&bytes[8..8 + n])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let Value::Object(map) = header else {
        return Err(Error::Checkpoint("header is not a JSON object".into()));
    };
    Ok((map, &bytes[8 + n..]))
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8], cfg: &ModelConfig) -> Result<ModelParams<T>> {
    let (header, data) = parse_header(bytes)?;
    let mut params = Vec::new();
    let mut expected_offset = 0usize;
    for (name, entry) in &header {
        if name == METADATA {
            continue;
        }
        let field = |key: &str| {
            entry
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` lacks `{key}`")))
        };
        let dtype = field("dtype")?.as_str().unwrap_or_default();
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has dtype {dtype}, expected {}",
                T::DTYPE
            )));
        }
        let shape: Vec<usize> = serde_json::from_value(field("shape")?.clone())
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}` shape: {e}")))?;
        let offset = field("offset")?
            .as_u64()
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` offset is not an integer")))?
            as usize;
        if offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` at offset {offset}, expected {expected_offset}"
            )));
        }
        let count: usize = shape.iter().product();
        let end = offset + count * T::BYTES;
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: tensor `{name}` needs bytes {offset}..{end}, data has {}",
                data.len()
            )));
        }
        let values = data[offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        params.push(Param {
            trainable: default_trainable(name),
            name: name.clone(),
            value: Tensor::new(shape, values)?,
        });
        expected_offset = end;
    }
    if expected_offset != data.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            data.len() - expected_offset
        )));
    }
    let params = ModelParams::from_params(params);
    params.check_against(cfg)?;
    Ok(params)
}

pub fn save_checkpoint<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, cfg)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and validates every tensor against `cfg`.
pub fn load_checkpoint<T: Real>(path: &Path, cfg: &ModelConfig) -> Result<ModelParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, cfg)
}

/// The model config recorded in a checkpoint's metadata.
pub fn read_checkpoint_config(path: &Path) -> Result<ModelConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = parse_header(&bytes)?;
    let config = header
        .get(METADATA)
        .and_then(|m| m.get("config"))
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Checkpoint("metadata has no config".into()))?;
    serde_json::from_str(config).map_err(|e| Error::Checkpoint(format!("metadata config: {e}")))
}

/// Errors with the first model field on which the checkpoint's recorded
/// config disagrees with `cfg`. Seeds are not compared.
pub fn ensure_checkpoint_matches(path: &Path, cfg: &ModelConfig) -> Result<()> {
    let saved = read_checkpoint_config(path)?;
    let as_map = |c: &ModelConfig| match serde_json::to_value(c) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("ModelConfig serializes to an object"),
    };
    let (a, b) = (as_map(&saved), as_map(cfg));
    for (key, v) in &b {
        if key == "init_seed" {
            continue;
        }
        if a.get(key) != Some(v) {
            return Err(Error::ConfigMismatch {
                field: format!("model.{key}"),
                checkpoint: a.get(key).map_or("nothing".into(), Value::to_string),
                config: v.to_string(),
            });
        }
    }
    Ok(())
}
