//! Binary checkpoint container.
//!
//! Layout: `RDCK` magic, little-endian `u32` format version, `u64` header
//! length, JSON header, then every tensor as little-endian `f64` in header
//! order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::denoiser::{DenoiserConfig, DenoiserParams, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RDCK";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: DenoiserConfig,
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub step: u64,
    pub seed: u64,
}

pub fn encode(params: &DenoiserParams, step: u64, seed: u64) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: params.config.clone(),
        config_hash: params.config.hash(),
        step,
        seed,
        tensors: params
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<Checkpoint> {
    let b = &mut bytes;
    if take(b, 4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(b, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(take(b, 8, "header length")?.try_into().expect("8 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(b, len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let actual = header.config.hash();
    if header.config_hash != actual {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: recorded {}, computed {actual}",
            header.config_hash
        )));
    }
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(b, 8 * n, &entry.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?);
    }
    if !b.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", b.len())));
    }
    let expected = DenoiserParams::init(&header.config, 0)?;
    for (name, t) in &expected.tensors {
        match tensors.get(name) {
            None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            Some(got) if got.shape() != t.shape() => {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    got.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = tensors.keys().find(|k| !expected.tensors.contains_key(*k)) {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        params: DenoiserParams {
            config: header.config,
            tensors,
        },
        step: header.step,
        seed: header.seed,
    })
}

pub fn save(path: &Path, params: &DenoiserParams, step: u64, seed: u64) -> Result<()> {
    let bytes = encode(params, step, seed)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads and requires the stored config to equal `expected`.
pub fn load_expecting(path: &Path, expected: &DenoiserConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    if let Some(key) = first_mismatch(&ck.params.config, expected)? {
        return Err(Error::Checkpoint(format!(
            "checkpoint config differs from requested config at `{key}`"
        )));
    }
    Ok(ck)
}

/// Dotted path of the first differing field, keys compared alphabetically.
pub fn first_mismatch(a: &DenoiserConfig, b: &DenoiserConfig) -> Result<Option<String>> {
    fn walk(a: &Value, b: &Value, path: &str) -> Option<String> {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                for (k, va) in x {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match y.get(k) {
                        Some(vb) => {
                            if let Some(m) = walk(va, vb, &p) {
                                return Some(m);
                            }
                        }
                        None => return Some(p),
                    }
                }
                y.keys().find(|k| !x.contains_key(*k)).map(|k| format!("{path}.{k}"))
            }
            _ if a == b => None,
            _ => Some(if path.is_empty() { "<root>".into() } else { path.into() }),
        }
    }
    Ok(walk(&serde_json::to_value(a)?, &serde_json::to_value(b)?, ""))
}
