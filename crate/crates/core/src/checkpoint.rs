//! Binary checkpoint container for a [`Model`].
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "TFLM" | u16 version | u32 n | n bytes of JSON {"model": ModelConfig, ...}
//! u32 parameter count
//! per parameter: u32 name length | UTF-8 name | u32 rank | rank × u64 extents
//!                | product(extents) × f32 values
//! ```
//!
//! Values are stored as `f32`, so a loaded model equals
//! [`Model::rounded_to_f32`] of the saved one.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{build_model, Model, ModelConfig, ModelError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TFLM";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Serializes `model`; `extras` are merged into the config block beside
/// `"model"`.
pub fn encode(model: &Model, extras: &Map<String, Value>) -> Result<Vec<u8>> {
    let mut config = Map::new();
    config.insert("model".into(), serde_json::to_value(model.config())?);
    for (k, v) in extras {
        if k != "model" {
            config.insert(k.clone(), v.clone());
        }
    }
    let json = serde_json::to_vec(&Value::Object(config))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        let name = p.name().unwrap_or_default().as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.rank() as u32).to_le_bytes());
        for &e in p.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in p.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the model from its config and fills in the stored values; names
/// and shapes must agree with what the config builds.
pub fn decode(bytes: &[u8]) -> Result<(Model, Map<String, Value>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let json_len = r.u32()? as usize;
    let mut config: Map<String, Value> = serde_json::from_slice(r.take(json_len)?)?;
    let model_cfg = config
        .remove("model")
        .ok_or_else(|| CheckpointError::Mismatch("config block has no \"model\" entry".into()))?;
    let model_cfg: ModelConfig = serde_json::from_value(model_cfg)?;
    let mut model = build_model(&model_cfg, 0)?;

    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(CheckpointError::Mismatch(format!(
            "config builds {} parameters, file holds {count}",
            model.params().len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for expected in model.params() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Mismatch("parameter name is not UTF-8".into()))?;
        let want = expected.name().unwrap_or_default();
        if name != want {
            return Err(CheckpointError::Mismatch(format!("expected parameter {want:?}, found {name:?}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        if shape != expected.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "{name}: expected shape {:?}, found {shape:?}",
                expected.shape()
            )));
        }
        let data = r
            .take(4 * expected.len())?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        values.push(Tensor::new(shape, data).expect("shape checked"));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - r.pos
        )));
    }
    model.set_params(values)?;
    Ok((model, config))
}

pub fn save(path: &Path, model: &Model, extras: &Map<String, Value>) -> Result<()> {
    let bytes = encode(model, extras)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(Model, Map<String, Value>)> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
