//! Run configuration and `--set key=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tfilm_core::model::ModelConfig;
use tfilm_core::train::{Task, TrainConfig};

use crate::error::CliError;

/// Everything `train` needs; also the file it writes as its resolved config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: Task,
    /// Patch stride; half the patch length when absent.
    pub patch_stride: Option<usize>,
}

/// Sets `path` (dot-separated keys) in a JSON object tree. The value is parsed
/// as JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Usage(format!("empty key segment in {key:?}")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("{key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = obj
            .entry((*part).to_owned())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}

/// Reads an optional JSON config, applies overrides, and deserializes.
/// Unknown keys are rejected.
pub fn resolve<T>(path: Option<&Path>, overrides: &[String]) -> Result<T, CliError>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
        }
        None => serde_json::to_value(T::default()).expect("defaults serialize"),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}
