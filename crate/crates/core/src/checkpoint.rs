//! Checkpoints are a pair of files next to each other:
//!
//! * `<name>.weights`: every parameter and buffer as a safetensors blob; the
//!   blob's header metadata repeats the model config under `config`.
//! * `<name>.meta.json`: `{ "config", "epoch", "seed", "metrics" }`.
//!
//! Loading rebuilds the model from the stored config and then requires the
//! tensor set to match it exactly.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use safetensors::tensor::TensorView;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::backbone::{decode_tensor, BackboneSource};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{build_model, HybridModel, ModelConfig};
use crate::nn::Module;
use crate::tensor::Scalar;

const CONFIG_KEY: &str = "config";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
}

/// `(weights, meta)` file paths for a checkpoint name. `path` may be the bare
/// name or either of the two files.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".meta.json")
        .or_else(|| s.strip_suffix(".weights"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}.weights")),
        PathBuf::from(format!("{stem}.meta.json")),
    )
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn save_checkpoint<T: Scalar>(
    model: &HybridModel<T>,
    path: &Path,
    epoch: usize,
    seed: u64,
    metrics: Option<&MetricsReport>,
) -> Result<()> {
    let (weights_path, meta_path) = checkpoint_paths(path);
    if let Some(dir) = weights_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let meta = CheckpointMeta {
        config: model.config().clone(),
        epoch,
        seed,
        metrics: metrics.cloned(),
    };
    let mut blobs: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    model.visit_params("", &mut |name, p| {
        let mut bytes = Vec::with_capacity(p.len() * std::mem::size_of::<T>());
        for &v in p.value.iter() {
            v.push_le_bytes(&mut bytes);
        }
        blobs.insert(name.to_string(), (p.value.shape().to_vec(), bytes));
    });
    let views = blobs
        .iter()
        .map(|(name, (shape, bytes))| {
            TensorView::new(T::DTYPE, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::invalid(format!("cannot serialize `{name}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let header = HashMap::from([(CONFIG_KEY.to_string(), serde_json::to_string(&meta.config)?)]);
    let bytes = safetensors::serialize(views, Some(header))
        .map_err(|e| Error::invalid(format!("cannot serialize checkpoint: {e}")))?;
    std::fs::write(&weights_path, bytes).map_err(|e| Error::io(&weights_path, e))?;
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let (_, meta_path) = checkpoint_paths(path);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| corrupt(&meta_path, format!("unreadable metadata: {e}")))
}

/// Loads a checkpoint, rebuilding the model from its stored config.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(HybridModel<T>, CheckpointMeta)> {
    let (weights_path, _) = checkpoint_paths(path);
    let meta = read_checkpoint_meta(path)?;
    let bytes = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let tensors =
        SafeTensors::deserialize(&bytes).map_err(|e| corrupt(&weights_path, e.to_string()))?;
    let (_, header) =
        SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(&weights_path, e.to_string()))?;
    let embedded = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(CONFIG_KEY))
        .ok_or_else(|| corrupt(&weights_path, "weights carry no embedded config"))?;
    let embedded: ModelConfig = serde_json::from_str(embedded)
        .map_err(|e| corrupt(&weights_path, format!("embedded config unreadable: {e}")))?;
    if embedded != meta.config {
        return Err(Error::ConfigMismatch(format!(
            "{} was written for a different config than its metadata describes",
            weights_path.display()
        )));
    }
    meta.config
        .validate()
        .map_err(|e| Error::ConfigMismatch(e.to_string()))?;
    let mut model = build_model::<T>(&meta.config, &BackboneSource::RandomInit, 0)?;

    let mut loaded: HashMap<String, ArrayD<T>> = HashMap::new();
    let mut problems = Vec::new();
    model.visit_params("", &mut |name, p| match tensors.tensor(name) {
        Ok(view) => match decode_tensor::<T>(view.dtype(), view.shape(), view.data()) {
            Ok(arr) if arr.shape() == p.value.shape() => {
                loaded.insert(name.to_string(), arr);
            }
            Ok(arr) => problems.push(format!(
                "`{name}` has shape {:?}, config implies {:?}",
                arr.shape(),
                p.value.shape()
            )),
            Err(e) => problems.push(format!("`{name}`: {e}")),
        },
        Err(_) => problems.push(format!("missing tensor `{name}`")),
    });
    if problems.is_empty() && loaded.len() != tensors.len() {
        let mut extra: Vec<_> = tensors
            .names()
            .into_iter()
            .filter(|n| !loaded.contains_key(*n))
            .collect();
        extra.sort();
        problems.push(format!("unexpected tensor `{}`", extra[0]));
    }
    if let Some(detail) = problems.first() {
        return Err(Error::ConfigMismatch(format!(
            "{} does not match its config: {detail}",
            weights_path.display()
        )));
    }
    model.visit_params_mut("", &mut |name, p| {
        if let Some(v) = loaded.remove(name) {
            p.value = v;
        }
    });
    Ok((model, meta))
}

/// Like [`load_checkpoint`], but also requires the stored config to equal
/// `expected`.
pub fn load_checkpoint_expecting<T: Scalar>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(HybridModel<T>, CheckpointMeta)> {
    let meta = read_checkpoint_meta(path)?;
    if &meta.config != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint config {:?} differs from the requested {:?}",
            meta.config, expected
        )));
    }
    load_checkpoint(path)
}
