//! Checkpoints: a safetensors parameter blob plus a JSON sidecar.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VatError};
use crate::fingerprint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Restoration,
    Task,
    /// Gate plus the forward transformation module.
    Translator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: ModelRole,
    pub architecture: serde_json::Value,
    pub dataset_fingerprint: Option<String>,
    pub seed: u64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    /// SHA-256 of the weights file, filled in on save.
    #[serde(default)]
    pub weights_sha256: String,
}

impl CheckpointMeta {
    pub fn new(role: ModelRole, architecture: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(Self {
            role,
            architecture: serde_json::to_value(architecture)?,
            dataset_fingerprint: None,
            seed,
            metrics: BTreeMap::new(),
            weights_sha256: String::new(),
        })
    }

    pub fn architecture<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.architecture.clone())?)
    }
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

/// Saves the variables of `varmap` whose names start with `prefix.` (all when
/// `prefix` is empty) and writes the sidecar. Returns the completed metadata.
pub fn save(varmap: &VarMap, prefix: &str, path: &Path, mut meta: CheckpointMeta) -> Result<CheckpointMeta> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| VatError::io(format!("creating {}", parent.display()), e))?;
    }
    let tensors: HashMap<String, Tensor> = {
        let data = varmap.data().lock().expect("varmap lock poisoned");
        data.iter()
            .filter(|(k, _)| prefix.is_empty() || k.starts_with(&format!("{prefix}.")))
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().to_dtype(DType::F32)?)))
            .collect::<candle_core::Result<_>>()?
    };
    if tensors.is_empty() {
        return Err(VatError::Empty(format!("no parameters under prefix {prefix:?}")));
    }
    candle_core::safetensors::save(&tensors, path)?;
    meta.weights_sha256 = fingerprint::of_file(path)?;
    let sidecar = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&sidecar, text).map_err(|e| VatError::io(format!("writing {}", sidecar.display()), e))?;
    Ok(meta)
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let sidecar = sidecar_path(path);
    if !path.exists() {
        return Err(VatError::MissingCheckpoint(path.to_path_buf()));
    }
    if !sidecar.exists() {
        return Err(VatError::MissingCheckpoint(sidecar));
    }
    let text = fs::read_to_string(&sidecar).map_err(|e| VatError::io(format!("reading {}", sidecar.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads the weights after checking them against the sidecar hash.
pub fn load_tensors(path: &Path, expected_role: ModelRole) -> Result<(CheckpointMeta, HashMap<String, Tensor>)> {
    let meta = load_meta(path)?;
    if meta.role != expected_role {
        return Err(VatError::Precondition(format!(
            "{} holds a {:?} model, expected {:?}",
            path.display(),
            meta.role,
            expected_role
        )));
    }
    fingerprint::verify_file(path, &meta.weights_sha256)?;
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
    Ok((meta, tensors))
}

/// A read-only `VarBuilder` over a checkpoint: parameters are plain tensors
/// and never tracked for gradients.
pub fn frozen_var_builder(path: &Path, role: ModelRole, dtype: DType) -> Result<(CheckpointMeta, VarBuilder<'static>)> {
    let (meta, tensors) = load_tensors(path, role)?;
    Ok((meta, VarBuilder::from_tensors(tensors, dtype, &Device::Cpu)))
}

/// Copies checkpoint values into existing variables of `varmap`.
pub fn load_into(varmap: &VarMap, path: &Path, role: ModelRole) -> Result<CheckpointMeta> {
    let (meta, tensors) = load_tensors(path, role)?;
    let data = varmap.data().lock().expect("varmap lock poisoned");
    for (name, value) in tensors {
        let var = data
            .get(&name)
            .ok_or_else(|| VatError::Precondition(format!("checkpoint variable {name} has no slot")))?;
        var.set(&value.to_dtype(var.dtype())?)?;
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init::seeded_var_builder;
    use crate::nets::layers::Conv1x1;

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let vm = VarMap::new();
        let vb = seeded_var_builder(&vm, 1, DType::F32, &Device::Cpu);
        Conv1x1::new(2, 3, vb.pp("a")).unwrap();
        Conv1x1::new(2, 3, vb.pp("b")).unwrap();
        let meta = CheckpointMeta::new(ModelRole::Task, &serde_json::json!({"w": 1}), 7).unwrap();
        let saved = save(&vm, "a", &path, meta).unwrap();
        let (loaded, tensors) = load_tensors(&path, ModelRole::Task).unwrap();
        assert_eq!(loaded, saved);
        assert_eq!(tensors.len(), 2);
        assert!(tensors.keys().all(|k| k.starts_with("a.")));
        assert!(load_tensors(&path, ModelRole::Restoration).is_err());

        let vm2 = VarMap::new();
        let vb2 = seeded_var_builder(&vm2, 2, DType::F32, &Device::Cpu);
        Conv1x1::new(2, 3, vb2.pp("a")).unwrap();
        load_into(&vm2, &path, ModelRole::Task).unwrap();
        let w1: Vec<f32> = vm.data().lock().unwrap()["a.weight"].flatten_all().unwrap().to_vec1().unwrap();
        let w2: Vec<f32> = vm2.data().lock().unwrap()["a.weight"].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(w1, w2);

        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(
            load_tensors(&path, ModelRole::Task),
            Err(VatError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn missing_checkpoint_names_path() {
        let err = load_meta(Path::new("/nonexistent/r.safetensors")).unwrap_err();
        assert!(err.to_string().contains("missing checkpoint: /nonexistent/r.safetensors"));
    }
}
