//! Model checkpoints: one golden tensor file per parameter plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::{io, DType, Scalar, Shape};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Shape,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ModelSpec,
    pub seed: u64,
    pub dtype: DType,
    pub params: Vec<ParamEntry>,
}

fn file_name(param: &str) -> String {
    format!("{param}.supt")
}

pub fn save<T: Scalar>(model: &Model<T>, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(model.store.len());
    for p in model.store.iter() {
        let file = file_name(&p.name);
        io::save(dir.join(&file), &p.value)?;
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape(),
            file,
        });
    }
    let manifest = Manifest {
        spec: model.spec.clone(),
        seed: model.seed,
        dtype: T::DTYPE,
        params,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds the model from the manifest and overwrites every parameter from
/// its file. Names and shapes must match the rebuilt model exactly.
pub fn load<T: Scalar>(dir: impl AsRef<Path>) -> Result<Model<T>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut model = Model::<T>::build(manifest.spec.clone(), manifest.seed)?;
    if manifest.params.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model has {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.params {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{}`", entry.name)))?;
        let tensor = io::load(dir.join(&entry.file))?;
        let expected = model.store.get(id).value.shape();
        if tensor.shape() != expected || entry.shape != expected {
            return Err(Error::Format(format!(
                "parameter `{}` has shape {}, model expects {expected}",
                entry.name,
                tensor.shape()
            )));
        }
        model.store.get_mut(id).value = tensor.into_tensor();
    }
    Ok(model)
}
