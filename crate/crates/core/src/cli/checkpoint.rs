//! Checkpoints: `manifest.json` (config, config hash, parameter names and
//! shapes) plus one raw little-endian `f64` blob per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::param::Module;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Model input channels and token vocabulary, needed to rebuild the model.
    pub in_channels: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<ParamEntry>,
}

/// Everything needed to rebuild a model, plus its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub values: BTreeMap<String, Tensor>,
}

fn blob_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' {
                c
            } else {
                '-'
            }
        })
        .collect();
    format!("{safe}.bin")
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    dir: &Path,
    model: &dyn Module,
    config: &ExperimentConfig,
    in_channels: usize,
    vocab_size: usize,
    seed: u64,
    step: u64,
) -> Result<()> {
    let blobs = dir.join("params");
    fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
    let mut entries = Vec::new();
    for p in model.params() {
        let file = blob_name(&p.name);
        let bytes: Vec<u8> = p
            .value
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let path = blobs.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            file,
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash: config.hash(),
        config: config.clone(),
        in_channels,
        vocab_size,
        seed,
        step,
        params: entries,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Checkpoint(
            "config hash does not match the stored config".into(),
        ));
    }
    let mut values = BTreeMap::new();
    for e in &manifest.params {
        let blob = dir.join("params").join(&e.file);
        let bytes = fs::read(&blob).map_err(|err| Error::io(&blob, err))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!("{}: truncated blob", e.name)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
        values.insert(e.name.clone(), t);
    }
    Ok(Checkpoint { manifest, values })
}

/// Copies stored values into `model`; names and shapes must match exactly.
pub fn apply_values(model: &mut dyn Module, values: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut missing = Vec::new();
    let mut mismatch = None;
    let mut seen = 0;
    model.visit_mut(&mut |p| match values.get(&p.name) {
        Some(v) if v.shape() == p.value.shape() => {
            p.value = v.clone();
            seen += 1;
        }
        Some(v) => {
            mismatch.get_or_insert_with(|| {
                format!(
                    "{}: stored shape {:?}, model shape {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )
            });
        }
        None => missing.push(p.name.clone()),
    });
    if let Some(m) = mismatch {
        return Err(Error::Checkpoint(m));
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "missing parameters: {}",
            missing.join(", ")
        )));
    }
    if seen != values.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {seen}",
            values.len()
        )));
    }
    Ok(())
}

/// In-memory snapshot of every parameter (including buffers).
pub fn snapshot(model: &dyn Module) -> BTreeMap<String, Tensor> {
    model
        .params()
        .into_iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}
