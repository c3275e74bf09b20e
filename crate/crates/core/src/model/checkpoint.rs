//! Binary checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! offset 0   8 bytes   magic "WBCCKPT\0"
//! offset 8   u32       format version (1)
//! offset 12  u64       manifest length L in bytes
//! offset 20  L bytes   UTF-8 TOML manifest
//! then       f64 LE    every tensor listed in the manifest, in order
//! ```
//!
//! The manifest records the stage, the stage config and its hash, training
//! metadata, component configs for hybrids, and each tensor's name and shape.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_stage, Model};
use crate::config::{Stage, StageConfig};
use crate::error::{Error, Result};
use crate::nn::{named_tensors, Module};
use crate::rng::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WBCCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Epoch the weights come from (1-based; 0 for untrained).
    pub epoch: usize,
    /// Validation accuracy in percent at that epoch.
    pub val_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    stage: Stage,
    config_hash: String,
    meta: CheckpointMeta,
    config: StageConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    components: Vec<StageConfig>,
    tensors: Vec<TensorEntry>,
}

fn component_configs(model: &Model) -> Vec<StageConfig> {
    match &model.body {
        super::Body::Hybrid { a, b, .. } => vec![a.config().clone(), b.config().clone()],
        super::Body::Single { .. } => Vec::new(),
    }
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let tensors = named_tensors(model);
    let manifest = Manifest {
        stage: model.stage(),
        config_hash: model.config().hash()?,
        meta: meta.clone(),
        config: model.config().clone(),
        components: component_configs(model),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let text =
        toml::to_string(&manifest).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut buf = Vec::with_capacity(
        20 + text.len() + tensors.iter().map(|(_, t)| 8 * t.len()).sum::<usize>(),
    );
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Load a checkpoint. With `expected` set, a config-hash mismatch is refused.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&StageConfig>,
) -> Result<(Model, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let text = bytes
        .get(20..20 + len)
        .ok_or_else(|| bad("truncated manifest"))?;
    let text = std::str::from_utf8(text).map_err(|_| bad("manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| bad(&format!("manifest: {e}")))?;

    let hash = manifest.config.hash()?;
    if hash != manifest.config_hash || manifest.stage != manifest.config.stage {
        return Err(bad("manifest is inconsistent with its config"));
    }
    if let Some(exp) = expected {
        let want = exp.hash()?;
        if want != hash {
            return Err(bad(&format!(
                "config hash {hash} does not match the expected {want} (stage {} vs {})",
                manifest.stage, exp.stage
            )));
        }
    }

    let mut rng = Rng::new(0);
    let components = match manifest.config.stage.components() {
        None => None,
        Some(_) => {
            let [ca, cb] = <[StageConfig; 2]>::try_from(manifest.components.clone())
                .map_err(|_| bad("hybrid checkpoint needs two component configs"))?;
            Some((
                build_stage(&ca, None, &mut rng)?,
                build_stage(&cb, None, &mut rng)?,
            ))
        }
    };
    let mut model = build_stage(&manifest.config, components, &mut rng)?;

    let mut offset = 20 + len;
    let mut data = std::collections::HashMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad(&format!("truncated data for {}", e.name)))?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data.insert(e.name.clone(), (e.shape.clone(), vals));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let mut result = Ok(());
    let mut seen = 0;
    model.visit_mut("", &mut |name, t| {
        if result.is_err() {
            return;
        }
        match data.get(&name) {
            Some((shape, vals)) if shape.as_slice() == t.shape() => {
                t.data_mut().copy_from_slice(vals);
                seen += 1;
            }
            Some((shape, _)) => {
                result = Err(Error::Checkpoint(format!(
                    "tensor {name}: stored shape {shape:?}, model expects {:?}",
                    t.shape()
                )))
            }
            None => {
                result = Err(Error::Checkpoint(format!(
                    "tensor {name} missing from checkpoint"
                )))
            }
        }
    });
    result?;
    if seen != data.len() {
        return Err(bad("checkpoint holds tensors the model does not have"));
    }
    Ok((model, manifest.meta))
}
