//! Checkpoint directories: `manifest.json` plus `params.bin`, a concatenation
//! of little-endian `f32` arrays in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::model::Group;
use crate::scalar::Scalar;

pub const FORMAT: &str = "cfsum-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

/// Pipeline stage that produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Ict,
    Dda,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Ict => "ict",
            Stage::Dda => "dda",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub shape: [usize; 2],
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub stage: Stage,
    pub seed: u64,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A loaded checkpoint directory.
#[derive(Clone, Debug)]
pub struct Archive {
    pub manifest: Manifest,
    pub arrays: Vec<Array2<f32>>,
}

impl Archive {
    pub fn require_stage(&self, expected: Stage) -> Result<()> {
        if self.manifest.stage != expected {
            return Err(Error::StageMismatch {
                expected: expected.as_str().into(),
                found: self.manifest.stage.as_str().into(),
            });
        }
        Ok(())
    }
}

/// Writes `tensors` (name, group, values) with a manifest into `dir`.
pub fn save_archive(
    dir: &Path,
    stage: Stage,
    config: &ModelConfig,
    tensors: &[(String, String, Array2<f32>)],
    meta: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut bytes = Vec::new();
    for (name, group, values) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            group: group.clone(),
            shape: [values.nrows(), values.ncols()],
            offset: bytes.len() as u64,
        });
        for &x in values.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        stage,
        seed: config.seed,
        config: config.clone(),
        tensors: entries,
        meta,
    };
    fs::File::create(dir.join(PARAMS_FILE))?.write_all(&bytes)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

pub fn load_archive(dir: &Path) -> Result<Archive> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("corrupted manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let bytes = fs::read(dir.join(PARAMS_FILE))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(PARAMS_FILE).display())))?;
    let mut arrays = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0u64;
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor {} at offset {} but expected {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let n = entry.shape[0] * entry.shape[1];
        let start = entry.offset as usize;
        let end = start + 4 * n;
        let chunk = bytes.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("params file truncated inside tensor {}", entry.name))
        })?;
        let values: Vec<f32> =
            chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        arrays.push(Array2::from_shape_vec((entry.shape[0], entry.shape[1]), values).expect("sized above"));
        expected_offset = end as u64;
    }
    if expected_offset as usize != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "params file has {} bytes, manifest accounts for {expected_offset}",
            bytes.len()
        )));
    }
    Ok(Archive { manifest, arrays })
}

impl<T: Scalar> Model<T> {
    fn named_tensors(&self) -> Vec<(String, String, Array2<f32>)> {
        self.params()
            .iter()
            .map(|p| {
                (p.name.clone(), p.group.as_str().to_string(), p.value.mapv(|x| x.to_f64_lossy() as f32))
            })
            .collect()
    }

    pub fn save_checkpoint(&self, dir: &Path, stage: Stage, meta: serde_json::Value) -> Result<Manifest> {
        save_archive(dir, stage, self.config(), &self.named_tensors(), meta)
    }
}

impl Model<f32> {
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let mut store = ParameterStore::new();
        for (entry, values) in archive.manifest.tensors.iter().zip(&archive.arrays) {
            let group = Group::parse(&entry.group)
                .ok_or_else(|| Error::Checkpoint(format!("unknown group {:?}", entry.group)))?;
            store.push(entry.name.clone(), group, values.clone());
        }
        Self::from_params(archive.manifest.config.clone(), store)
    }

    /// Loads a model checkpoint written at stage `base` or `ict`.
    pub fn load_checkpoint(dir: &Path) -> Result<(Self, Manifest)> {
        let archive = load_archive(dir)?;
        if archive.manifest.stage == Stage::Dda {
            return Err(Error::Checkpoint(format!("{} holds a predictor head, not a model", dir.display())));
        }
        let model = Self::from_archive(&archive)?;
        Ok((model, archive.manifest))
    }

    /// Like [`Model::load_checkpoint`], rejecting models built for another vocabulary size.
    pub fn load_compatible(dir: &Path, vocab_size: usize) -> Result<(Self, Manifest)> {
        let (model, manifest) = Self::load_checkpoint(dir)?;
        if model.config().vocab_size != vocab_size {
            return Err(Error::Checkpoint(format!(
                "checkpoint vocabulary size {} does not match {vocab_size}",
                model.config().vocab_size
            )));
        }
        Ok((model, manifest))
    }
}
