//! Checkpoints: `manifest.json` (config echo, tensor table, training state)
//! and `tensors.bin`, the little-endian `f32` payloads back to back.
//!
//! Both files are written under temporary names and renamed into place,
//! blob first. The manifest carries the blob checksum, so a crash between
//! the two renames is detected on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spatem_tensor::rng::fnv1a;
use spatem_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const FORMAT: &str = "spatem-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Value,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

impl TensorEntry {
    fn numel(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
    }
}

/// Optimizer and schedule state needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Adam steps taken.
    pub step: u64,
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub best_val_loss: Option<f64>,
    /// Epochs in the current plateau.
    pub plateau: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Rate used in each completed epoch.
    pub lr_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    /// Seed the model was built with; fixes layout-independent defaults.
    pub init_seed: u64,
    pub train: Option<TrainState>,
    pub blob: String,
    pub blob_bytes: u64,
    /// FNV-1a of the blob, hex.
    pub checksum: String,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: CheckpointManifest = serde_json::from_slice(bytes).map_err(|e| Error::Data(format!("checkpoint manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    /// Entries must tile the blob exactly, in order.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Data(format!("checkpoint manifest: {m}")));
        if self.format != FORMAT || self.version != VERSION {
            return fail(format!("unsupported format {} v{}", self.format, self.version));
        }
        if self.blob != BLOB {
            return fail(format!("unexpected blob name {}", self.blob));
        }
        self.model.validate().map_err(|e| Error::Data(format!("checkpoint manifest: {e}")))?;
        let mut at = 0u64;
        let mut seen = std::collections::HashSet::new();
        for t in &self.tensors {
            if t.dtype != "f32" {
                return fail(format!("{}: dtype {} unsupported", t.name, t.dtype));
            }
            if t.name.is_empty() || !seen.insert((t.name.as_str(), t.role)) {
                return fail(format!("duplicate or empty tensor name {:?}", t.name));
            }
            if t.offset != at {
                return fail(format!("{}: offset {} leaves a gap or overlap", t.name, t.offset));
            }
            let bytes = t.numel().and_then(|n| n.checked_mul(4)).filter(|&n| n > 0);
            let Some(bytes) = bytes else { return fail(format!("{}: bad shape {:?}", t.name, t.shape)) };
            at = at.checked_add(bytes as u64).ok_or_else(|| Error::Data("checkpoint manifest: size overflow".into()))?;
        }
        if at != self.blob_bytes {
            return fail(format!("tensors cover {at} bytes, blob has {}", self.blob_bytes));
        }
        if let Some(s) = &self.train {
            if !(s.lr.is_finite() && s.lr > 0.0) {
                return fail(format!("learning rate {}", s.lr));
            }
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Encodes the model (values, and Adam moments of trainable entries).
pub fn encode(model: &Model<f32>, init_seed: u64, train: Option<&TrainState>) -> (CheckpointManifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, role: Role, t: &Tensor<f32>, blob: &mut Vec<u8>| {
        tensors.push(TensorEntry { name: name.into(), role, shape: t.shape().to_vec(), dtype: "f32".into(), offset: blob.len() as u64 });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in model.params().iter() {
        push(&p.name, Role::Value, &p.value, &mut blob);
        if p.trainable {
            push(&p.name, Role::AdamM, &p.adam_m, &mut blob);
            push(&p.name, Role::AdamV, &p.adam_v, &mut blob);
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        model: model.config().clone(),
        init_seed,
        train: train.cloned(),
        blob: BLOB.into(),
        blob_bytes: blob.len() as u64,
        checksum: format!("{:016x}", fnv1a(&blob)),
        tensors,
    };
    (manifest, blob)
}

pub fn save(dir: &Path, model: &Model<f32>, init_seed: u64, train: Option<&TrainState>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = encode(model, init_seed, train);
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    json.push(b'\n');
    write_atomic(&dir.join(BLOB), &blob)?;
    write_atomic(&dir.join(MANIFEST), &json)
}

/// Rebuilds a model from a manifest and its blob.
pub fn decode(manifest: &CheckpointManifest, blob: &[u8]) -> Result<Model<f32>> {
    manifest.validate()?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Data(format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes)));
    }
    if format!("{:016x}", fnv1a(blob)) != manifest.checksum {
        return Err(Error::Data("blob checksum mismatch".into()));
    }
    let mut model = Model::<f32>::build(manifest.model.clone(), manifest.init_seed)?;
    let mut filled = 0;
    for e in &manifest.tensors {
        let p = model.params_mut().by_name_mut(&e.name).ok_or_else(|| Error::Data(format!("unknown tensor {}", e.name)))?;
        if p.value.shape() != e.shape.as_slice() {
            return Err(Error::Data(format!("{}: shape {:?}, model expects {:?}", e.name, e.shape, p.value.shape())));
        }
        let start = e.offset as usize;
        let bytes = &blob[start..start + 4 * p.value.numel()];
        let target = match e.role {
            Role::Value => &mut p.value,
            Role::AdamM if p.trainable => &mut p.adam_m,
            Role::AdamV if p.trainable => &mut p.adam_v,
            _ => return Err(Error::Data(format!("{}: moments stored for a frozen tensor", e.name))),
        };
        for (v, c) in target.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().expect("4-byte chunk"));
        }
        filled += 1;
    }
    let expected: usize = model.params().iter().map(|p| if p.trainable { 3 } else { 1 }).sum();
    if filled != expected {
        return Err(Error::Data(format!("checkpoint holds {filled} tensors, model needs {expected}")));
    }
    Ok(model)
}

pub fn load(dir: &Path) -> Result<(Model<f32>, CheckpointManifest)> {
    let mpath = dir.join(MANIFEST);
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = CheckpointManifest::parse(&bytes).map_err(|e| Error::corrupt(&mpath, e.to_string()))?;
    let bpath = dir.join(BLOB);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let model = decode(&manifest, &blob).map_err(|e| match e {
        Error::Data(msg) => Error::corrupt(&bpath, msg),
        other => other,
    })?;
    Ok((model, manifest))
}
