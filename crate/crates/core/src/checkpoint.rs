//! Directory checkpoints: a JSON manifest (tensor names, shapes, dtype,
//! config and its fingerprint, training counters) plus one raw
//! little-endian f32 binary blob per tensor, row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mat::{Mat, Scalar};
use crate::model::Model;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_TAG: &str = "nriqa-checkpoint-v1";

/// Training progress stored alongside the tensors. Crop and shuffle streams
/// are derived statelessly from `(rng_seed, epoch)`, so these counters plus
/// the optimizer moments fully describe the training state.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainCounters {
    pub epoch: u64,
    pub step: u64,
    pub best_val_metric: Option<f64>,
    pub best_epoch: Option<u64>,
    pub rng_seed: u64,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    dtype: String,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    config_fingerprint: String,
    pretrained_backbone: bool,
    counters: TrainCounters,
    tensors: Vec<TensorEntry>,
}

/// A checkpoint read back from disk, tensors still in storage precision.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub pretrained_backbone: bool,
    pub counters: TrainCounters,
    pub tensors: BTreeMap<String, Mat<f32>>,
}

fn write_blob(path: &Path, m: &Mat<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, name: &str, rows: usize, cols: usize) -> Result<Mat<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Checkpoint(format!(
            "tensor {name:?}: blob holds {} bytes, expected {} for shape {}x{}",
            bytes.len(),
            rows * cols * 4,
            rows,
            cols
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Mat::from_vec(rows, cols, data))
}

/// Write a model, optional extra tensors (optimizer moments, keyed e.g.
/// `adam.m.<param>`) and counters into `dir`. Tensors are stored as f32.
pub fn save_checkpoint<T: Scalar>(
    dir: impl AsRef<Path>,
    model: &Model<T>,
    extra: &[(String, Mat<T>)],
    counters: &TrainCounters,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut write = |name: &str, m: Mat<f32>| -> Result<()> {
        let file = format!("{name}.bin");
        write_blob(&dir.join(&file), &m)?;
        entries.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            dtype: "f32".into(),
            file,
        });
        Ok(())
    };
    for (name, t) in model.named_tensors() {
        write(&name, t.cast::<f32>())?;
    }
    for (name, t) in extra {
        write(name, t.cast::<f32>())?;
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        config: model.cfg.clone(),
        config_fingerprint: model.cfg.fingerprint(),
        pretrained_backbone: model.backbone_pretrained,
        counters: *counters,
        tensors: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Read a checkpoint directory without instantiating a model. Warns on a
/// config fingerprint mismatch.
pub fn read_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("malformed manifest {}: {e}", path.display())))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    if manifest.config_fingerprint != manifest.config.fingerprint() {
        eprintln!(
            "warning: checkpoint {} config fingerprint mismatch (stored {}, recomputed {})",
            dir.display(),
            manifest.config_fingerprint,
            manifest.config.fingerprint()
        );
    }
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor {:?}: unsupported dtype {:?}",
                e.name, e.dtype
            )));
        }
        let m = read_blob(&dir.join(&e.file), &e.name, e.rows, e.cols)?;
        tensors.insert(e.name.clone(), m);
    }
    Ok(Checkpoint {
        config: manifest.config,
        pretrained_backbone: manifest.pretrained_backbone,
        counters: manifest.counters,
        tensors,
    })
}

/// Rebuild a model from a checkpoint. Every model tensor must be present;
/// non-model tensors (optimizer moments) are returned separately.
pub fn load_model<T: Scalar>(
    dir: impl AsRef<Path>,
) -> Result<(Model<T>, TrainCounters, BTreeMap<String, Mat<f32>>)> {
    let ckpt = read_checkpoint(dir)?;
    let mut model: Model<T> = Model::new(ckpt.config)?;
    model.backbone_pretrained = ckpt.pretrained_backbone;
    let mut extra = BTreeMap::new();
    let mut expected: BTreeMap<String, ()> =
        model.named_tensors().into_iter().map(|(n, _)| (n, ())).collect();
    for (name, m) in ckpt.tensors {
        if expected.remove(&name).is_some() {
            model.set_tensor(&name, m.cast::<T>())?;
        } else {
            extra.insert(name, m);
        }
    }
    if let Some(missing) = expected.keys().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint lacks model tensor {missing:?}"
        )));
    }
    Ok((model, ckpt.counters, extra))
}

/// Populate backbone tensors (`text.*`, `vision.*`) of an existing model
/// from an archive in checkpoint format and freeze the output projections.
/// Returns the number of tensors loaded.
pub fn load_backbone_into<T: Scalar>(model: &mut Model<T>, dir: impl AsRef<Path>) -> Result<usize> {
    let ckpt = read_checkpoint(dir)?;
    let mut loaded = 0;
    for (name, m) in ckpt.tensors {
        if name.starts_with("text.") || name.starts_with("vision.") {
            model.set_tensor(&name, m.cast::<T>())?;
            loaded += 1;
        }
    }
    if loaded == 0 {
        return Err(Error::Checkpoint(
            "archive contains no backbone tensors".into(),
        ));
    }
    model.backbone_pretrained = true;
    Ok(loaded)
}
