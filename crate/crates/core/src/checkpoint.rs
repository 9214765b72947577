//! Single-file checkpoints: a tar archive holding `manifest.json` plus one raw
//! little-endian `f32` blob per tensor.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{LossBreakdown, Model, ModelConfig, Task};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub task: Task,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub superclasses: Vec<String>,
    pub iteration: usize,
    pub loss_tail: Vec<LossBreakdown>,
    /// Hex FNV-1a digest of the parameter tensors.
    pub digest: String,
    pub tensors: Vec<TensorEntry>,
    /// Momentum buffers, keyed like `tensors`; empty if not saved.
    pub velocity: Vec<TensorEntry>,
    /// Source of imported backbone weights, if any.
    pub pretrained_backbone: Option<String>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
    pub velocity: Option<ParamStore<f32>>,
}

fn entries(store: &ParamStore<f32>, dir: &str) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec(), file: format!("{dir}/{n}.bin") })
        .collect()
}

fn append<W: Write>(tar: &mut tar::Builder<W>, path: &str, bytes: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    tar.append_data(&mut header, path, bytes)?;
    Ok(())
}

fn blob(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes the model, optional momentum state and run metadata.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    velocity: Option<&ParamStore<f32>>,
    train_config: &TrainConfig,
    iteration: usize,
    loss_tail: &[LossBreakdown],
) -> Result<Manifest> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        task: model.config.task,
        train_config: train_config.clone(),
        model_config: model.config.clone(),
        vocabulary: model.vocab.clone(),
        superclasses: model.superclasses.clone(),
        iteration,
        loss_tail: loss_tail.to_vec(),
        digest: format!("{:016x}", model.params.digest()),
        tensors: entries(&model.params, "tensors"),
        velocity: velocity.map(|v| entries(v, "velocity")).unwrap_or_default(),
        pretrained_backbone: None,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("partial");
    {
        let mut tar = tar::Builder::new(std::io::BufWriter::new(std::fs::File::create(&tmp)?));
        append(&mut tar, "manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
        for (e, (_, t)) in manifest.tensors.iter().zip(model.params.iter()) {
            append(&mut tar, &e.file, &blob(t))?;
        }
        if let Some(v) = velocity {
            for (e, (_, t)) in manifest.velocity.iter().zip(v.iter()) {
                append(&mut tar, &e.file, &blob(t))?;
            }
        }
        tar.into_inner()?.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(manifest)
}

fn corrupt(e: impl std::fmt::Display) -> Error {
    Error::Corrupt(e.to_string())
}

fn read_archive(path: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let file = std::fs::File::open(path)?;
    let mut archive = tar::Archive::new(std::io::BufReader::new(file));
    let mut files = BTreeMap::new();
    for entry in archive.entries().map_err(corrupt)? {
        let mut entry = entry.map_err(corrupt)?;
        let name = entry.path().map_err(corrupt)?.to_string_lossy().into_owned();
        let mut buf = Vec::new();
        entry.read_to_end(&mut buf).map_err(corrupt)?;
        files.insert(name, buf);
    }
    Ok(files)
}

fn restore(files: &BTreeMap<String, Vec<u8>>, list: &[TensorEntry]) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for e in list {
        let bytes = files.get(&e.file).ok_or_else(|| corrupt(format!("missing tensor blob {}", e.file)))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(corrupt(format!("{} holds {} bytes, shape {:?} needs {}", e.file, bytes.len(), e.shape, 4 * n)));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
    }
    Ok(store)
}

/// A training output directory stands for its newest `.ckpt`; iteration
/// numbers are zero-padded, so the lexicographic maximum is the latest.
pub fn resolve_checkpoint(path: &Path) -> Result<std::path::PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let mut found: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    found.sort();
    found
        .pop()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, format!("no .ckpt files in {}", path.display())).into())
}

/// Reads and verifies a checkpoint, or the newest one in a directory.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let files = read_archive(&resolve_checkpoint(path)?)?;
    let raw = files.get("manifest.json").ok_or_else(|| corrupt("no manifest.json"))?;
    let value: serde_json::Value = serde_json::from_slice(raw).map_err(corrupt)?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| corrupt("manifest lacks format_version"))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion { found: found as u32, expected: FORMAT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(corrupt)?;
    let params = restore(&files, &manifest.tensors)?;
    let digest = format!("{:016x}", params.digest());
    if digest != manifest.digest {
        return Err(corrupt(format!("digest {digest} does not match manifest {}", manifest.digest)));
    }
    let velocity = if manifest.velocity.is_empty() { None } else { Some(restore(&files, &manifest.velocity)?) };
    let model = Model {
        config: manifest.model_config.clone(),
        vocab: manifest.vocabulary.clone(),
        superclasses: manifest.superclasses.clone(),
        params,
    };
    Ok(Checkpoint { manifest, model, velocity })
}

/// Loads a checkpoint and checks it was trained for `task`.
pub fn load_for_task(path: &Path, task: Task) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.manifest.task != task {
        return Err(Error::TaskMismatch { found: ck.manifest.task.to_string(), expected: task.to_string() });
    }
    Ok(ck)
}
