//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json      plain-text index and scalar state
//! <dir>/tensors/t0000.bin  raw little-endian f32, one file per tensor
//! ```
//!
//! The manifest lists every tensor with its shape and the sha256 of its
//! blob. The checkpoint hash is the sha256 of `manifest.json`, so it changes
//! whenever any tensor or scalar changes. Writes go to a sibling temporary
//! directory that is renamed into place once complete.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::StageSchedule;
use crate::config::Config;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Autoencoder,
    Alae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub phase: Phase,
    pub schedule: StageSchedule,
    pub config: Config,
    /// Phase-specific scalar state: progress, optimizer settings and step
    /// counts, RNG state.
    pub state: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Tensor { shape, data })
    }
}

/// Everything a checkpoint holds, before it is laid out on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub phase: Phase,
    pub schedule: StageSchedule,
    pub config: Config,
    pub state: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint manifest",
        message: message.into(),
    }
}

pub fn encode_blob(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Checks a blob against its index entry and decodes it.
pub fn decode_blob(entry: &TensorEntry, bytes: &[u8]) -> Result<Tensor> {
    let integrity = |message: String| Error::Integrity {
        tensor: entry.name.clone(),
        message,
    };
    if entry.dtype != "f32" {
        return Err(integrity(format!("unsupported dtype `{}`", entry.dtype)));
    }
    let count = entry
        .shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| integrity("shape overflows".into()))?;
    let expected = count.checked_mul(4).ok_or_else(|| integrity("shape overflows".into()))?;
    if bytes.len() != expected {
        return Err(integrity(format!("blob has {} bytes, shape {:?} needs {expected}", bytes.len(), entry.shape)));
    }
    if sha256_hex(bytes) != entry.sha256 {
        return Err(integrity("sha256 mismatch".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor {
        shape: entry.shape.clone(),
        data,
    })
}

/// Parses `manifest.json`. The version is checked before anything else so a
/// newer layout is never misread.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| format_err(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| format_err("missing format_version"))?;
    if version > FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: FORMAT_VERSION,
        });
    }
    if version == 0 {
        return Err(format_err("format_version 0"));
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| format_err(e.to_string()))?;
    let mut seen = std::collections::HashSet::new();
    for t in &manifest.tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(format_err(format!("duplicate tensor `{}`", t.name)));
        }
        let valid_file = t.file.strip_prefix("tensors/").is_some_and(|f| {
            !f.is_empty() && f.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'_') && !f.starts_with('.')
        });
        if !valid_file {
            return Err(format_err(format!("tensor `{}` has an invalid file name `{}`", t.name, t.file)));
        }
    }
    manifest.config.validate()?;
    Ok(manifest)
}

fn manifest_bytes(manifest: &Manifest) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn sibling(dir: &Path, tag: &str) -> Result<PathBuf> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::invalid(format!("checkpoint path {} has no final component", dir.display())))?;
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    Ok(parent.join(format!(".{}.{tag}-{}-{n}", name.to_string_lossy(), std::process::id())))
}

fn write_tree(tmp: &Path, bundle: &CheckpointBundle) -> Result<Vec<u8>> {
    let tensor_dir = tmp.join(TENSOR_DIR);
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    let mut entries = Vec::with_capacity(bundle.tensors.len());
    for (i, (name, tensor)) in bundle.tensors.iter().enumerate() {
        if tensor.shape.iter().product::<usize>() != tensor.data.len() {
            return Err(Error::shape(format!("tensor `{name}` does not match its shape")));
        }
        let file = format!("t{i:04}.bin");
        let bytes = encode_blob(&tensor.data);
        let path = tensor_dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape.clone(),
            dtype: "f32".into(),
            file: format!("{TENSOR_DIR}/{file}"),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        phase: bundle.phase,
        schedule: bundle.schedule.clone(),
        config: bundle.config.clone(),
        state: bundle.state.clone(),
        tensors: entries,
    };
    let bytes = manifest_bytes(&manifest);
    let path = tmp.join(MANIFEST_FILE);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(bytes)
}

/// Writes `bundle` to `dir` and returns the checkpoint hash. An existing
/// checkpoint at `dir` is replaced; any other existing non-empty directory
/// or file is refused.
pub fn save_checkpoint(bundle: &CheckpointBundle, dir: &Path) -> Result<String> {
    if dir.exists() {
        let replaceable = dir.is_dir()
            && (dir.join(MANIFEST_FILE).is_file()
                || fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none());
        if !replaceable {
            return Err(Error::invalid(format!(
                "{} exists and is not a checkpoint directory",
                dir.display()
            )));
        }
    }
    let tmp = sibling(dir, "tmp")?;
    let bytes = match write_tree(&tmp, bundle) {
        Ok(b) => b,
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
    };
    if dir.exists() {
        let old = sibling(dir, "old")?;
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        if let Err(e) = fs::rename(&tmp, dir) {
            let _ = fs::rename(&old, dir);
            let _ = fs::remove_dir_all(&tmp);
            return Err(Error::io(dir, e));
        }
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| {
            let _ = fs::remove_dir_all(&tmp);
            Error::io(dir, e)
        })?;
    }
    Ok(sha256_hex(&bytes))
}

/// Reads only the manifest and returns it with the checkpoint hash.
pub fn read_manifest(dir: &Path) -> Result<(Manifest, String)> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok((parse_manifest(&bytes)?, sha256_hex(&bytes)))
}

/// Loads and verifies every tensor. Returns the bundle and the checkpoint
/// hash.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointBundle, String)> {
    let (manifest, hash) = read_manifest(dir)?;
    let on_disk = fs::read_dir(dir.join(TENSOR_DIR))
        .map(|it| it.count())
        .unwrap_or(0);
    if on_disk != manifest.tensors.len() {
        return Err(format_err(format!(
            "manifest lists {} tensors, directory holds {on_disk} blobs",
            manifest.tensors.len()
        )));
    }
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::Integrity {
            tensor: entry.name.clone(),
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        tensors.insert(entry.name.clone(), decode_blob(entry, &bytes)?);
    }
    Ok((
        CheckpointBundle {
            phase: manifest.phase,
            schedule: manifest.schedule,
            config: manifest.config,
            state: manifest.state,
            tensors,
        },
        hash,
    ))
}
