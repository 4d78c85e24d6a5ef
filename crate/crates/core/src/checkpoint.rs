//! Checkpoints: a JSON manifest describing named arrays plus a raw
//! little-endian sidecar blob. Covers parameters, momentum buffers, the
//! prototype memory, the iteration counter, and the full config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TrainConfig;
use crate::nets::NamedParam;
use crate::optim::Sgd;
use crate::proto::PrototypeMemory;
use crate::scalar::Scalar;

const FORMAT: &str = "segckpt-v1";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("checkpoint is {found}, this build expects {want}")]
    Dtype { want: &'static str, found: String },
    #[error("missing tensors in checkpoint: {0}")]
    Missing(String),
    #[error("unknown tensors in checkpoint: {0}")]
    Unknown(String),
    #[error("tensor {name}: checkpoint shape {found:?} vs model {want:?}")]
    Shape { name: String, want: Vec<usize>, found: Vec<usize> },
    #[error("blob {path}: {message}")]
    Blob { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptManifest {
    pub format: String,
    pub dtype: String,
    pub iteration: usize,
    pub config: TrainConfig,
    pub config_hash: u64,
    pub proto_alpha: f64,
    pub proto_initialized: Vec<bool>,
    pub entries: Vec<Entry>,
}

#[derive(Debug)]
pub struct RawCheckpoint {
    pub manifest: CkptManifest,
    pub blob: Vec<u8>,
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `<stem>.json` and `<stem>.bin`; returns the manifest path.
pub fn write_checkpoint<S: Scalar>(
    stem: &Path,
    iteration: usize,
    cfg: &TrainConfig,
    params: &[NamedParam<S>],
    memory: &PrototypeMemory<S>,
    optim: &Sgd<S>,
) -> Result<PathBuf, CkptError> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values: &[S], blob: &mut Vec<u8>| {
        entries.push(Entry { name, shape, offset: blob.len(), count: values.len() });
        for &v in values {
            v.write_le(blob);
        }
    };
    for p in params {
        push(p.name.clone(), p.tensor.shape().to_vec(), &p.tensor.data(), &mut blob);
    }
    for (c, v) in memory.protos.iter().enumerate() {
        push(format!("proto:{c}"), vec![v.len()], v, &mut blob);
    }
    for (name, buf) in &optim.buffers {
        push(format!("mom:{name}"), vec![buf.len()], buf, &mut blob);
    }
    let manifest = CkptManifest {
        format: FORMAT.into(),
        dtype: S::DTYPE.into(),
        iteration,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        proto_alpha: memory.alpha,
        proto_initialized: memory.initialized.clone(),
        entries,
    };
    let manifest_path = stem.with_extension("json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json)
        .map_err(|source| CkptError::Io { path: manifest_path.clone(), source })?;
    let bp = blob_path(&manifest_path);
    fs::write(&bp, &blob).map_err(|source| CkptError::Io { path: bp, source })?;
    Ok(manifest_path)
}

pub fn read_checkpoint(manifest_path: &Path) -> Result<RawCheckpoint, CkptError> {
    let text = fs::read(manifest_path)
        .map_err(|source| CkptError::Io { path: manifest_path.into(), source })?;
    let manifest: CkptManifest = serde_json::from_slice(&text)
        .map_err(|e| CkptError::Manifest { path: manifest_path.into(), message: e.to_string() })?;
    if manifest.format != FORMAT {
        return Err(CkptError::Manifest {
            path: manifest_path.into(),
            message: format!("format {} not supported", manifest.format),
        });
    }
    let bp = blob_path(manifest_path);
    let blob = fs::read(&bp).map_err(|source| CkptError::Io { path: bp.clone(), source })?;
    let expect: usize = manifest
        .entries
        .iter()
        .map(|e| e.count)
        .sum::<usize>()
        * byte_width(&manifest.dtype);
    if blob.len() != expect {
        return Err(CkptError::Blob {
            path: bp,
            message: format!("length {} but manifest needs {expect}", blob.len()),
        });
    }
    Ok(RawCheckpoint { manifest, blob })
}

fn byte_width(dtype: &str) -> usize {
    match dtype {
        "f32" => 4,
        "f64" => 8,
        _ => 0,
    }
}

impl RawCheckpoint {
    fn values<S: Scalar>(&self, e: &Entry) -> Result<Vec<S>, CkptError> {
        let start = e.offset;
        let end = start + e.count * S::BYTE_WIDTH;
        let bytes = self.blob.get(start..end).ok_or_else(|| CkptError::Blob {
            path: PathBuf::new(),
            message: format!("entry {} spans {start}..{end}, blob has {}", e.name, self.blob.len()),
        })?;
        Ok(bytes.chunks_exact(S::BYTE_WIDTH).map(S::read_le).collect())
    }

    /// Restores parameters, prototype memory, and momentum buffers in place.
    /// Every model tensor must be present with the right shape; every blob
    /// entry must land somewhere.
    pub fn restore_into<S: Scalar>(
        &self,
        params: &[NamedParam<S>],
        memory: &mut PrototypeMemory<S>,
        optim: &mut Sgd<S>,
    ) -> Result<(), CkptError> {
        if self.manifest.dtype != S::DTYPE {
            return Err(CkptError::Dtype { want: S::DTYPE, found: self.manifest.dtype.clone() });
        }
        let mut used = vec![false; self.manifest.entries.len()];
        let find = |name: &str, used: &mut [bool]| -> Option<Entry> {
            let i = self.manifest.entries.iter().position(|e| e.name == name)?;
            used[i] = true;
            Some(self.manifest.entries[i].clone())
        };
        let mut missing = Vec::new();
        for p in params {
            let Some(e) = find(&p.name, &mut used) else {
                missing.push(p.name.clone());
                continue;
            };
            if e.shape != p.tensor.shape() {
                return Err(CkptError::Shape {
                    name: p.name.clone(),
                    want: p.tensor.shape().to_vec(),
                    found: e.shape,
                });
            }
            let values = self.values::<S>(&e)?;
            p.tensor.apply(|w| w.copy_from_slice(&values));
        }
        if !missing.is_empty() {
            return Err(CkptError::Missing(missing.join(", ")));
        }
        let classes = memory.protos.len();
        if self.manifest.proto_initialized.len() != classes {
            return Err(CkptError::Shape {
                name: "proto_initialized".into(),
                want: vec![classes],
                found: vec![self.manifest.proto_initialized.len()],
            });
        }
        for c in 0..classes {
            let name = format!("proto:{c}");
            let Some(e) = find(&name, &mut used) else {
                return Err(CkptError::Missing(name));
            };
            let values = self.values::<S>(&e)?;
            if values.len() != memory.protos[c].len() {
                return Err(CkptError::Shape {
                    name,
                    want: vec![memory.protos[c].len()],
                    found: vec![values.len()],
                });
            }
            memory.protos[c] = values;
        }
        memory.initialized = self.manifest.proto_initialized.clone();
        memory.alpha = self.manifest.proto_alpha;
        optim.buffers.clear();
        for (i, e) in self.manifest.entries.iter().enumerate() {
            if used[i] {
                continue;
            }
            let Some(pname) = e.name.strip_prefix("mom:") else {
                return Err(CkptError::Unknown(e.name.clone()));
            };
            let Some(p) = params.iter().find(|p| p.name == pname) else {
                return Err(CkptError::Unknown(e.name.clone()));
            };
            if e.count != p.tensor.numel() {
                return Err(CkptError::Shape {
                    name: e.name.clone(),
                    want: vec![p.tensor.numel()],
                    found: vec![e.count],
                });
            }
            optim.buffers.insert(pname.to_string(), self.values::<S>(e)?);
        }
        Ok(())
    }
}
