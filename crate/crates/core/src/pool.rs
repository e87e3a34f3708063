//! Persistent, append-only model pool.
//!
//! Layout: `manifest.json` indexes every backbone and model; each owns one
//! weight file holding its tensors back to back as shape-prefixed blobs.
//! Adding a model writes a new file and rewrites only the manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eft::{EftConfig, EftLayerWeights};
use crate::error::{Error, Result};
use crate::net::{Backbone, BackboneConfig, Linear};
use crate::source::{SourceModelRecord, TaskMeta};
use crate::tensor::{io, Tensor};

pub const MANIFEST: &str = "manifest.json";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Byte offset of the blob within the weight file.
    pub offset: u64,
    pub bytes: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneEntry {
    pub id: String,
    pub config: BackboneConfig,
    pub file: String,
    pub digest: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: u32,
    pub backbone: String,
    pub eft: EftConfig,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub meta: TaskMeta,
    pub file: String,
    pub digest: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub version: u32,
    pub backbones: Vec<BackboneEntry>,
    pub models: Vec<ModelEntry>,
}

#[derive(Clone, Debug, Default)]
pub struct Pool {
    root: Option<PathBuf>,
    manifest: PoolManifest,
    backbones: Vec<Backbone>,
    models: Vec<SourceModelRecord>,
}

fn pack<'a>(tensors: impl IntoIterator<Item = (String, &'a Tensor<f32>)>) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        let blob = io::encode_blob(t);
        entries.push(TensorEntry {
            name,
            offset: bytes.len() as u64,
            bytes: blob.len() as u64,
            shape: t.shape().to_vec(),
        });
        bytes.extend(blob);
    }
    (bytes, entries)
}

fn unpack(bytes: &[u8], entries: &[TensorEntry], file: &str) -> Result<Vec<Tensor<f32>>> {
    entries
        .iter()
        .map(|e| {
            let start = e.offset as usize;
            let end = start
                .checked_add(e.bytes as usize)
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| Error::Format(format!("{file}: tensor {} runs past the end of the file", e.name)))?;
            let t = io::decode_blob(&bytes[start..end])?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("{file}: tensor {} has shape {:?}, manifest says {:?}", e.name, t.shape(), e.shape)));
            }
            Ok(t)
        })
        .collect()
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

impl Pool {
    pub fn in_memory() -> Self {
        Self {
            manifest: PoolManifest {
                version: VERSION,
                ..PoolManifest::default()
            },
            ..Self::default()
        }
    }

    /// Creates an empty pool directory; fails if a manifest already exists.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if dir.join(MANIFEST).exists() {
            return Err(Error::invalid(format!("{} already holds a pool", dir.display())));
        }
        let pool = Self {
            root: Some(dir.to_path_buf()),
            ..Self::in_memory()
        };
        pool.save_manifest()?;
        Ok(pool)
    }

    /// Loads a pool, verifying every digest.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: PoolManifest = serde_json::from_str(&text)?;
        if manifest.version != VERSION {
            return Err(Error::Format(format!("unsupported pool version {}", manifest.version)));
        }
        let read = |file: &str| {
            let p = dir.join(file);
            fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let mut backbones = Vec::new();
        for e in &manifest.backbones {
            let filters = unpack(&read(&e.file)?, &e.tensors, &e.file)?;
            let bb = Backbone::from_parts(e.id.clone(), e.config.clone(), filters)?;
            if bb.digest() != e.digest {
                return Err(Error::Format(format!("backbone {} fails its digest", e.id)));
            }
            backbones.push(bb);
        }
        let mut models = Vec::new();
        for e in &manifest.models {
            let mut tensors = unpack(&read(&e.file)?, &e.tensors, &e.file)?.into_iter();
            let layers = e.tensors.len().saturating_sub(2) / 2;
            let mut adapters = Vec::with_capacity(layers);
            for _ in 0..layers {
                let groupwise = tensors.next().expect("counted");
                let pointwise = tensors.next().expect("counted");
                adapters.push(EftLayerWeights { groupwise, pointwise });
            }
            let (weight, bias) = match (tensors.next(), tensors.next()) {
                (Some(w), Some(b)) => (w, b),
                _ => return Err(Error::Format(format!("model {} lacks a classifier", e.id))),
            };
            let record = SourceModelRecord {
                id: e.id,
                backbone: e.backbone.clone(),
                eft: e.eft,
                adapters,
                head: Linear { weight, bias },
                meta: e.meta.clone(),
            };
            record.validate()?;
            if record.digest() != e.digest || record.feature_dim() != e.feature_dim {
                return Err(Error::Format(format!("model {} does not match its manifest entry", e.id)));
            }
            models.push(record);
        }
        Ok(Self {
            root: Some(dir.to_path_buf()),
            manifest,
            backbones,
            models,
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn manifest(&self) -> &PoolManifest {
        &self.manifest
    }

    fn save_manifest(&self) -> Result<()> {
        let Some(root) = &self.root else { return Ok(()) };
        let tmp = root.join(format!("{MANIFEST}.tmp"));
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        let dest = root.join(MANIFEST);
        fs::rename(&tmp, &dest).map_err(|e| Error::io(dest, e))
    }

    /// Registers a backbone. Re-adding an identical one is a no-op.
    pub fn add_backbone(&mut self, backbone: Backbone) -> Result<()> {
        let digest = backbone.digest();
        if let Some(e) = self.manifest.backbones.iter().find(|e| e.id == backbone.id) {
            if e.digest == digest {
                return Ok(());
            }
            return Err(Error::invalid(format!("a different backbone named {} is already pooled", backbone.id)));
        }
        let file = format!("backbone-{}.bin", backbone.id);
        let (bytes, tensors) = pack(
            backbone
                .filters()
                .iter()
                .enumerate()
                .map(|(l, f)| (format!("conv.{l}"), f)),
        );
        if let Some(root) = &self.root {
            write_new(&root.join(&file), &bytes)?;
        }
        self.manifest.backbones.push(BackboneEntry {
            id: backbone.id.clone(),
            config: backbone.config().clone(),
            file,
            digest,
            tensors,
        });
        self.backbones.push(backbone);
        self.save_manifest()
    }

    /// Appends a model under the next free id, which is returned. Existing
    /// records and files are never touched.
    pub fn add_model(&mut self, mut record: SourceModelRecord) -> Result<u32> {
        let backbone = self.backbone(&record.backbone)?;
        if backbone.feature_dim() != record.feature_dim() {
            return Err(Error::dim("model feature width", backbone.feature_dim(), record.feature_dim()));
        }
        record.validate()?;
        let id = self.models.len() as u32;
        record.id = id;
        let file = format!("model-{id:05}.bin");
        let (bytes, tensors) = pack(record.named_tensors());
        if let Some(root) = &self.root {
            write_new(&root.join(&file), &bytes)?;
        }
        self.manifest.models.push(ModelEntry {
            id,
            backbone: record.backbone.clone(),
            eft: record.eft,
            feature_dim: record.feature_dim(),
            num_classes: record.num_classes(),
            meta: record.meta.clone(),
            file,
            digest: record.digest(),
            tensors,
        });
        self.models.push(record);
        self.save_manifest()?;
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn records(&self) -> &[SourceModelRecord] {
        &self.models
    }

    pub fn record(&self, id: u32) -> Result<&SourceModelRecord> {
        self.models
            .get(id as usize)
            .ok_or_else(|| Error::invalid(format!("no model {id} in a pool of {}", self.models.len())))
    }

    pub fn backbones(&self) -> &[Backbone] {
        &self.backbones
    }

    pub fn backbone(&self, id: &str) -> Result<&Backbone> {
        self.backbones
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(|| Error::invalid(format!("no backbone {id} in the pool")))
    }

    pub fn backbone_for(&self, record: &SourceModelRecord) -> Result<&Backbone> {
        self.backbone(&record.backbone)
    }
}
