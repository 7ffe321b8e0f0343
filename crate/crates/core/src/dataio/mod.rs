//! Dataset handling: bit-exact feature/embedding file formats, GZSL split
//! construction, and a synthetic benchmark generator with a known
//! nearest-prototype ceiling.

mod format;
mod split;
mod synth;

pub use format::{read_embeddings, read_features, write_embeddings, write_features};
pub use split::{build_splits, ClassCounts, SplitRatios, SplitSpec};
pub use synth::{generate_synthetic, OracleReport, SynthConfig, SynthDataset};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("{path}: unsupported version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated or oversized payload, header promises {expected_bytes} bytes after the header, file holds {found_bytes}")]
    Truncated {
        path: PathBuf,
        expected_bytes: u64,
        found_bytes: u64,
    },
    #[error("{context}: dimension mismatch, expected {expected}, got {found}")]
    DimMismatch {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("sample {sample_id} holds a non-finite value")]
    NonFinite { sample_id: u64 },
    #[error("class {class_id} has no embedding row")]
    MissingEmbedding { class_id: u32 },
    #[error("invalid split request: {reason}")]
    Split { reason: String },
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One sample: id, ground-truth class, and the two modality feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub sample_id: u64,
    pub class_id: u32,
    pub audio: Vec<f32>,
    pub visual: Vec<f32>,
}

/// Class-label embeddings keyed by class id, with optional display names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassEmbeddingTable {
    rows: BTreeMap<u32, Vec<f32>>,
    names: BTreeMap<u32, String>,
    dim: usize,
}

impl ClassEmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            rows: BTreeMap::new(),
            names: BTreeMap::new(),
            dim,
        }
    }

    pub fn insert(&mut self, class_id: u32, embedding: Vec<f32>) -> Result<(), DataError> {
        if embedding.len() != self.dim {
            return Err(DataError::DimMismatch {
                context: format!("embedding of class {class_id}"),
                expected: self.dim,
                found: embedding.len(),
            });
        }
        self.rows.insert(class_id, embedding);
        Ok(())
    }

    pub fn set_name(&mut self, class_id: u32, name: String) {
        self.names.insert(class_id, name);
    }

    pub fn get(&self, class_id: u32) -> Option<&[f32]> {
        self.rows.get(&class_id).map(|v| v.as_slice())
    }

    pub fn name(&self, class_id: u32) -> Option<&str> {
        self.names.get(&class_id).map(|s| s.as_str())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Ascending-id iteration (also the `.avzw` serialisation order).
    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f32])> {
        self.rows.iter().map(|(id, v)| (*id, v.as_slice()))
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.rows.keys().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Partitions {
    pub seen: Vec<u32>,
    pub val_unseen: Vec<u32>,
    pub test_unseen: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetFiles {
    pub tr: String,
    pub val_seen: String,
    pub val_unseen: String,
    pub test_seen: String,
    pub test_unseen: String,
    pub embeddings: String,
}

/// `manifest.json`: the dataset's classes, partitions, and file layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub classes: Vec<ClassEntry>,
    pub partitions: Partitions,
    pub forced_seen: Vec<u32>,
    pub files: SubsetFiles,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text).map_err(|e| DataError::io(path, e))
    }
}

/// The five feature subsets plus the embedding table, fully resident.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub manifest: Manifest,
    pub tr: Vec<FeatureRecord>,
    pub val_seen: Vec<FeatureRecord>,
    pub val_unseen: Vec<FeatureRecord>,
    pub test_seen: Vec<FeatureRecord>,
    pub test_unseen: Vec<FeatureRecord>,
    pub embeddings: ClassEmbeddingTable,
    pub audio_dim: usize,
    pub visual_dim: usize,
}

impl DatasetBundle {
    /// Reads every file the manifest names and validates finiteness and
    /// embedding coverage.
    pub fn load(manifest_path: &Path) -> Result<Self, DataError> {
        let manifest = Manifest::load(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let read = |rel: &str| read_features(&dir.join(rel));
        let (tr, ad, vd) = read(&manifest.files.tr)?;
        let check_dims = |records: &(Vec<FeatureRecord>, usize, usize)| -> Result<(), DataError> {
            if records.1 != ad || records.2 != vd {
                return Err(DataError::DimMismatch {
                    context: "feature files disagree on dims".into(),
                    expected: ad,
                    found: records.1,
                });
            }
            Ok(())
        };
        let val_seen = read(&manifest.files.val_seen)?;
        check_dims(&val_seen)?;
        let val_unseen = read(&manifest.files.val_unseen)?;
        check_dims(&val_unseen)?;
        let test_seen = read(&manifest.files.test_seen)?;
        check_dims(&test_seen)?;
        let test_unseen = read(&manifest.files.test_unseen)?;
        check_dims(&test_unseen)?;
        let mut embeddings = read_embeddings(&dir.join(&manifest.files.embeddings))?;
        for entry in &manifest.classes {
            embeddings.set_name(entry.id, entry.name.clone());
        }
        let bundle = Self {
            manifest,
            tr,
            val_seen: val_seen.0,
            val_unseen: val_unseen.0,
            test_seen: test_seen.0,
            test_unseen: test_unseen.0,
            embeddings,
            audio_dim: ad,
            visual_dim: vd,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for records in self.subsets() {
            for r in records {
                if r.audio.iter().chain(&r.visual).any(|v| !v.is_finite()) {
                    return Err(DataError::NonFinite {
                        sample_id: r.sample_id,
                    });
                }
                if self.embeddings.get(r.class_id).is_none() {
                    return Err(DataError::MissingEmbedding {
                        class_id: r.class_id,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn subsets(&self) -> [&Vec<FeatureRecord>; 5] {
        [
            &self.tr,
            &self.val_seen,
            &self.val_unseen,
            &self.test_seen,
            &self.test_unseen,
        ]
    }

    pub fn subset(&self, name: &str) -> Option<&[FeatureRecord]> {
        match name {
            "tr" => Some(&self.tr),
            "val_seen" => Some(&self.val_seen),
            "val_unseen" => Some(&self.val_unseen),
            "test_seen" => Some(&self.test_seen),
            "test_unseen" => Some(&self.test_unseen),
            _ => None,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.dim()
    }
}
