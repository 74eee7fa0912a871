//! Content-addressed vector library.
//!
//! Layout under the store root:
//!
//! ```text
//! vectors/<id>.json    one self-contained record per vector
//! lm_steer/<id>.json   trained LM-Steer matrices
//! index.json           rebuildable cache, never read as truth
//! .lock                advisory single-writer lock
//! ```
//!
//! The store starts empty. To import a vector produced elsewhere, pass its
//! record file to [`VectorStore::import_file`]; it is verified like any load.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::digest::f32s_from_le_bytes;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::generators::LmSteerMatrix;
use crate::model::Site;
use crate::vector::{now_unix, Provenance, SteeringVector};

pub const SCHEMA_VERSION: u32 = 1;

const LOCK_TIMEOUT: Duration = Duration::from_secs(10);
const STALE_LOCK: Duration = Duration::from_secs(60);

/// On-disk vector record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorFile {
    pub schema_version: u32,
    pub id: String,
    pub name: String,
    pub method: String,
    pub layer: usize,
    pub site: Site,
    pub d_model: usize,
    pub values_b64: String,
    pub default_multiplier: f32,
    pub concept_label: String,
    pub parents: Vec<String>,
    pub merge_spec: Option<serde_json::Value>,
    pub config_digest: String,
    pub created_at: u64,
    pub tags: Vec<String>,
    pub dataset_source: String,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorRecord {
    pub id: String,
    pub name: String,
    pub vector: SteeringVector,
}

impl VectorRecord {
    fn to_file(&self) -> VectorFile {
        let v = &self.vector;
        VectorFile {
            schema_version: SCHEMA_VERSION,
            id: self.id.clone(),
            name: self.name.clone(),
            method: v.method.clone(),
            layer: v.layer,
            site: v.site,
            d_model: v.d_model(),
            values_b64: v.values_b64(),
            default_multiplier: v.default_multiplier,
            concept_label: v.concept_label.clone(),
            parents: v.parents.clone(),
            merge_spec: v.merge_spec.clone(),
            config_digest: v.provenance.config_digest.clone(),
            created_at: v.created_at,
            tags: v.tags.clone(),
            dataset_source: v.provenance.dataset_source.clone(),
            norm: v.norm(),
        }
    }

    /// Decodes and verifies a record file against its own id.
    fn from_file(file: VectorFile) -> Result<Self> {
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "vector record schema_version {} is not supported",
                file.schema_version
            )));
        }
        let bytes = B64
            .decode(&file.values_b64)
            .map_err(|e| Error::Format(format!("values_b64 of {}: {e}", file.id)))?;
        let values = f32s_from_le_bytes(&bytes)
            .ok_or_else(|| Error::Format(format!("values_b64 of {} is not whole float32s", file.id)))?;
        if values.len() != file.d_model {
            return Err(Error::DigestMismatch {
                id: file.id.clone(),
                actual: format!("{} values for d_model {}", values.len(), file.d_model),
            });
        }
        let vector = SteeringVector {
            layer: file.layer,
            site: file.site,
            values,
            method: file.method,
            concept_label: file.concept_label,
            default_multiplier: file.default_multiplier,
            provenance: Provenance {
                dataset_source: file.dataset_source,
                config_digest: file.config_digest,
            },
            parents: file.parents,
            merge_spec: file.merge_spec,
            tags: file.tags,
            created_at: file.created_at,
        };
        let actual = vector.digest();
        if actual != file.id {
            return Err(Error::DigestMismatch { id: file.id, actual });
        }
        if vector.norm() != file.norm {
            return Err(Error::DigestMismatch {
                id: file.id,
                actual: format!("norm {} recorded as {}", vector.norm(), file.norm),
            });
        }
        Ok(Self {
            id: file.id,
            name: file.name,
            vector,
        })
    }

    pub fn summary(&self) -> VectorSummary {
        let v = &self.vector;
        VectorSummary {
            id: self.id.clone(),
            name: self.name.clone(),
            method: v.method.clone(),
            concept_label: v.concept_label.clone(),
            layer: v.layer,
            site: v.site,
            d_model: v.d_model(),
            norm: v.norm(),
            default_multiplier: v.default_multiplier,
            parents: v.parents.clone(),
            tags: v.tags.clone(),
            created_at: v.created_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorSummary {
    pub id: String,
    pub name: String,
    pub method: String,
    pub concept_label: String,
    pub layer: usize,
    pub site: Site,
    pub d_model: usize,
    pub norm: f64,
    pub default_multiplier: f32,
    pub parents: Vec<String>,
    pub tags: Vec<String>,
    pub created_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorFilter {
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub concept: Option<String>,
    #[serde(default)]
    pub layer: Option<usize>,
}

impl VectorFilter {
    fn matches(&self, s: &VectorSummary) -> bool {
        self.method.as_ref().is_none_or(|m| *m == s.method)
            && self.concept.as_ref().is_none_or(|c| *c == s.concept_label)
            && self.layer.is_none_or(|l| l == s.layer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSteerFile {
    pub schema_version: u32,
    pub id: String,
    pub name: String,
    pub created_at: u64,
    pub matrix: LmSteerMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub name: String,
    pub method: String,
    pub concept_label: String,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub vectors: std::collections::BTreeMap<String, IndexEntry>,
}

/// Held while writing; the lock file is removed on drop.
struct WriteLock {
    path: PathBuf,
}

impl WriteLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        let start = Instant::now();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let stale = std::fs::metadata(&path)
                        .and_then(|m| m.modified())
                        .ok()
                        .and_then(|t| SystemTime::now().duration_since(t).ok())
                        .is_some_and(|age| age > STALE_LOCK);
                    if stale {
                        let _ = std::fs::remove_file(&path);
                        continue;
                    }
                    if start.elapsed() > LOCK_TIMEOUT {
                        return Err(Error::io(
                            &path,
                            std::io::Error::new(std::io::ErrorKind::WouldBlock, "store is locked by another writer"),
                        ));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct VectorStore {
    root: PathBuf,
}

fn is_id(key: &str) -> bool {
    key.len() == 64 && key.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn record_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !name.starts_with('.') && name.ends_with(".json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl VectorStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for dir in [root.join("vectors"), root.join("lm_steer")] {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn vector_path(&self, id: &str) -> PathBuf {
        self.root.join("vectors").join(format!("{id}.json"))
    }

    fn lm_steer_path(&self, id: &str) -> PathBuf {
        self.root.join("lm_steer").join(format!("{id}.json"))
    }

    fn lock(&self) -> Result<WriteLock> {
        WriteLock::acquire(self.root.join(".lock"))
    }

    /// Saves `vector` under `name`, returning its content id. Saving a
    /// payload that is already stored returns the existing id and leaves the
    /// existing record, including its name, untouched.
    pub fn save_vector(&self, name: &str, vector: &SteeringVector) -> Result<String> {
        vector.validate()?;
        let id = vector.digest();
        let _guard = self.lock()?;
        let path = self.vector_path(&id);
        if path.exists() {
            let existing = self.load_by_id(&id)?;
            if existing.vector.digest() != id || existing.vector.values != vector.values {
                return Err(Error::Collision(id));
            }
            return Ok(id);
        }
        for parent in &vector.parents {
            if !self.vector_path(parent).exists() {
                return Err(Error::NotFound(format!("parent vector {parent}")));
            }
        }
        let record = VectorRecord {
            id: id.clone(),
            name: name.to_string(),
            vector: vector.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&record.to_file())?;
        write_atomic(&path, &bytes)?;
        self.write_index()?;
        Ok(id)
    }

    /// Verifies a record file produced elsewhere and adds it to the store.
    pub fn import_file(&self, path: &Path) -> Result<String> {
        let record = VectorRecord::from_file(read_json(path)?)?;
        self.save_vector(&record.name, &record.vector)
    }

    pub fn load_by_id(&self, id: &str) -> Result<VectorRecord> {
        let path = self.vector_path(id);
        if !is_id(id) || !path.exists() {
            return Err(Error::NotFound(format!("vector {id}")));
        }
        let file: VectorFile = read_json(&path)?;
        if file.id != id {
            return Err(Error::DigestMismatch {
                id: id.to_string(),
                actual: file.id,
            });
        }
        VectorRecord::from_file(file)
    }

    /// Resolves an id, or else a name that must match exactly one record.
    pub fn load_vector(&self, key: &str) -> Result<VectorRecord> {
        if is_id(key) && self.vector_path(key).exists() {
            return self.load_by_id(key);
        }
        let mut matches: Vec<VectorRecord> = self.all_records()?.into_iter().filter(|r| r.name == key).collect();
        match matches.len() {
            0 => Err(Error::NotFound(format!("vector {key}"))),
            1 => Ok(matches.remove(0)),
            _ => Err(Error::Ambiguous {
                name: key.to_string(),
                ids: matches.into_iter().map(|r| r.id).collect(),
            }),
        }
    }

    fn all_records(&self) -> Result<Vec<VectorRecord>> {
        record_files(&self.root.join("vectors"))?
            .iter()
            .map(|p| {
                let file: VectorFile = read_json(p)?;
                VectorRecord::from_file(file)
            })
            .collect()
    }

    /// Matching records, newest first; equal timestamps order by id.
    pub fn list_vectors(&self, filter: &VectorFilter) -> Result<Vec<VectorSummary>> {
        let mut out: Vec<VectorSummary> = self
            .all_records()?
            .iter()
            .map(VectorRecord::summary)
            .filter(|s| filter.matches(s))
            .collect();
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }

    pub fn len(&self) -> Result<usize> {
        Ok(record_files(&self.root.join("vectors"))?.len())
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    pub fn rebuild_index(&self) -> Result<StoreIndex> {
        let _guard = self.lock()?;
        self.write_index()
    }

    fn write_index(&self) -> Result<StoreIndex> {
        let vectors = self
            .all_records()?
            .into_iter()
            .map(|r| {
                let entry = IndexEntry {
                    file: format!("vectors/{}.json", r.id),
                    name: r.name,
                    method: r.vector.method,
                    concept_label: r.vector.concept_label,
                    layer: r.vector.layer,
                };
                (r.id, entry)
            })
            .collect();
        let index = StoreIndex { vectors };
        write_atomic(&self.root.join("index.json"), &serde_json::to_vec_pretty(&index)?)?;
        Ok(index)
    }

    pub fn save_lm_steer(&self, name: &str, matrix: &LmSteerMatrix) -> Result<String> {
        if matrix.w.len() != matrix.d_model * matrix.d_model {
            return Err(Error::ShapeMismatch(format!(
                "lm_steer matrix has {} entries for d_model {}",
                matrix.w.len(),
                matrix.d_model
            )));
        }
        if matrix.w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("lm_steer matrix".into()));
        }
        let id = matrix.digest();
        let _guard = self.lock()?;
        let path = self.lm_steer_path(&id);
        if path.exists() {
            return Ok(id);
        }
        let file = LmSteerFile {
            schema_version: SCHEMA_VERSION,
            id: id.clone(),
            name: name.to_string(),
            created_at: now_unix(),
            matrix: matrix.clone(),
        };
        write_atomic(&path, &serde_json::to_vec_pretty(&file)?)?;
        Ok(id)
    }

    pub fn load_lm_steer(&self, key: &str) -> Result<LmSteerFile> {
        let files: Vec<LmSteerFile> = if is_id(key) && self.lm_steer_path(key).exists() {
            vec![read_json(&self.lm_steer_path(key))?]
        } else {
            record_files(&self.root.join("lm_steer"))?
                .iter()
                .map(|p| read_json::<LmSteerFile>(p))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|f| f.name == key)
                .collect()
        };
        let mut files = files;
        let file = match files.len() {
            0 => return Err(Error::NotFound(format!("lm_steer matrix {key}"))),
            1 => files.remove(0),
            _ => {
                return Err(Error::Ambiguous {
                    name: key.to_string(),
                    ids: files.into_iter().map(|f| f.id).collect(),
                })
            }
        };
        let actual = file.matrix.digest();
        if actual != file.id {
            return Err(Error::DigestMismatch { id: file.id, actual });
        }
        Ok(file)
    }
}
