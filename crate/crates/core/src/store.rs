//! Content-addressed artifact store.
//!
//! Layout: `<root>/<layer>/<topic-hash>.json`, one canonical JSON document
//! per artifact. A store root is scoped to one dataset fingerprint, so the
//! effective cache key is (fingerprint, topic hash). Publication is atomic
//! and first-writer-wins.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::artifact::{Artifact, ArtifactLookup};
use crate::topic::{Layer, TopicId};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("artifact {path} is not valid JSON: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("nondeterminism alarm: {0} was published twice with different payloads")]
    NondeterminismAlarm(TopicId),
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PublishOutcome {
    Created,
    /// An artifact with the same id and payload already existed.
    Existing,
}

#[derive(Debug)]
pub struct ArtifactStore {
    root: Option<PathBuf>,
    cache: RwLock<HashMap<TopicId, Arc<Artifact>>>,
    created: AtomicU64,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ArtifactStore {
    /// Store that lives only in memory.
    pub fn in_memory() -> Self {
        Self {
            root: None,
            cache: RwLock::new(HashMap::new()),
            created: AtomicU64::new(0),
        }
    }

    /// File-backed store rooted at `root`, created if absent.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for layer in Layer::ALL {
            let dir = root.join(layer.as_str());
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        Ok(Self {
            root: Some(root),
            cache: RwLock::new(HashMap::new()),
            created: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn path_for(&self, id: &TopicId) -> Option<PathBuf> {
        self.root
            .as_ref()
            .map(|r| r.join(id.layer.as_str()).join(format!("{}.json", id.hash)))
    }

    /// Number of artifacts this handle has newly written.
    pub fn created_count(&self) -> u64 {
        self.created.load(Ordering::SeqCst)
    }

    pub fn get(&self, id: &TopicId) -> Result<Option<Arc<Artifact>>, StoreError> {
        if let Some(a) = self.cache.read().expect("store lock").get(id) {
            return Ok(Some(a.clone()));
        }
        let Some(path) = self.path_for(id) else {
            return Ok(None);
        };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path, e)),
        };
        let artifact: Artifact =
            serde_json::from_slice(&bytes).map_err(|source| StoreError::Corrupt { path, source })?;
        let artifact = Arc::new(artifact);
        self.cache
            .write()
            .expect("store lock")
            .insert(id.clone(), artifact.clone());
        Ok(Some(artifact))
    }

    pub fn contains(&self, id: &TopicId) -> bool {
        matches!(self.get(id), Ok(Some(_)))
    }

    /// Publishes an artifact. If one already exists under the same id, the
    /// payload digests must match, otherwise [`StoreError::NondeterminismAlarm`].
    pub fn publish(&self, artifact: Artifact) -> Result<PublishOutcome, StoreError> {
        let id = artifact.topic_id.clone();
        if let Some(existing) = self.get(&id)? {
            return Self::compare(&existing, &artifact);
        }
        let artifact = Arc::new(artifact);
        if let Some(path) = self.path_for(&id) {
            let dir = path.parent().expect("artifact path has a parent");
            let tmp = dir.join(format!(
                ".{}.{}.{}.tmp",
                id.hash,
                std::process::id(),
                TMP_COUNTER.fetch_add(1, Ordering::SeqCst)
            ));
            {
                let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
                f.write_all(&artifact.to_canonical_bytes())
                    .map_err(|e| io_err(&tmp, e))?;
                f.sync_all().map_err(|e| io_err(&tmp, e))?;
            }
            // hard_link fails if the target exists, which makes the first writer win.
            let linked = fs::hard_link(&tmp, &path);
            let _ = fs::remove_file(&tmp);
            match linked {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let existing = self.get(&id)?.expect("existing artifact readable");
                    return Self::compare(&existing, &artifact);
                }
                Err(e) => return Err(io_err(&path, e)),
            }
        } else {
            let mut cache = self.cache.write().expect("store lock");
            if let Some(existing) = cache.get(&id) {
                return Self::compare(existing, &artifact);
            }
            cache.insert(id.clone(), artifact.clone());
            self.created.fetch_add(1, Ordering::SeqCst);
            return Ok(PublishOutcome::Created);
        }
        self.cache.write().expect("store lock").insert(id, artifact);
        self.created.fetch_add(1, Ordering::SeqCst);
        Ok(PublishOutcome::Created)
    }

    fn compare(existing: &Artifact, new: &Artifact) -> Result<PublishOutcome, StoreError> {
        if existing.payload.digest() == new.payload.digest() {
            Ok(PublishOutcome::Existing)
        } else {
            Err(StoreError::NondeterminismAlarm(new.topic_id.clone()))
        }
    }

    /// All artifact ids present, sorted.
    pub fn list(&self) -> Result<Vec<TopicId>, StoreError> {
        let mut ids: Vec<TopicId> = match &self.root {
            None => self.cache.read().expect("store lock").keys().cloned().collect(),
            Some(root) => {
                let mut ids = Vec::new();
                for layer in Layer::ALL {
                    let dir = root.join(layer.as_str());
                    let entries = match fs::read_dir(&dir) {
                        Ok(e) => e,
                        Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                        Err(e) => return Err(io_err(&dir, e)),
                    };
                    for entry in entries {
                        let entry = entry.map_err(|e| io_err(&dir, e))?;
                        let name = entry.file_name().to_string_lossy().to_string();
                        if let Some(hash) = name.strip_suffix(".json") {
                            if let Ok(id) = format!("{layer}/{hash}").parse() {
                                ids.push(id);
                            }
                        }
                    }
                }
                ids
            }
        };
        ids.sort();
        Ok(ids)
    }
}

impl ArtifactLookup for ArtifactStore {
    fn get_artifact(&self, id: &TopicId) -> Option<Artifact> {
        self.get(id).ok().flatten().map(|a| (*a).clone())
    }

    fn contains_artifact(&self, id: &TopicId) -> bool {
        self.contains(id)
    }
}
