//! Content-addressed storage for explanation documents.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of the document bytes.
pub fn content_id(document: &str) -> String {
    hex::encode(Sha256::digest(document.as_bytes()))
}

fn is_content_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

/// Documents keyed by their content id. With a directory, every document
/// is also written to `<dir>/<id>.json` through a temp file and a rename, so
/// readers never see a partial write.
#[derive(Debug, Default)]
pub struct ExplanationStore {
    dir: Option<PathBuf>,
    cache: RwLock<HashMap<String, String>>,
}

impl ExplanationStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            cache: RwLock::default(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Stores `document` and returns its id. Storing the same bytes again is
    /// a no-op.
    pub fn put(&self, document: &str) -> std::io::Result<String> {
        let id = content_id(document);
        if self.cache.read().expect("store lock").contains_key(&id) {
            return Ok(id);
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{id}.json"));
            if !path.exists() {
                let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
                tmp.write_all(document.as_bytes())?;
                tmp.as_file().sync_all()?;
                tmp.persist(&path).map_err(|e| e.error)?;
            }
        }
        self.cache.write().expect("store lock").insert(id.clone(), document.to_string());
        Ok(id)
    }

    pub fn get(&self, id: &str) -> std::io::Result<Option<String>> {
        if let Some(doc) = self.cache.read().expect("store lock").get(id) {
            return Ok(Some(doc.clone()));
        }
        let Some(dir) = &self.dir else { return Ok(None) };
        if !is_content_id(id) {
            return Ok(None);
        }
        match std::fs::read_to_string(dir.join(format!("{id}.json"))) {
            Ok(doc) => {
                self.cache.write().expect("store lock").insert(id.to_string(), doc.clone());
                Ok(Some(doc))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}
