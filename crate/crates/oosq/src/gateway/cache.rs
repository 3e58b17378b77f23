use std::fs;
use std::path::{Path, PathBuf};

use oosq_core::ChatRequest;
use serde::{Deserialize, Serialize};

use crate::datastore::{sha256_hex, write_atomic};

#[derive(Serialize)]
struct KeyFields<'a> {
    model_id: &'a str,
    system_text: &'a str,
    user_text: &'a str,
    temperature: f64,
    sample_index: u32,
}

/// SHA-256 over the compact JSON of the fields that identify a completion.
/// `max_tokens` is deliberately not part of the key.
pub fn cache_key(req: &ChatRequest) -> String {
    let fields = KeyFields {
        model_id: &req.model_id,
        system_text: &req.system_text,
        user_text: &req.user_text,
        temperature: req.temperature,
        sample_index: req.sample_index,
    };
    sha256_hex(serde_json::to_string(&fields).expect("key fields serialize").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model_id: String,
    pub temperature: f64,
    pub sample_index: u32,
    pub text: String,
    pub created_at: String,
}

/// One JSON file per key under `dir/<first two hex chars>/<key>.json`.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    /// Unreadable or corrupt entries count as misses.
    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let bytes = fs::read(self.path(key)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(e) if e.key == key => Some(e),
            _ => {
                log::warn!("ignoring corrupt cache entry {key}");
                None
            }
        }
    }

    pub fn put(&self, req: &ChatRequest, text: &str) -> std::io::Result<()> {
        let key = cache_key(req);
        let entry = CacheEntry {
            key: key.clone(),
            model_id: req.model_id.clone(),
            temperature: req.temperature,
            sample_index: req.sample_index,
            text: text.into(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        let bytes = serde_json::to_vec(&entry).expect("cache entry serializes");
        write_atomic(&self.path(&key), &bytes).map_err(|e| match e {
            crate::datastore::StoreError::Io { source, .. } => source,
            other => std::io::Error::other(other.to_string()),
        })
    }
}
