use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, GatewayError, ParsedResponse};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub backend: String,
    pub prompt: String,
    /// Temperature in its shortest round-trip decimal form.
    pub temperature: String,
    pub sample: u32,
}

impl CacheKey {
    pub fn of(req: &CompletionRequest) -> Self {
        CacheKey {
            backend: req.backend_id.clone(),
            prompt: req.prompt.digest(),
            temperature: format!("{:?}", req.temperature),
            sample: req.sample_index,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    key: CacheKey,
    response: ParsedResponse,
}

/// Completion cache, optionally backed by an append-only JSONL file so that
/// re-running a stage never re-issues a request. Identical keys always carry
/// identical values, so concurrent writers can race harmlessly.
pub struct ResponseCache {
    map: RwLock<HashMap<CacheKey, ParsedResponse>>,
    sink: Option<Mutex<BufWriter<File>>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            map: RwLock::new(HashMap::new()),
            sink: None,
        }
    }

    /// Load existing entries from `path` (if any) and append new ones to it.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let mut map = HashMap::new();
        if path.exists() {
            let entries: Vec<Entry> = crate::io::read_jsonl(path)
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
            for e in entries {
                map.insert(e.key, e.response);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
        Ok(ResponseCache {
            map: RwLock::new(map),
            sink: Some(Mutex::new(BufWriter::new(file))),
        })
    }

    pub fn get(&self, key: &CacheKey) -> Option<ParsedResponse> {
        self.map.read().expect("cache lock poisoned").get(key).cloned()
    }

    pub fn insert(&self, key: CacheKey, response: ParsedResponse) -> Result<(), GatewayError> {
        if let Some(sink) = &self.sink {
            let line = serde_json::to_string(&Entry {
                key: key.clone(),
                response: response.clone(),
            })
            .map_err(|e| GatewayError::Cache(e.to_string()))?;
            let mut w = sink.lock().expect("cache sink poisoned");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        self.map.write().expect("cache lock poisoned").insert(key, response);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
