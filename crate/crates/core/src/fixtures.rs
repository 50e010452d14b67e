//! Record/replay stores for provider interactions.
//!
//! Recording a session writes one JSONL line per provider call:
//! `{"key": <sha256 of the canonical request>, "request": ..., "response": ...}`.
//! Replaying serves responses keyed by the same hash, in recorded order for
//! repeated identical requests, so a replayed run is byte-identical to the
//! recorded one without touching the network.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::{HashMap, VecDeque};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("fixture io: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture line {line} is not valid JSON: {source}")]
    BadLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("no recorded response for request key {key} ({hint})")]
    Missing { key: String, hint: String },
}

/// Canonical JSON text: object keys sorted recursively, compact separators.
/// Array order and scalar formatting follow serde_json.
pub fn canonical_json(value: &Value) -> String {
    fn order(value: &Value) -> Value {
        match value {
            Value::Object(map) => {
                let mut sorted: Vec<(&String, &Value)> = map.iter().collect();
                sorted.sort_by(|a, b| a.0.cmp(b.0));
                Value::Object(
                    sorted
                        .into_iter()
                        .map(|(k, v)| (k.clone(), order(v)))
                        .collect(),
                )
            }
            Value::Array(items) => Value::Array(items.iter().map(order).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&order(value)).expect("ordered JSON serialization is infallible")
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fixture key for a request: SHA-256 of its canonical JSON.
pub fn request_key(request: &Value) -> String {
    sha256_hex(canonical_json(request).as_bytes())
}

/// One recorded interaction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub key: String,
    pub request: Value,
    pub response: Value,
}

/// Appends interactions to a JSONL file as they happen.
pub struct RecordStore {
    path: PathBuf,
    file: Mutex<std::fs::File>,
}

impl RecordStore {
    /// Open for appending, creating the file (and parent directories) if
    /// needed, so successive recording runs accumulate into one fixture.
    pub fn open(path: &Path) -> Result<Self, FixtureError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Record one interaction; the line is flushed before returning.
    pub fn record(&self, request: &Value, response: &Value) -> Result<String, FixtureError> {
        let entry = FixtureEntry {
            key: request_key(request),
            request: request.clone(),
            response: response.clone(),
        };
        let line = serde_json::to_string(&entry).expect("fixture entry serializes");
        let mut file = self.file.lock().expect("record store lock");
        writeln!(file, "{line}")?;
        file.flush()?;
        Ok(entry.key)
    }
}

/// Serves recorded responses by request key.
///
/// Repeated identical requests replay in recorded order; once a key's queue
/// is down to its final response, that response is served indefinitely, so
/// replays tolerate a different number of retries than the recording.
#[derive(Debug)]
pub struct ReplayStore {
    path: PathBuf,
    entries: Mutex<HashMap<String, VecDeque<Value>>>,
}

impl ReplayStore {
    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let text = std::fs::read_to_string(path)?;
        let mut entries: HashMap<String, VecDeque<Value>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry =
                serde_json::from_str(line).map_err(|source| FixtureError::BadLine {
                    line: i + 1,
                    source,
                })?;
            entries.entry(entry.key).or_default().push_back(entry.response);
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Look up the response for a request. Fails when the request was never
    /// recorded — replay mode must not fall through to a live endpoint.
    pub fn replay(&self, request: &Value) -> Result<Value, FixtureError> {
        let key = request_key(request);
        let mut entries = self.entries.lock().expect("replay store lock");
        let queue = entries.get_mut(&key).ok_or_else(|| FixtureError::Missing {
            key: key.clone(),
            hint: format!("fixture file {}", self.path.display()),
        })?;
        Ok(if queue.len() > 1 {
            queue.pop_front().expect("non-empty queue")
        } else {
            queue.front().expect("non-empty queue").clone()
        })
    }

    /// Number of distinct request keys loaded.
    pub fn len(&self) -> usize {
        self.entries.lock().expect("replay store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn canonical_json_sorts_keys_recursively() {
        let v = json!({"b": 1, "a": {"z": [1, {"y": 2, "x": 3}], "w": null}});
        assert_eq!(
            canonical_json(&v),
            r#"{"a":{"w":null,"z":[1,{"x":3,"y":2}]},"b":1}"#
        );
    }

    #[test]
    fn canonical_json_preserves_array_order() {
        let v = json!([3, 1, 2]);
        assert_eq!(canonical_json(&v), "[3,1,2]");
    }

    #[test]
    fn key_is_stable_under_key_reordering() {
        let a = json!({"model": "m", "prompt": "p"});
        let b = serde_json::from_str::<Value>(r#"{"prompt": "p", "model": "m"}"#).unwrap();
        assert_eq!(request_key(&a), request_key(&b));
        assert_eq!(request_key(&a).len(), 64);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn record_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        let store = RecordStore::open(&path).unwrap();
        let req = json!({"prompt": "hello", "n": 1});
        let resp = json!({"text": "world"});
        store.record(&req, &resp).unwrap();

        let replay = ReplayStore::load(&path).unwrap();
        assert_eq!(replay.len(), 1);
        assert_eq!(replay.replay(&req).unwrap(), resp);
        // Served repeatedly once only one response remains.
        assert_eq!(replay.replay(&req).unwrap(), resp);
    }

    #[test]
    fn repeated_requests_replay_in_order_then_hold_last() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        let store = RecordStore::open(&path).unwrap();
        let req = json!({"prompt": "same"});
        store.record(&req, &json!({"seq": 1})).unwrap();
        store.record(&req, &json!({"seq": 2})).unwrap();
        store.record(&req, &json!({"seq": 3})).unwrap();

        let replay = ReplayStore::load(&path).unwrap();
        assert_eq!(replay.replay(&req).unwrap(), json!({"seq": 1}));
        assert_eq!(replay.replay(&req).unwrap(), json!({"seq": 2}));
        assert_eq!(replay.replay(&req).unwrap(), json!({"seq": 3}));
        assert_eq!(replay.replay(&req).unwrap(), json!({"seq": 3}));
        assert_eq!(replay.replay(&req).unwrap(), json!({"seq": 3}));
    }

    #[test]
    fn missing_request_fails_closed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        RecordStore::open(&path).unwrap();
        let replay = ReplayStore::load(&path).unwrap();
        let err = replay.replay(&json!({"prompt": "never seen"})).unwrap_err();
        assert!(matches!(err, FixtureError::Missing { .. }));
    }

    #[test]
    fn bad_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        std::fs::write(&path, "{\"key\":\"k\",\"request\":{},\"response\":{}}\nnot json\n")
            .unwrap();
        match ReplayStore::load(&path).unwrap_err() {
            FixtureError::BadLine { line, .. } => assert_eq!(line, 2),
            other => panic!("expected BadLine, got {other:?}"),
        }
    }

    #[test]
    fn recording_appends_across_reopens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        {
            let store = RecordStore::open(&path).unwrap();
            store.record(&json!({"a": 1}), &json!({"r": 1})).unwrap();
        }
        {
            let store = RecordStore::open(&path).unwrap();
            store.record(&json!({"a": 2}), &json!({"r": 2})).unwrap();
        }
        let replay = ReplayStore::load(&path).unwrap();
        assert_eq!(replay.len(), 2);
        assert_eq!(replay.replay(&json!({"a": 2})).unwrap(), json!({"r": 2}));
    }
}
