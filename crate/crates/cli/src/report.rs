//! Output envelopes. Every file a command writes carries the tool version,
//! the resolved config hash, the seeds in play, and the sha-256 of each
//! input, so any result can be traced back to its exact inputs and
//! reproduced byte for byte.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn tool_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Hash the given input files, keyed by path as passed on the command line.
pub fn fixture_hashes<'a>(
    paths: impl IntoIterator<Item = &'a Path>,
) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for path in paths {
        out.insert(path.display().to_string(), hash_file(path)?);
    }
    Ok(out)
}

/// The provenance wrapper around a command's payload.
#[derive(Debug, Serialize)]
pub struct Envelope<T> {
    pub tool_version: &'static str,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub fixture_hashes: BTreeMap<String, String>,
    pub payload: T,
}

impl<T: Serialize> Envelope<T> {
    pub fn new(
        config_hash: &str,
        seeds: Vec<u64>,
        fixture_hashes: BTreeMap<String, String>,
        payload: T,
    ) -> Self {
        Self {
            tool_version: tool_version(),
            config_hash: config_hash.to_string(),
            seeds,
            fixture_hashes,
            payload,
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("envelope serializes");
        text.push('\n');
        text
    }
}

/// The `_meta` object stamped into generated JSON assets. Loaders ignore
/// unknown keys, so the stamp rides along without breaking consumers.
pub fn meta_object(config_hash: &str, seeds: &[u64]) -> serde_json::Value {
    serde_json::json!({
        "tool_version": tool_version(),
        "config_hash": config_hash,
        "seeds": seeds,
    })
}

/// Render the same provenance as `# key: value` comment lines for CSV files.
pub fn csv_comments(
    config_hash: &str,
    fixture_hashes: &BTreeMap<String, String>,
) -> String {
    let mut out = String::new();
    out.push_str(&format!("# tool_version: {}\n", tool_version()));
    out.push_str(&format!("# config_hash: {config_hash}\n"));
    for (name, hash) in fixture_hashes {
        out.push_str(&format!("# fixture:{name}: {hash}\n"));
    }
    out
}

/// Write to the path (creating parent directories) or to stdout when `None`.
pub fn write_text(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| {
                        CliError::Validation(format!("cannot create {}: {e}", parent.display()))
                    })?;
                }
            }
            std::fs::write(path, text).map_err(|e| {
                CliError::Validation(format!("cannot write {}: {e}", path.display()))
            })
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Validation(format!("stdout: {e}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_serializes_all_provenance_fields() {
        let mut hashes = BTreeMap::new();
        hashes.insert("scenes.json".to_string(), "abc".to_string());
        let envelope = Envelope::new("deadbeef", vec![3, 5], hashes, serde_json::json!({"x": 1}));
        let value: serde_json::Value = serde_json::from_str(&envelope.to_json()).unwrap();
        assert_eq!(value["tool_version"], tool_version());
        assert_eq!(value["config_hash"], "deadbeef");
        assert_eq!(value["seeds"], serde_json::json!([3, 5]));
        assert_eq!(value["fixture_hashes"]["scenes.json"], "abc");
        assert_eq!(value["payload"]["x"], 1);
    }

    #[test]
    fn csv_comments_lead_with_version_and_hash() {
        let mut hashes = BTreeMap::new();
        hashes.insert("a.json".to_string(), "h1".to_string());
        let text = csv_comments("cfg", &hashes);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], format!("# tool_version: {}", tool_version()));
        assert_eq!(lines[1], "# config_hash: cfg");
        assert_eq!(lines[2], "# fixture:a.json: h1");
    }

    #[test]
    fn sha256_matches_a_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn write_text_creates_parent_directories() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.json");
        write_text(Some(&path), "{}\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "{}\n");
    }
}
