//! Content hashes and report emission.
//!
//! Files hash like git blobs (`sha256("blob <len>\0" ‖ bytes)`); a directory
//! hashes the sorted `<hash> <relative path>` lines of every file below it,
//! so the digest is independent of where the tree lives.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{io_error, CliError, CliResult};

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(hash_bytes(&bytes))
}

pub fn hash_tree(dir: &Path) -> CliResult<String> {
    let mut listing = String::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays below root");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        listing.push_str(&format!("{} {rel}\n", hash_file(entry.path())?));
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", listing.len()).as_bytes());
    h.update(listing.as_bytes());
    Ok(hex::encode(h.finalize()))
}

/// Hash of a file or directory.
pub fn hash_path(path: &Path) -> CliResult<String> {
    if path.is_dir() {
        hash_tree(path)
    } else {
        hash_file(path)
    }
}

pub fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report values serialize")
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report values serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

/// Adds `"outputs": {file name: hash}` for the given files in `dir`.
pub fn with_output_hashes(mut report: Value, dir: &Path, files: &[&str]) -> CliResult<Value> {
    let mut outputs = serde_json::Map::new();
    for f in files {
        outputs.insert((*f).to_string(), Value::String(hash_path(&dir.join(f))?));
    }
    report["outputs"] = Value::Object(outputs);
    Ok(report)
}
