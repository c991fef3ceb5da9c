//! Run manifests and checkpoint content hashes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{io_err, Result};

/// `sha256("blob <len>\0" ‖ bytes)` in hex.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash over `<name> <blob hash>` lines of every file in `dir`, sorted by name.
pub fn dir_hash(dir: &Path) -> Result<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut listing = String::new();
    for name in names {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        listing.push_str(&format!("{name} {}\n", blob_hash(&bytes)));
    }
    Ok(blob_hash(listing.as_bytes()))
}

/// Resolved configuration followed by the checkpoint hash.
pub fn run_manifest(config_text: &str, checkpoint: &Path) -> Result<String> {
    Ok(format!(
        "{config_text}checkpoint_sha256 = {}\n",
        dir_hash(checkpoint)?
    ))
}
