//! File output helpers: atomic writes and content hashes.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::Result;

/// Write `bytes` to a temporary file next to `path`, then rename it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a set of files, keyed by their names relative to `root` and
/// visited in sorted order.
pub fn hash_files(root: &Path, files: &[std::path::PathBuf]) -> Result<String> {
    let mut sorted: Vec<_> = files.to_vec();
    sorted.sort();
    let mut h = Sha256::new();
    for f in sorted {
        let name = f.strip_prefix(root).unwrap_or(&f);
        h.update(name.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update(fs::read(&f)?);
        h.update([0u8]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash every regular file below `root` (recursively).
pub fn hash_tree(root: &Path) -> Result<String> {
    if root.is_file() {
        return Ok(sha256_hex(&fs::read(root)?));
    }
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    hash_files(root, &files)
}
