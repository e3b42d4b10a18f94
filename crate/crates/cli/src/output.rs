//! Report files, written atomically.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Writes `contents` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::usage(format!("out: cannot create {}: {e}", dir.display())))?;
    let target = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| CliError::usage(format!("out: {}: {e}", dir.display())))?;
    tmp.write_all(contents)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| CliError::usage(format!("out: {}: {e}", target.display())))?;
    tmp.persist(&target)
        .map_err(|e| CliError::usage(format!("out: {}: {}", target.display(), e.error)))?;
    Ok(target)
}

pub fn to_json<S: Serialize>(value: &S) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("reports serialize");
    v.push(b'\n');
    v
}
