//! Atomic file output: write to a sibling temporary file, then rename.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;

/// Sibling path that keeps the extension, so format detection by suffix
/// still works on the temporary file.
fn temp_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    let name = match path.extension() {
        Some(ext) => format!(".{stem}.tmp{}.{}", std::process::id(), ext.to_string_lossy()),
        None => format!(".{stem}.tmp{}", std::process::id()),
    };
    path.with_file_name(name)
}

/// Runs `write` against a temporary path and renames the result onto
/// `path`. The temporary file is removed if `write` fails.
pub fn atomic_with<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = temp_path(path);
    match write(&tmp) {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_with(path, |tmp| Ok(fs::write(tmp, bytes)?))
}
