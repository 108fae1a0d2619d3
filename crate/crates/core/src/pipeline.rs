//! Pipeline stages: each one reads declared inputs, writes one output
//! directory, and is a pure function of its inputs and the root seed.

use std::path::Path;

use crate::error::Result;

/// Write-temp-then-rename so partially written artifacts never appear.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
