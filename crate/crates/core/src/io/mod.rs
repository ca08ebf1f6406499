//! Versioned little-endian file formats and atomic writes.

mod bytes;
mod checkpoint;
mod dataset;

pub use checkpoint::{Checkpoint, TrainingPosition, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{DatasetFile, PredictionBlock, DATASET_MAGIC, DATASET_VERSION};

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a {expected} file (bad magic)")]
    Magic { expected: &'static str },
    #[error("unsupported {kind} format version {found} (supported: {supported})")]
    Version { kind: &'static str, found: u32, supported: u32 },
    #[error("integrity checksum mismatch")]
    Checksum,
    #[error("invalid field `{field}` at byte offset {offset}: {detail}")]
    Field { field: String, offset: usize, detail: String },
    #[error("truncated file: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
