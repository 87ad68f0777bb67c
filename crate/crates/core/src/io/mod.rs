//! Sequence bundle storage: MOTChallenge text files, `TNSR` tensors and the
//! bundle manifest.

pub mod bundle;
pub mod mot;
pub mod tensor;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use bundle::{load_bundle, save_bundle, Detection, Frame, ObjectMask, SequenceBundle};
pub use mot::{read_tracks, write_results, TrackRow};
pub use tensor::{read_tensor, write_tensor, Tensor, TensorData, TensorError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("{path}: {source}")]
    InFile { path: PathBuf, source: Box<IoError> },
    #[error("{path}: {source}")]
    Tensor { path: PathBuf, source: TensorError },
    #[error("index mismatch: {0}")]
    IndexMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        IoError::InFile { path: path.to_path_buf(), source: Box::new(self) }
    }
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.partial"));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        IoError::io(path, e)
    })
}
