//! Files in and out: WAV, session manifests, synthetic sessions, run
//! reports, DOT export and line-delimited logs.

pub mod dot;
pub mod manifest;
pub mod report;
pub mod resample;
pub mod synth;
pub mod wav;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::document::DocumentError;
use crate::executor::ExecError;
use crate::graph::GraphError;
use crate::pruning::{ImportanceRecord, PruneError};
use crate::training::TrainError;

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("unsupported audio encoding in {}: {detail}", path.display())]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("audio file {} holds no samples", .0.display())]
    EmptyAudio(PathBuf),
    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid manifest {}: {detail}", path.display())]
    Manifest { path: PathBuf, detail: String },
    #[error("invalid synthesis spec: {0}")]
    Synth(String),
    #[error("invalid DOT input: {0}")]
    Dot(String),
    #[error(transparent)]
    Document(#[from] DocumentError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Writes through `fill` into a temporary file next to `path`, then renames
/// it into place, so readers never see a partial file.
pub fn atomic_write_with(
    path: &Path,
    fill: impl FnOnce(File) -> std::io::Result<()>,
) -> Result<(), WorkbenchError> {
    let io = |source| WorkbenchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = File::create(&tmp)
        .and_then(|f| fill(f.try_clone()?).and_then(|_| f.sync_all()))
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(io(e));
    }
    Ok(())
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), WorkbenchError> {
    atomic_write_with(path, |mut f| f.write_all(bytes))
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String, WorkbenchError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn importance_csv(records: &[ImportanceRecord]) -> String {
    let mut out = String::from("node,type,weight,delta\n");
    for r in records {
        out.push_str(&format!("{},{},{:e},{:e}\n", r.node, r.kind.letter(), r.weight, r.delta));
    }
    out
}

#[cfg(test)]
mod tests;
