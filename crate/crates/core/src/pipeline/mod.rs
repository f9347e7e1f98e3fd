//! Per-subject orchestration shared by the command-line tool and the
//! end-to-end tests. Everything a subject produces lives under
//! `<out_dir>/<subject>/`: the protocol audit and segment caches at the top,
//! one directory per trained model below it.

mod data;
mod run;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alarm::AlarmError;
use crate::edfio::EdfError;
use crate::numkernel::KernelError;
use crate::protocol::ProtocolError;
use crate::signal::SignalError;
use crate::trainer::TrainError;

pub use data::{
    discover, ingest, prepare, ClusterAudit, IngestSummary, PartAudit, Prepared, ProtocolAudit, RecordingFile,
    SubjectInput,
};
pub use run::{
    ablate, evaluate, load_split, render_report, run_ingest, run_protocol, train, AblationRow, EvalOutcome,
    ReportRow, TrainSummary, Variant,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("subject {subject} excluded: {reason}")]
    Ineligible { subject: String, reason: String },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Edf(#[from] EdfError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Alarm(#[from] AlarmError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

impl PipelineError {
    /// 1 for usage and configuration mistakes, 2 for data and eligibility problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Train(TrainError::Config(_)) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Data(format!("{}: {e}", path.display()))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub(crate) fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Output directory of one subject.
#[derive(Clone, Debug)]
pub struct SubjectDir {
    pub root: PathBuf,
}

impl SubjectDir {
    pub fn new(out_dir: &Path, subject: &str) -> Self {
        Self {
            root: out_dir.join(subject),
        }
    }

    pub fn cache(&self, part: &str) -> PathBuf {
        self.root.join(format!("{part}.tseg"))
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn run(&self, name: &str) -> RunDir {
        RunDir {
            root: self.root.join(name),
        }
    }
}

/// Directory holding one trained model and its evaluation.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.kv")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn digest(path: &Path, base: &Path) -> Result<FileDigest, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let hash = Sha256::digest(&bytes);
    let rel = path.strip_prefix(base).unwrap_or(path);
    Ok(FileDigest {
        path: rel.to_string_lossy().replace('\\', "/"),
        bytes: bytes.len() as u64,
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// Inputs, outputs and settings of one command. Holds nothing that varies
/// between identical runs, so reruns produce an identical file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub subject: String,
    pub version: String,
    pub seed: u64,
    pub config: Vec<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str, subject: &str, seed: u64, config: &str) -> Self {
        Self {
            command: command.into(),
            subject: subject.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: config.lines().map(str::to_string).collect(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn inputs(mut self, paths: &[PathBuf], base: &Path) -> Result<Self, PipelineError> {
        for p in paths {
            self.inputs.push(digest(p, base)?);
        }
        Ok(self)
    }

    pub fn outputs(mut self, paths: &[PathBuf], base: &Path) -> Result<Self, PipelineError> {
        for p in paths {
            self.outputs.push(digest(p, base)?);
        }
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        write_file(path, serde_json::to_string_pretty(self).expect("manifest serializes") + "\n")
    }
}
