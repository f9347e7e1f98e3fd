//! EDF recordings, seizure annotations and montage selection.

mod edf;
mod montage;
mod summary;
pub mod time;

use thiserror::Error;

pub use edf::{parse_edf, parse_edf_header, write_edf, EdfHeader, SignalHeader, DIGITAL_MAX, DIGITAL_MIN};
pub use montage::{normalize_label, select_montage, CANONICAL_MONTAGE};
pub use summary::{parse_summary, AnnotationSet, FileAnnotation, SeizureAnnotation, SeizureSpan};

#[derive(Debug, Error)]
pub enum EdfError {
    #[error("truncated {what}: need {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("header field `{field}` at byte {offset} is not valid: {value:?}")]
    Field {
        field: &'static str,
        offset: usize,
        value: String,
    },
    #[error("record count -1 (unknown length) is not supported")]
    UnknownRecordCount,
    #[error("invalid EDF: {0}")]
    Invalid(String),
    #[error("missing montage channels: {}", .0.join(", "))]
    MissingChannels(Vec<String>),
    #[error("summary line {line}: {msg}")]
    Summary { line: usize, msg: String },
    #[error("file `{0}` contains seizures but has no start time")]
    MissingStartTime(String),
    #[error("annotation for `{file}`: onset {onset} s must precede offset {offset} s")]
    SeizureOrder { file: String, onset: f64, offset: f64 },
    #[error("annotation JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Multichannel recording in microvolts, one row per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecord {
    pub channels: Vec<String>,
    pub fs: f64,
    pub data: Vec<Vec<f64>>,
    /// Absolute start time in seconds.
    pub start_time: f64,
}

impl EegRecord {
    pub fn new(channels: Vec<String>, fs: f64, data: Vec<Vec<f64>>, start_time: f64) -> Result<Self, EdfError> {
        if channels.len() != data.len() {
            return Err(EdfError::Invalid(format!(
                "{} labels for {} channels",
                channels.len(),
                data.len()
            )));
        }
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(EdfError::Invalid(format!("sampling rate {fs}")));
        }
        if let Some(first) = data.first() {
            if data.iter().any(|row| row.len() != first.len()) {
                return Err(EdfError::Invalid("channels differ in length".into()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in &channels {
            if !seen.insert(normalize_label(c)) {
                return Err(EdfError::Invalid(format!("duplicate channel label `{c}`")));
            }
        }
        Ok(Self {
            channels,
            fs,
            data,
            start_time,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn duration(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration()
    }
}
