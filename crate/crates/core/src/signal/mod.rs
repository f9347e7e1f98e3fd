//! Notch and band-pass filtering, and 5-second windowing.

mod cache;
mod filters;
mod segment;

use thiserror::Error;

pub use cache::{read_segment_cache, write_segment_cache, SegmentCacheWriter, SEGMENT_MAGIC};
pub use filters::{apply_filters, design_filters, design_filters_with, Biquad, FilterBank, FilterConfig, FilterState};
pub use segment::{plan_windows, segment, LabeledSegment, Phase, SegmentConfig, Segmenter};

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("sampling rate {0} Hz is too low; band-pass needs fs > 200 Hz")]
    SamplingRate(f64),
    #[error("filter design: {0}")]
    Design(String),
    #[error("record sampled at {record} Hz but filters designed for {bank} Hz")]
    RateMismatch { record: f64, bank: f64 },
    #[error("segment cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
