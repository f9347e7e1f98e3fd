//! Seizure forecasting from scalp EEG: EDF ingestion, clinical labeling,
//! a convolutional tokenizer feeding a gated memory/attention backbone,
//! and alarm post-processing.

pub mod alarm;
pub mod backbone;
pub mod edfio;
pub mod numkernel;
pub mod pipeline;
pub mod protocol;
pub mod signal;
pub mod synthgen;
pub mod tokenizer;
pub mod trainer;
