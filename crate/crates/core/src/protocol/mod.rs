//! Seizure clustering, pre-ictal / inter-ictal labeling, eligibility and the
//! chronological hold-out split.

mod cluster;
mod intervals;
mod split;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cluster::{cluster_seizures, SeizureCluster, SeizureEvent};
pub use intervals::{build_interval_map, merge_spans, ClusterStatus, Interval, IntervalMap, Timeline};
pub use split::{check_eligibility, chronological_split, Eligibility, SplitPlan, SubjectMetadata};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("seizures must be sorted by onset with onset < offset (event {index}: {onset}..{offset})")]
    Unsorted { index: usize, onset: f64, offset: f64 },
    #[error("clusters overlap or are out of order at cluster {0}")]
    OverlappingClusters(usize),
    #[error("split needs at least two usable clusters, found {0}")]
    TooFewClusters(usize),
    #[error("val_fraction must lie in [0, 1), got {0}")]
    ValFraction(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Preictal,
    Interictal,
    Excluded,
}

impl Label {
    pub fn target(self) -> Option<f64> {
        match self {
            Label::Preictal => Some(1.0),
            Label::Interictal => Some(0.0),
            Label::Excluded => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Interictal => 0,
            Label::Preictal => 1,
            Label::Excluded => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Interictal),
            1 => Some(Label::Preictal),
            2 => Some(Label::Excluded),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapRule {
    /// Previous member's offset to the next onset.
    OffsetToOnset,
    /// Previous member's onset to the next onset.
    OnsetToOnset,
}

/// All durations in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub cluster_gap_s: f64,
    pub gap_rule: GapRule,
    /// Pre-ictal window starts this long before the lead onset.
    pub preictal_start_s: f64,
    /// Prediction horizon between the end of pre-ictal and the onset.
    pub sph_s: f64,
    /// Inter-ictal data must be at least this far from any cluster.
    pub safety_margin_s: f64,
    /// Clusters with less recorded pre-ictal time than this are dropped.
    pub min_preictal_s: f64,
    pub val_fraction: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            cluster_gap_s: 1800.0,
            gap_rule: GapRule::OffsetToOnset,
            preictal_start_s: 2100.0,
            sph_s: 300.0,
            safety_margin_s: 5400.0,
            min_preictal_s: 600.0,
            val_fraction: 0.2,
        }
    }
}
