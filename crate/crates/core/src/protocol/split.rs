use serde::{Deserialize, Serialize};

use super::{Interval, Label, ProtocolConfig, ProtocolError, Timeline};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetadata {
    /// Montage labels absent from at least one file.
    pub missing_channels: Vec<String>,
    /// Every file has a start time.
    pub timeline_complete: bool,
    /// Clusters that survived margin checks.
    pub n_clusters: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "lowercase")]
pub enum Eligibility {
    Include,
    Exclude(String),
}

pub fn check_eligibility(meta: &SubjectMetadata) -> Eligibility {
    if !meta.missing_channels.is_empty() {
        return Eligibility::Exclude(format!("montage incomplete (missing {})", meta.missing_channels.join(", ")));
    }
    if !meta.timeline_complete {
        return Eligibility::Exclude("timeline metadata".into());
    }
    if meta.n_clusters < 2 {
        return Eligibility::Exclude("insufficient clusters".into());
    }
    Eligibility::Include
}

/// Train / validation / test partition of the labeled timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Everything labeled at or after this instant is test data.
    pub test_start: f64,
    pub train: Vec<Interval>,
    pub val: Vec<Interval>,
    pub test: Vec<Interval>,
    /// Indices into the timeline's clusters.
    pub train_clusters: Vec<usize>,
    pub test_cluster: usize,
    pub val_fraction: f64,
}

impl SplitPlan {
    pub fn duration(part: &[Interval], label: Label) -> f64 {
        part.iter().filter(|i| i.label == label).map(Interval::duration).sum()
    }

    /// Latest instant covered by train or validation data.
    pub fn fit_end(&self) -> f64 {
        self.train.iter().chain(&self.val).map(|i| i.t1).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split plan serializes")
    }
}

/// Moves the trailing `fraction` of `label` time from `train` into a new list.
fn carve_tail(train: &mut Vec<Interval>, label: Label, fraction: f64) -> Vec<Interval> {
    let total: f64 = train.iter().filter(|i| i.label == label).map(Interval::duration).sum();
    let mut need = total * fraction;
    let mut val = Vec::new();
    let mut keep = Vec::with_capacity(train.len());
    for iv in train.drain(..).rev() {
        if iv.label != label || need <= 0.0 {
            keep.push(iv);
            continue;
        }
        if iv.duration() <= need {
            need -= iv.duration();
            val.push(iv);
        } else {
            let cut = iv.t1 - need;
            need = 0.0;
            val.push(Interval { t0: cut, ..iv });
            keep.push(Interval { t1: cut, ..iv });
        }
    }
    keep.reverse();
    val.reverse();
    *train = keep;
    val
}

/// Holds out the final usable cluster.
///
/// The test split starts where the second-to-last usable cluster's safety
/// margin ends. Validation is the chronologically last `val_fraction` of the
/// training time of each label, so both classes appear in it whenever they
/// appear in training.
pub fn chronological_split(timeline: &Timeline, cfg: &ProtocolConfig) -> Result<SplitPlan, ProtocolError> {
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(ProtocolError::ValFraction(cfg.val_fraction));
    }
    let kept: Vec<usize> = (0..timeline.clusters.len()).filter(|&i| !timeline.clusters[i].dropped).collect();
    if kept.len() < 2 {
        return Err(ProtocolError::TooFewClusters(kept.len()));
    }
    let n = kept.len();
    let test_start = timeline.clusters[kept[n - 2]].cluster.end + cfg.safety_margin_s;

    let mut train = timeline.map.labeled_within(f64::NEG_INFINITY, test_start);
    let test = timeline.map.labeled_within(test_start, f64::INFINITY);
    let mut val = carve_tail(&mut train, Label::Preictal, cfg.val_fraction);
    val.extend(carve_tail(&mut train, Label::Interictal, cfg.val_fraction));
    val.sort_by(|a, b| a.t0.total_cmp(&b.t0));

    Ok(SplitPlan {
        test_start,
        train,
        val,
        test,
        train_clusters: kept[..n - 1].to_vec(),
        test_cluster: kept[n - 1],
        val_fraction: cfg.val_fraction,
    })
}
