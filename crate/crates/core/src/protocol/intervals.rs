use serde::{Deserialize, Serialize};

use super::{Label, ProtocolConfig, ProtocolError, SeizureCluster};

/// Half-open `[t0, t1)` in absolute seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub label: Label,
    pub t0: f64,
    pub t1: f64,
}

impl Interval {
    pub fn duration(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn contains(&self, t: f64) -> bool {
        self.t0 <= t && t < self.t1
    }
}

/// Ordered, non-overlapping labeled intervals covering the recorded timeline
/// from the first recorded second to the last. Unrecorded gaps are `Excluded`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntervalMap {
    intervals: Vec<Interval>,
}

impl IntervalMap {
    /// Builds a map from raw pieces, merging adjacent equal labels.
    pub fn from_intervals(mut pieces: Vec<Interval>) -> Self {
        pieces.retain(|i| i.t1 > i.t0);
        pieces.sort_by(|a, b| a.t0.total_cmp(&b.t0));
        let mut out: Vec<Interval> = Vec::with_capacity(pieces.len());
        for p in pieces {
            match out.last_mut() {
                Some(last) if last.label == p.label && last.t1 == p.t0 => last.t1 = p.t1,
                _ => out.push(p),
            }
        }
        Self { intervals: out }
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn start(&self) -> Option<f64> {
        self.intervals.first().map(|i| i.t0)
    }

    pub fn end(&self) -> Option<f64> {
        self.intervals.last().map(|i| i.t1)
    }

    /// Label at `t`; anything outside the map is `Excluded`.
    pub fn label_at(&self, t: f64) -> Label {
        let idx = self.intervals.partition_point(|i| i.t1 <= t);
        match self.intervals.get(idx) {
            Some(i) if i.contains(t) => i.label,
            _ => Label::Excluded,
        }
    }

    pub fn of(&self, label: Label) -> impl Iterator<Item = &Interval> {
        self.intervals.iter().filter(move |i| i.label == label)
    }

    pub fn duration(&self, label: Label) -> f64 {
        self.of(label).map(Interval::duration).sum()
    }

    /// Labeled (non-excluded) intervals restricted to `[t0, t1)`.
    pub fn labeled_within(&self, t0: f64, t1: f64) -> Vec<Interval> {
        self.intervals
            .iter()
            .filter(|i| i.label != Label::Excluded)
            .filter_map(|i| {
                let a = i.t0.max(t0);
                let b = i.t1.min(t1);
                (b > a).then_some(Interval { label: i.label, t0: a, t1: b })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("interval map serializes")
    }
}

/// Merges overlapping or touching `[start, end)` spans (within `tol` seconds).
pub fn merge_spans(spans: &[(f64, f64)], tol: f64) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = spans.iter().copied().filter(|s| s.1 > s.0).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 + tol => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn intersect(a0: f64, a1: f64, spans: &[(f64, f64)]) -> Vec<(f64, f64)> {
    spans
        .iter()
        .filter_map(|&(s0, s1)| {
            let lo = a0.max(s0);
            let hi = a1.min(s1);
            (hi > lo).then_some((lo, hi))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStatus {
    pub cluster: SeizureCluster,
    /// Recorded pre-ictal pieces after clipping.
    pub preictal: Vec<(f64, f64)>,
    pub preictal_s: f64,
    /// Pre-ictal window was shortened by missing data or an earlier cluster.
    pub margin_deficient: bool,
    /// Too little pre-ictal data survived clipping; the cluster gets no pre-ictal label.
    pub dropped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub map: IntervalMap,
    pub clusters: Vec<ClusterStatus>,
}

impl Timeline {
    pub fn kept(&self) -> impl Iterator<Item = &ClusterStatus> {
        self.clusters.iter().filter(|c| !c.dropped)
    }
}

/// Labels the recorded timeline.
///
/// Pre-ictal for a cluster is `[lead - preictal_start_s, lead - sph_s)`, clipped to
/// recorded data and to after every earlier cluster's post-ictal margin. Every
/// other second within `safety_margin_s` of a cluster (including the cluster
/// itself and the SPH) is excluded; the rest of the recorded time is inter-ictal.
pub fn build_interval_map(
    clusters: &[SeizureCluster],
    recorded: &[(f64, f64)],
    cfg: &ProtocolConfig,
) -> Result<Timeline, ProtocolError> {
    for k in 1..clusters.len() {
        if clusters[k].lead_onset <= clusters[k - 1].end {
            return Err(ProtocolError::OverlappingClusters(k));
        }
    }
    let spans = merge_spans(recorded, 1e-6);

    let mut statuses = Vec::with_capacity(clusters.len());
    let mut blocked_until = f64::NEG_INFINITY;
    for c in clusters {
        let raw0 = c.lead_onset - cfg.preictal_start_s;
        let raw1 = c.lead_onset - cfg.sph_s;
        let start = raw0.max(blocked_until);
        let pieces = if raw1 > start { intersect(start, raw1, &spans) } else { Vec::new() };
        let preictal_s: f64 = pieces.iter().map(|p| p.1 - p.0).sum();
        let full = raw1 - raw0;
        let dropped = preictal_s < cfg.min_preictal_s;
        statuses.push(ClusterStatus {
            cluster: c.clone(),
            preictal: if dropped { Vec::new() } else { pieces },
            preictal_s,
            margin_deficient: preictal_s < full,
            dropped,
        });
        blocked_until = blocked_until.max(c.end + cfg.safety_margin_s);
    }

    let Some(&(first, _)) = spans.first() else {
        return Ok(Timeline {
            map: IntervalMap::default(),
            clusters: statuses,
        });
    };
    let last = spans.last().unwrap().1;

    let zones: Vec<(f64, f64)> = clusters
        .iter()
        .map(|c| (c.lead_onset - cfg.safety_margin_s, c.end + cfg.safety_margin_s))
        .collect();
    let pre: Vec<(f64, f64)> = statuses.iter().flat_map(|s| s.preictal.iter().copied()).collect();

    let mut cuts: Vec<f64> = vec![first, last];
    for &(a, b) in spans.iter().chain(&zones).chain(&pre) {
        cuts.push(a);
        cuts.push(b);
    }
    cuts.retain(|&t| t >= first && t <= last);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let inside = |t: f64, set: &[(f64, f64)]| set.iter().any(|&(a, b)| a <= t && t < b);
    let pieces = cuts
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let label = if !inside(mid, &spans) {
                Label::Excluded
            } else if inside(mid, &pre) {
                Label::Preictal
            } else if inside(mid, &zones) {
                Label::Excluded
            } else {
                Label::Interictal
            };
            Interval { label, t0: w[0], t1: w[1] }
        })
        .collect();
    Ok(Timeline {
        map: IntervalMap::from_intervals(pieces),
        clusters: statuses,
    })
}
