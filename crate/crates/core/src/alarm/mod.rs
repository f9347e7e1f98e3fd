//! Alarm post-processing: top-K fusion, refractory merging, threshold search
//! and segment-level evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Interval, Label};

#[derive(Debug, Error)]
pub enum AlarmError {
    #[error("top-k needs 1 <= k <= window, got k={k}, window={window}")]
    TopK { k: usize, window: usize },
    #[error("trace must have strictly increasing times and p in [0, 1] (index {0})")]
    Trace(usize),
    #[error("validation data must contain both pre-ictal and inter-ictal segments")]
    SingleLabel,
}

/// `(t_start, p)` pairs, one per evaluated segment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityTrace {
    points: Vec<(f64, f64)>,
}

impl ProbabilityTrace {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, AlarmError> {
        for (i, &(t, p)) in points.iter().enumerate() {
            let ordered = i == 0 || points[i - 1].0 < t;
            if !ordered || !(0.0..=1.0).contains(&p) || !t.is_finite() {
                return Err(AlarmError::Trace(i));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// CSV with a `t_start,p` header; `p` printed with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_start,p\n");
        for (t, p) in &self.points {
            let _ = writeln!(s, "{t:.3},{p:.17e}");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmConfig {
    /// Fusion window W, in segments.
    pub window: usize,
    /// Number of largest probabilities averaged, K.
    pub k: usize,
    pub refractory_s: f64,
    pub fpr_cap: f64,
    /// Nominal spacing of trace points; a larger jump starts a new fusion run.
    pub cadence_s: f64,
}

impl Default for AlarmConfig {
    fn default() -> Self {
        Self {
            window: 12,
            k: 8,
            refractory_s: 1800.0,
            fpr_cap: 0.5,
            cadence_s: 5.0,
        }
    }
}

/// Mean of the `k` largest values.
pub fn topk_score(window: &[f64], k: usize) -> Result<f64, AlarmError> {
    if k == 0 || k > window.len() {
        return Err(AlarmError::TopK { k, window: window.len() });
    }
    let mut v = window.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

/// Fused score `S_t` at every trace point preceded by `window - 1` points of the
/// same contiguous run. Gaps longer than 1.5 cadences restart the window.
pub fn fused_scores(trace: &ProbabilityTrace, cfg: &AlarmConfig) -> Result<Vec<(f64, f64)>, AlarmError> {
    if cfg.k == 0 || cfg.k > cfg.window {
        return Err(AlarmError::TopK { k: cfg.k, window: cfg.window });
    }
    let pts = trace.points();
    let mut out = Vec::new();
    let mut run_start = 0;
    for i in 0..pts.len() {
        if i > 0 && pts[i].0 - pts[i - 1].0 > 1.5 * cfg.cadence_s {
            run_start = i;
        }
        if i + 1 - run_start >= cfg.window {
            let w: Vec<f64> = pts[i + 1 - cfg.window..=i].iter().map(|p| p.1).collect();
            out.push((pts[i].0, topk_score(&w, cfg.k)?));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmEvent {
    pub t: f64,
    pub score: f64,
    pub threshold: f64,
}

/// Emits an alarm at the first score above `tau`, then ignores crossings for
/// `refractory_s` seconds.
pub fn raise_alarms(scores: &[(f64, f64)], tau: f64, refractory_s: f64) -> Vec<AlarmEvent> {
    let mut out: Vec<AlarmEvent> = Vec::new();
    for &(t, s) in scores {
        if s <= tau {
            continue;
        }
        // Small tolerance so a crossing exactly one refractory period later is not lost to rounding.
        if out.last().is_none_or(|e| t - e.t >= refractory_s - 1e-6) {
            out.push(AlarmEvent { t, score: s, threshold: tau });
        }
    }
    out
}

/// `{0.10, 0.15, ..., 0.95}`.
pub fn threshold_grid() -> Vec<f64> {
    (0..18).map(|i| (10 + 5 * i) as f64 / 100.0).collect()
}

fn label_of(intervals: &[Interval], t: f64) -> Label {
    let idx = intervals.partition_point(|i| i.t1 <= t);
    match intervals.get(idx) {
        Some(i) if i.contains(t) => i.label,
        _ => Label::Excluded,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when there are no pre-ictal segments.
    pub sensitivity: Option<f64>,
    pub fpr_per_hour: f64,
    pub tp_seg: usize,
    pub fn_seg: usize,
    pub n_fp_events: usize,
    pub n_alarms: usize,
    pub interictal_hours: f64,
    pub threshold: f64,
    /// Threshold search could not meet the FPR cap on validation.
    pub cap_unmet: bool,
}

impl EvalReport {
    pub fn sensitivity_text(&self) -> String {
        match self.sensitivity {
            Some(s) => format!("{:.2}", 100.0 * s),
            None => "n/a".into(),
        }
    }
}

/// Segment sensitivity from raw `p > tau` on pre-ictal points; FPR/h from
/// refractory-merged alarms triggered in inter-ictal time, over the inter-ictal
/// hours of `intervals`.
pub fn compute_report(
    trace: &ProbabilityTrace,
    intervals: &[Interval],
    tau: f64,
    cfg: &AlarmConfig,
) -> Result<EvalReport, AlarmError> {
    let mut sorted = intervals.to_vec();
    sorted.sort_by(|a, b| a.t0.total_cmp(&b.t0));
    let (mut tp, mut fn_) = (0, 0);
    for &(t, p) in trace.points() {
        if label_of(&sorted, t) == Label::Preictal {
            if p > tau {
                tp += 1;
            } else {
                fn_ += 1;
            }
        }
    }
    let alarms = raise_alarms(&fused_scores(trace, cfg)?, tau, cfg.refractory_s);
    let n_fp = alarms.iter().filter(|a| label_of(&sorted, a.t) == Label::Interictal).count();
    let hours = sorted
        .iter()
        .filter(|i| i.label == Label::Interictal)
        .map(Interval::duration)
        .sum::<f64>()
        / 3600.0;
    Ok(EvalReport {
        sensitivity: (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
        fpr_per_hour: if hours > 0.0 { n_fp as f64 / hours } else { 0.0 },
        tp_seg: tp,
        fn_seg: fn_,
        n_fp_events: n_fp,
        n_alarms: alarms.len(),
        interictal_hours: hours,
        threshold: tau,
        cap_unmet: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub tau: f64,
    pub sensitivity: f64,
    pub fpr_per_hour: f64,
    pub cap_unmet: bool,
    /// `(tau, sensitivity, fpr)` for every grid point.
    pub table: Vec<(f64, f64, f64)>,
}

/// Grid search on validation data.
///
/// Among thresholds with FPR/h within the cap, the highest sensitivity wins,
/// then the lower FPR/h, then the lower threshold. If none meets the cap the
/// highest-sensitivity threshold is returned with `cap_unmet` set.
pub fn select_threshold(
    trace: &ProbabilityTrace,
    intervals: &[Interval],
    cfg: &AlarmConfig,
) -> Result<ThresholdChoice, AlarmError> {
    let mut sorted = intervals.to_vec();
    sorted.sort_by(|a, b| a.t0.total_cmp(&b.t0));
    let labels: Vec<Label> = trace.points().iter().map(|p| label_of(&sorted, p.0)).collect();
    if !labels.contains(&Label::Preictal) || !labels.contains(&Label::Interictal) {
        return Err(AlarmError::SingleLabel);
    }
    let mut table = Vec::with_capacity(18);
    for tau in threshold_grid() {
        let r = compute_report(trace, &sorted, tau, cfg)?;
        table.push((tau, r.sensitivity.unwrap_or(0.0), r.fpr_per_hour));
    }
    // (sens desc, fpr asc, tau asc); the grid is ascending so the first best wins ties.
    let better = |a: &(f64, f64, f64), b: &(f64, f64, f64)| a.1 > b.1 || (a.1 == b.1 && a.2 < b.2);
    let pick = |cands: &mut dyn Iterator<Item = &(f64, f64, f64)>| {
        cands.fold(None::<(f64, f64, f64)>, |best, c| match best {
            Some(b) if !better(c, &b) => Some(b),
            _ => Some(*c),
        })
    };
    let within = pick(&mut table.iter().filter(|c| c.2 <= cfg.fpr_cap));
    let (chosen, cap_unmet) = match within {
        Some(c) => (c, false),
        None => (pick(&mut table.iter()).expect("grid is non-empty"), true),
    };
    Ok(ThresholdChoice {
        tau: chosen.0,
        sensitivity: chosen.1,
        fpr_per_hour: chosen.2,
        cap_unmet,
        table,
    })
}

/// Fixed-column summary: subject, sensitivity in percent, FPR/h to 4 decimals.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let mut s = format!("{:<12} {:>10} {:>10} {:>8}\n", "subject", "sens(%)", "FPR/h", "tau");
    for (id, r) in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>10.4} {:>8.2}{}",
            id,
            r.sensitivity_text(),
            r.fpr_per_hour,
            r.threshold,
            if r.cap_unmet { "  (cap unmet)" } else { "" }
        );
    }
    let sens: Vec<f64> = rows.iter().filter_map(|(_, r)| r.sensitivity).collect();
    if rows.len() > 1 {
        let mean_sens = if sens.is_empty() {
            "n/a".to_string()
        } else {
            format!("{:.2}", 100.0 * sens.iter().sum::<f64>() / sens.len() as f64)
        };
        let mean_fpr = rows.iter().map(|(_, r)| r.fpr_per_hour).sum::<f64>() / rows.len() as f64;
        let _ = writeln!(s, "{:<12} {:>10} {:>10.4}", "average", mean_sens, mean_fpr);
    }
    s
}
