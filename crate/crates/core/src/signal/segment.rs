use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::edfio::EegRecord;
use crate::protocol::{Interval, IntervalMap, Label};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub window_s: f64,
    /// Stride for pre-ictal windows in the training phase.
    pub train_preictal_stride_s: f64,
    /// Stride everywhere else.
    pub stride_s: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            window_s: 5.0,
            train_preictal_stride_s: 2.5,
            stride_s: 5.0,
        }
    }
}

/// One window of filtered signal, stored row-major as `channels x samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSegment {
    pub subject_id: Arc<str>,
    pub t_start: f64,
    pub label: Label,
    pub n_channels: usize,
    pub data: Vec<f32>,
}

impl LabeledSegment {
    pub fn n_samples(&self) -> usize {
        self.data.len() / self.n_channels.max(1)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.n_samples();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Window start times (with labels) for the labeled intervals. Windows never
/// cross an interval boundary and start at each interval's beginning.
pub fn plan_windows(intervals: &[Interval], phase: Phase, cfg: &SegmentConfig) -> Vec<(f64, Label)> {
    let mut out = Vec::new();
    for iv in intervals {
        if iv.label == Label::Excluded {
            continue;
        }
        let stride = match (phase, iv.label) {
            (Phase::Train, Label::Preictal) => cfg.train_preictal_stride_s,
            _ => cfg.stride_s,
        };
        let mut k = 0usize;
        loop {
            let t = iv.t0 + k as f64 * stride;
            if t + cfg.window_s > iv.t1 + 1e-9 {
                break;
            }
            out.push((t, iv.label));
            k += 1;
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Cuts planned windows out of a stream of contiguous sample chunks.
///
/// Only the samples still needed by upcoming windows are buffered, so long
/// excluded stretches cost nothing.
#[derive(Debug)]
pub struct Segmenter {
    subject_id: Arc<str>,
    plan: Vec<(usize, f64, Label)>,
    next: usize,
    window: usize,
    n_channels: usize,
    buf: Vec<Vec<f32>>,
    buf_start: usize,
    pushed: usize,
}

impl Segmenter {
    /// `span_start` is the absolute time of the first sample that will be pushed.
    pub fn new(
        subject_id: Arc<str>,
        plan: &[(f64, Label)],
        span_start: f64,
        fs: f64,
        window_s: f64,
        n_channels: usize,
    ) -> Self {
        let plan = plan
            .iter()
            .filter(|(t, _)| *t >= span_start - 1e-9)
            .map(|&(t, l)| (((t - span_start) * fs).round() as usize, t, l))
            .collect();
        Self {
            subject_id,
            plan,
            next: 0,
            window: (window_s * fs).round() as usize,
            n_channels,
            buf: vec![Vec::new(); n_channels],
            buf_start: 0,
            pushed: 0,
        }
    }

    pub fn is_done(&self) -> bool {
        self.next >= self.plan.len()
    }

    /// Sample index (relative to the span) where the next window starts.
    pub fn next_start(&self) -> Option<usize> {
        self.plan.get(self.next).map(|p| p.0)
    }

    pub fn samples_pushed(&self) -> usize {
        self.pushed
    }

    pub fn push(&mut self, chunk: &[Vec<f64>]) -> Vec<LabeledSegment> {
        assert_eq!(chunk.len(), self.n_channels, "channel count changed mid-stream");
        let n = chunk.first().map_or(0, Vec::len);
        let chunk_start = self.pushed;
        self.pushed += n;
        // Skip the part of the chunk no window needs.
        let keep_from = self.next_start().unwrap_or(self.pushed).max(chunk_start);
        if self.buf_start + self.buf[0].len() < keep_from {
            for b in &mut self.buf {
                b.clear();
            }
            self.buf_start = keep_from;
        }
        let offset = keep_from.min(self.pushed) - chunk_start;
        for (b, row) in self.buf.iter_mut().zip(chunk) {
            b.extend(row[offset..].iter().map(|&v| v as f32));
        }

        let mut out = Vec::new();
        while let Some(&(s, t, label)) = self.plan.get(self.next) {
            if s + self.window > self.pushed {
                break;
            }
            let rel = s - self.buf_start;
            let mut data = Vec::with_capacity(self.window * self.n_channels);
            for b in &self.buf {
                data.extend_from_slice(&b[rel..rel + self.window]);
            }
            out.push(LabeledSegment {
                subject_id: self.subject_id.clone(),
                t_start: t,
                label,
                n_channels: self.n_channels,
                data,
            });
            self.next += 1;
        }
        let drop_to = self.next_start().unwrap_or(self.pushed).min(self.pushed);
        if drop_to > self.buf_start {
            let d = (drop_to - self.buf_start).min(self.buf[0].len());
            for b in &mut self.buf {
                b.drain(..d);
            }
            self.buf_start += d;
        }
        out
    }
}

/// Segments one contiguous record against the interval map.
///
/// Records shorter than one window yield nothing.
pub fn segment(
    record: &EegRecord,
    map: &IntervalMap,
    phase: Phase,
    subject_id: &str,
    cfg: &SegmentConfig,
) -> Vec<LabeledSegment> {
    if record.duration() < cfg.window_s || record.data.is_empty() {
        return Vec::new();
    }
    let intervals = map.labeled_within(record.start_time, record.end_time());
    let plan = plan_windows(&intervals, phase, cfg);
    let mut seg = Segmenter::new(
        Arc::from(subject_id),
        &plan,
        record.start_time,
        record.fs,
        cfg.window_s,
        record.data.len(),
    );
    seg.push(&record.data)
}
