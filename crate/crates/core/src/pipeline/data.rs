use std::fs::{self, File};
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{PipelineError, SubjectDir};
use crate::edfio::{
    normalize_label, parse_edf, parse_edf_header, parse_summary, select_montage, AnnotationSet, EdfHeader,
    CANONICAL_MONTAGE,
};
use crate::protocol::{
    build_interval_map, check_eligibility, chronological_split, cluster_seizures, Eligibility, Interval, Label,
    ProtocolConfig, SeizureEvent, SplitPlan, SubjectMetadata, Timeline,
};
use crate::signal::{design_filters, plan_windows, Phase, SegmentCacheWriter, SegmentConfig, Segmenter};

/// One EDF file of a subject, placed on the annotation timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingFile {
    pub name: String,
    pub path: PathBuf,
    pub start_time: Option<f64>,
    pub duration_s: f64,
    pub fs: f64,
    pub missing_channels: Vec<String>,
}

impl RecordingFile {
    pub fn end_time(&self) -> Option<f64> {
        self.start_time.map(|t| t + self.duration_s)
    }
}

#[derive(Clone, Debug)]
pub struct SubjectInput {
    pub subject_id: String,
    pub annotation_path: PathBuf,
    pub annotations: AnnotationSet,
    pub files: Vec<RecordingFile>,
}

fn read_header(path: &Path) -> Result<EdfHeader, PipelineError> {
    let ctx = |e: std::io::Error| PipelineError::Data(format!("{}: {e}", path.display()));
    let mut f = File::open(path).map_err(ctx)?;
    let mut head = vec![0u8; 256];
    f.read_exact(&mut head).map_err(ctx)?;
    let ns: usize = std::str::from_utf8(&head[252..256])
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| PipelineError::Data(format!("{}: unreadable signal count", path.display())))?;
    let mut rest = vec![0u8; 256 * ns];
    f.read_exact(&mut rest).map_err(ctx)?;
    head.extend(rest);
    parse_edf_header(&head).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

/// Finds a subject's annotations (`<id>_annotations.json` or `<id>-summary.txt`)
/// and EDF headers in `data_dir/<id>/` or directly in `data_dir`.
pub fn discover(data_dir: &Path, subject: &str) -> Result<SubjectInput, PipelineError> {
    let nested = data_dir.join(subject);
    let dir = if nested.is_dir() { nested } else { data_dir.to_path_buf() };
    let json = dir.join(format!("{subject}_annotations.json"));
    let summary = dir.join(format!("{subject}-summary.txt"));
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())));
    let (annotation_path, annotations) = if json.is_file() {
        let a = AnnotationSet::from_json(&read(&json)?)?;
        (json, a)
    } else if summary.is_file() {
        let a = parse_summary(&read(&summary)?)?;
        (summary, a)
    } else {
        return Err(PipelineError::Data(format!(
            "no annotations for {subject} in {} (expected {subject}_annotations.json or {subject}-summary.txt)",
            dir.display()
        )));
    };
    let mut files = Vec::with_capacity(annotations.files.len());
    for a in &annotations.files {
        let path = dir.join(&a.file);
        let h = read_header(&path)?;
        let present: Vec<String> = h.signals.iter().map(|s| normalize_label(&s.label)).collect();
        let missing = CANONICAL_MONTAGE
            .iter()
            .filter(|m| !present.contains(&normalize_label(m)))
            .map(|m| m.to_string())
            .collect();
        let spr = h.signals.first().map_or(0, |s| s.samples_per_record);
        files.push(RecordingFile {
            name: a.file.clone(),
            path,
            start_time: a.start_time,
            duration_s: h.duration_s(),
            fs: spr as f64 / h.record_duration_s,
            missing_channels: missing,
        });
    }
    if files.is_empty() {
        return Err(PipelineError::Data(format!("annotations for {subject} list no files")));
    }
    Ok(SubjectInput {
        subject_id: subject.to_string(),
        annotation_path,
        annotations,
        files,
    })
}

/// Labeled timeline, eligibility decision and split of one subject.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: SubjectInput,
    pub metadata: SubjectMetadata,
    pub timeline: Timeline,
    pub split: SplitPlan,
}

fn ineligible(subject: &str, reason: String) -> PipelineError {
    PipelineError::Ineligible {
        subject: subject.to_string(),
        reason,
    }
}

pub fn prepare(input: SubjectInput, cfg: &ProtocolConfig) -> Result<Prepared, PipelineError> {
    let id = input.subject_id.clone();
    let mut missing: Vec<String> = Vec::new();
    for f in &input.files {
        for m in &f.missing_channels {
            if !missing.contains(m) {
                missing.push(m.clone());
            }
        }
    }
    let mut metadata = SubjectMetadata {
        missing_channels: missing,
        timeline_complete: input.annotations.has_full_timeline(),
        n_clusters: 0,
    };
    // Montage and timing problems make the timeline meaningless, so they are
    // decided before clustering.
    if let Eligibility::Exclude(reason) = check_eligibility(&SubjectMetadata {
        n_clusters: 2,
        ..metadata.clone()
    }) {
        return Err(ineligible(&id, reason));
    }
    let events: Vec<SeizureEvent> = input
        .annotations
        .seizures()?
        .iter()
        .map(|s| SeizureEvent {
            onset: s.abs_onset,
            offset: s.abs_offset,
        })
        .collect();
    let clusters = cluster_seizures(&events, cfg)?;
    let recorded: Vec<(f64, f64)> = input
        .files
        .iter()
        .filter_map(|f| Some((f.start_time?, f.end_time()?)))
        .collect();
    let timeline = build_interval_map(&clusters, &recorded, cfg)?;
    metadata.n_clusters = timeline.kept().count();
    if let Eligibility::Exclude(reason) = check_eligibility(&metadata) {
        return Err(ineligible(&id, reason));
    }
    let split = chronological_split(&timeline, cfg)?;
    Ok(Prepared {
        input,
        metadata,
        timeline,
        split,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAudit {
    pub index: usize,
    pub lead_onset: f64,
    pub end: f64,
    pub n_seizures: usize,
    pub preictal_s: f64,
    pub margin_deficient: bool,
    /// `train`, `test` or `dropped`.
    pub role: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartAudit {
    pub preictal_s: f64,
    pub interictal_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolAudit {
    pub subject: String,
    pub n_files: usize,
    pub recorded_s: f64,
    pub clusters: Vec<ClusterAudit>,
    pub test_start: f64,
    pub train: PartAudit,
    pub val: PartAudit,
    pub test: PartAudit,
}

impl ProtocolAudit {
    pub fn new(p: &Prepared) -> Self {
        let clusters = p
            .timeline
            .clusters
            .iter()
            .enumerate()
            .map(|(i, c)| ClusterAudit {
                index: i + 1,
                lead_onset: c.cluster.lead_onset,
                end: c.cluster.end,
                n_seizures: c.cluster.members.len(),
                preictal_s: c.preictal_s,
                margin_deficient: c.margin_deficient,
                role: if c.dropped {
                    "dropped"
                } else if i == p.split.test_cluster {
                    "test"
                } else {
                    "train"
                }
                .into(),
            })
            .collect();
        let part = |ivs: &[Interval]| PartAudit {
            preictal_s: SplitPlan::duration(ivs, Label::Preictal),
            interictal_s: SplitPlan::duration(ivs, Label::Interictal),
        };
        Self {
            subject: p.input.subject_id.clone(),
            n_files: p.input.files.len(),
            recorded_s: p.input.files.iter().map(|f| f.duration_s).sum(),
            clusters,
            test_start: p.split.test_start,
            train: part(&p.split.train),
            val: part(&p.split.val),
            test: part(&p.split.test),
        }
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = format!(
            "subject {}: {} files, {:.2} h recorded\n{:<8} {:>14} {:>9} {:>12} {:>8}\n",
            self.subject,
            self.n_files,
            self.recorded_s / 3600.0,
            "cluster",
            "lead_onset",
            "seizures",
            "preictal_s",
            "role"
        );
        for c in &self.clusters {
            let _ = writeln!(
                s,
                "{:<8} {:>14.1} {:>9} {:>12.1} {:>8}{}",
                c.index,
                c.lead_onset,
                c.n_seizures,
                c.preictal_s,
                c.role,
                if c.margin_deficient { "  (margin deficient)" } else { "" }
            );
        }
        let _ = writeln!(s, "test starts at {:.1}", self.test_start);
        for (name, p) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let _ = writeln!(
                s,
                "{name:<6} pre-ictal {:>8.1} s  inter-ictal {:>9.1} s",
                p.preictal_s, p.interictal_s
            );
        }
        s
    }
}

/// Number of segments written per split and label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

/// Contiguous runs of files (by index), sorted by start time.
fn contiguous_spans(files: &[RecordingFile]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..files.len()).collect();
    order.sort_by(|&a, &b| files[a].start_time.unwrap_or(0.0).total_cmp(&files[b].start_time.unwrap_or(0.0)));
    let mut spans: Vec<Vec<usize>> = Vec::new();
    for i in order {
        let f = &files[i];
        let joins = spans.last().and_then(|s| s.last()).is_some_and(|&j| {
            let prev_end = files[j].end_time().unwrap_or(f64::NAN);
            (f.start_time.unwrap_or(f64::NAN) - prev_end).abs() < 0.5 / f.fs
        });
        if joins {
            spans.last_mut().unwrap().push(i);
        } else {
            spans.push(vec![i]);
        }
    }
    spans
}

/// Filters every recorded span as one continuous stream and writes the
/// train, validation and test segment caches.
///
/// Filter state carries across files that abut in time and restarts at every
/// recording gap.
pub fn ingest(p: &Prepared, dir: &SubjectDir, seg: &SegmentConfig) -> Result<IngestSummary, PipelineError> {
    let fs = p.input.files[0].fs;
    if let Some(f) = p.input.files.iter().find(|f| f.fs != fs) {
        return Err(PipelineError::Data(format!("{} is sampled at {} Hz, expected {fs} Hz", f.name, f.fs)));
    }
    let bank = design_filters(fs)?;
    let window = (seg.window_s * fs).round() as usize;
    let parts: [(&[Interval], Phase, PathBuf); 3] = [
        (&p.split.train, Phase::Train, dir.cache("train")),
        (&p.split.val, Phase::Eval, dir.cache("val")),
        (&p.split.test, Phase::Eval, dir.cache("test")),
    ];
    let plans: Vec<Vec<(f64, Label)>> = parts.iter().map(|(iv, ph, _)| plan_windows(iv, *ph, seg)).collect();
    let mut writers = parts
        .iter()
        .map(|(_, _, path)| {
            let f = File::create(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
            Ok(SegmentCacheWriter::new(BufWriter::new(f), CANONICAL_MONTAGE.len(), window)?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let mut counts = [(0usize, 0usize); 3];
    let id: Arc<str> = Arc::from(p.input.subject_id.as_str());

    for span in contiguous_spans(&p.input.files) {
        let first = &p.input.files[span[0]];
        let last = &p.input.files[*span.last().unwrap()];
        let (t0, t1) = (first.start_time.unwrap(), last.end_time().unwrap());
        let mut segmenters: Vec<Segmenter> = plans
            .iter()
            .map(|plan| {
                let inside: Vec<(f64, Label)> =
                    plan.iter().copied().filter(|&(t, _)| t >= t0 && t + seg.window_s <= t1 + 1e-9).collect();
                Segmenter::new(id.clone(), &inside, t0, fs, seg.window_s, CANONICAL_MONTAGE.len())
            })
            .collect();
        if segmenters.iter().all(Segmenter::is_done) {
            info!("span {t0:.0}..{t1:.0}: no labeled windows, skipped");
            continue;
        }
        let mut state = bank.stream(CANONICAL_MONTAGE.len());
        for &fi in &span {
            let f = &p.input.files[fi];
            let bytes = fs::read(&f.path).map_err(|e| PipelineError::Data(format!("{}: {e}", f.path.display())))?;
            let (_, rec) = parse_edf(&bytes).map_err(|e| PipelineError::Data(format!("{}: {e}", f.name)))?;
            drop(bytes);
            let mut rec = select_montage(&rec, &CANONICAL_MONTAGE)?;
            state.process(&mut rec.data);
            for (k, s) in segmenters.iter_mut().enumerate() {
                for segment in s.push(&rec.data) {
                    match segment.label {
                        Label::Preictal => counts[k].0 += 1,
                        _ => counts[k].1 += 1,
                    }
                    writers[k].push(&segment)?;
                }
            }
            info!("ingested {} ({:.0} s)", f.name, f.duration_s);
        }
        if !segmenters.iter().all(Segmenter::is_done) {
            warn!("span {t0:.0}..{t1:.0} ended before all planned windows were filled");
        }
    }
    for w in writers {
        w.finish()?;
    }
    Ok(IngestSummary {
        train: counts[0],
        val: counts[1],
        test: counts[2],
    })
}
