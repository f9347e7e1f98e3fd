use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::data::{discover, ingest, prepare, IngestSummary, Prepared, ProtocolAudit};
use super::{io_err, read_text, write_file, PipelineError, RunDir, RunManifest, SubjectDir};
use crate::alarm::{compute_report, format_table, select_threshold, AlarmConfig, EvalReport, ThresholdChoice};
use crate::backbone::AblationMode;
use crate::numkernel::{load_checkpoint, save_checkpoint};
use crate::protocol::{Interval, ProtocolConfig, SplitPlan};
use crate::signal::{read_segment_cache, SegmentConfig};
use crate::tokenizer::ChannelStats;
use crate::trainer::{fit, history_csv, Model, RunConfig, SegmentSet};

/// Segments scored per streaming call during evaluation.
const PREDICT_BLOCK: usize = 64;

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

/// Labels the subject's timeline and writes `audit.json`, `audit.txt` and
/// `split.json`.
pub fn run_protocol(
    data_dir: &Path,
    subject: &str,
    out_dir: &Path,
    cfg: &ProtocolConfig,
) -> Result<(Prepared, ProtocolAudit), PipelineError> {
    let prepared = prepare(discover(data_dir, subject)?, cfg)?;
    let audit = ProtocolAudit::new(&prepared);
    let sd = SubjectDir::new(out_dir, subject);
    write_file(&sd.root.join("audit.json"), json(&audit))?;
    write_file(&sd.root.join("audit.txt"), audit.to_text())?;
    write_file(&sd.split(), prepared.split.to_json() + "\n")?;
    Ok((prepared, audit))
}

/// Protocol audit plus the three segment caches.
pub fn run_ingest(
    data_dir: &Path,
    subject: &str,
    out_dir: &Path,
    proto: &ProtocolConfig,
    seg: &SegmentConfig,
) -> Result<(Prepared, IngestSummary), PipelineError> {
    let (prepared, _) = run_protocol(data_dir, subject, out_dir, proto)?;
    let sd = SubjectDir::new(out_dir, subject);
    let summary = ingest(&prepared, &sd, seg)?;
    info!(
        "{subject}: train {:?}, val {:?}, test {:?} (pre-ictal, inter-ictal) segments",
        summary.train, summary.val, summary.test
    );
    write_file(&sd.root.join("ingest.json"), json(&summary))?;
    let mut inputs: Vec<PathBuf> = vec![prepared.input.annotation_path.clone()];
    inputs.extend(prepared.input.files.iter().map(|f| f.path.clone()));
    let input_base = prepared.input.annotation_path.parent().unwrap_or(data_dir).to_path_buf();
    let outputs: Vec<PathBuf> = ["audit.json", "audit.txt", "split.json", "ingest.json"]
        .iter()
        .map(|n| sd.root.join(n))
        .chain(["train", "val", "test"].iter().map(|p| sd.cache(p)))
        .collect();
    RunManifest::new("ingest", subject, 0, "")
        .inputs(&inputs, &input_base)?
        .outputs(&outputs, &sd.root)?
        .write(&sd.root.join("manifest.ingest.json"))?;
    Ok((prepared, summary))
}

pub fn load_split(sd: &SubjectDir) -> Result<SplitPlan, PipelineError> {
    let path = sd.split();
    serde_json::from_str(&read_text(&path)?).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn load_set(path: &Path, intervals: &[Interval]) -> Result<SegmentSet, PipelineError> {
    let f = File::open(path).map_err(io_err(path))?;
    let segments = read_segment_cache(BufReader::new(f))?;
    Ok(SegmentSet::new(segments, intervals))
}

fn check_shape(set: &SegmentSet, cfg: &RunConfig) -> Result<(), PipelineError> {
    let tok = &cfg.model.tokenizer;
    match set.segments.first() {
        Some(s) if s.n_channels != tok.n_channels || s.n_samples() != tok.n_samples => Err(PipelineError::Data(format!(
            "segments are {}x{}, model expects {}x{}",
            s.n_channels,
            s.n_samples(),
            tok.n_channels,
            tok.n_samples
        ))),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub subject: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_loss: f64,
    /// Training sequences `(pre-ictal, inter-ictal)`.
    pub class_counts: (usize, usize),
    pub train_segments: usize,
    pub val_segments: usize,
    /// Latest segment start read while training; always before `test_start`.
    pub max_accessed_t: f64,
    pub test_start: f64,
}

/// Fits a model on the train and validation caches. The test cache is never
/// opened; the access log of both sets is checked against the test boundary.
pub fn train(sd: &SubjectDir, run: &RunDir, cfg: &RunConfig) -> Result<TrainSummary, PipelineError> {
    let model_cfg = cfg.resolved_model()?;
    let split = load_split(sd)?;
    let train_set = load_set(&sd.cache("train"), &split.train)?;
    let val_set = load_set(&sd.cache("val"), &split.val)?;
    check_shape(&train_set, cfg)?;
    let subject = sd.root.file_name().map_or(String::new(), |s| s.to_string_lossy().into_owned());
    let stats = ChannelStats::fit(train_set.segments.iter(), model_cfg.tokenizer.n_channels);
    let model = Model::init(model_cfg, stats, cfg.train.seed);
    let out = fit(model, &train_set, &val_set, &cfg.train)?;

    let max_seen = train_set
        .access_log()
        .into_iter()
        .chain(val_set.access_log())
        .fold(f64::NEG_INFINITY, f64::max);
    if max_seen >= split.test_start {
        return Err(PipelineError::Data(format!(
            "training read a segment at {max_seen}, at or after the test boundary {}",
            split.test_start
        )));
    }
    let summary = TrainSummary {
        subject: subject.clone(),
        best_epoch: out.best_epoch,
        epochs_run: out.history.len(),
        best_val_loss: out
            .history
            .iter()
            .find(|r| r.epoch == out.best_epoch)
            .map_or(f64::NAN, |r| r.val_loss),
        class_counts: out.class_counts,
        train_segments: train_set.len(),
        val_segments: val_set.len(),
        max_accessed_t: max_seen,
        test_start: split.test_start,
    };
    std::fs::create_dir_all(&run.root).map_err(io_err(&run.root))?;
    save_checkpoint(&run.checkpoint(), &out.model.to_store())?;
    write_file(&run.file("history.csv"), history_csv(&out.history))?;
    write_file(&run.config(), cfg.to_kv())?;
    write_file(&run.file("train.json"), json(&summary))?;
    let inputs = [sd.split(), sd.cache("train"), sd.cache("val")];
    let outputs = [run.checkpoint(), run.file("history.csv"), run.config(), run.file("train.json")];
    RunManifest::new("train", &subject, cfg.train.seed, &cfg.to_kv())
        .inputs(&inputs, &sd.root)?
        .outputs(&outputs, &run.root)?
        .write(&run.file("manifest.train.json"))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub subject: String,
    pub threshold: ThresholdChoice,
    pub report: EvalReport,
}

/// Threshold search on the validation trace, then the test report at that
/// threshold. `alarm` replaces the alarm settings stored with the model.
pub fn evaluate(sd: &SubjectDir, run: &RunDir, alarm: Option<&AlarmConfig>) -> Result<EvalOutcome, PipelineError> {
    let mut cfg = RunConfig::from_kv(&read_text(&run.config())?)?;
    if let Some(a) = alarm {
        cfg.alarm = a.clone();
    }
    cfg.validate()?;
    let model = Model::from_store(cfg.resolved_model()?, load_checkpoint(&run.checkpoint())?)?;
    let split = load_split(sd)?;
    let val_set = load_set(&sd.cache("val"), &split.val)?;
    let test_set = load_set(&sd.cache("test"), &split.test)?;
    check_shape(&test_set, &cfg)?;
    let val_trace = model.predict(&val_set, PREDICT_BLOCK)?;
    let test_trace = model.predict(&test_set, PREDICT_BLOCK)?;
    let choice = select_threshold(&val_trace, &split.val, &cfg.alarm)?;
    let mut report = compute_report(&test_trace, &split.test, choice.tau, &cfg.alarm)?;
    report.cap_unmet = choice.cap_unmet;
    let subject = sd.root.file_name().map_or(String::new(), |s| s.to_string_lossy().into_owned());
    let outcome = EvalOutcome {
        subject: subject.clone(),
        threshold: choice,
        report,
    };
    write_file(&run.file("trace_val.csv"), val_trace.to_csv())?;
    write_file(&run.file("trace_test.csv"), test_trace.to_csv())?;
    write_file(&run.file("report.json"), json(&outcome))?;
    write_file(
        &run.file("report.txt"),
        format_table(&[(subject.clone(), outcome.report.clone())]),
    )?;
    let inputs = [sd.split(), sd.cache("val"), sd.cache("test"), run.checkpoint(), run.config()];
    let outputs = ["trace_val.csv", "trace_test.csv", "report.json", "report.txt"].map(|n| run.file(n));
    let mut manifest_inputs = RunManifest::new("eval", &subject, cfg.train.seed, &cfg.to_kv()).inputs(&inputs[..3], &sd.root)?;
    manifest_inputs = manifest_inputs.inputs(&inputs[3..], &run.root)?;
    manifest_inputs
        .outputs(&outputs, &run.root)?
        .write(&run.file("manifest.eval.json"))?;
    Ok(outcome)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub mode: AblationMode,
    pub context: usize,
}

impl Variant {
    pub fn name(&self) -> String {
        format!("{}_ctx{}", self.mode, self.context)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mode: AblationMode,
    pub context: usize,
    pub report: EvalReport,
}

/// Trains and evaluates one model per variant under `<subject>/ablate/`.
pub fn ablate(sd: &SubjectDir, base: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationRow>, PipelineError> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut cfg = base.clone();
        cfg.train.context_segments = v.context;
        cfg.model.backbone.mode = v.mode;
        let run = sd.run(&format!("ablate/{}", v.name()));
        info!("ablation {}: training", v.name());
        train(sd, &run, &cfg)?;
        let out = evaluate(sd, &run, None)?;
        rows.push(AblationRow {
            variant: v.name(),
            mode: v.mode,
            context: v.context,
            report: out.report,
        });
    }
    let dir = sd.root.join("ablate");
    write_file(&dir.join("summary.json"), json(&rows))?;
    let table: Vec<(String, EvalReport)> = rows.iter().map(|r| (r.variant.clone(), r.report.clone())).collect();
    write_file(&dir.join("summary.txt"), format_table(&table))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub subject: String,
    pub report: EvalReport,
}

/// Collects `<subject>/<run>/report.json` for every subject under `out_dir`
/// and writes `report.json` and `report.txt` there.
pub fn render_report(out_dir: &Path, run: &str) -> Result<(Vec<ReportRow>, String), PipelineError> {
    let mut subjects: Vec<PathBuf> = std::fs::read_dir(out_dir)
        .map_err(io_err(out_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(run).join("report.json").is_file())
        .collect();
    subjects.sort();
    if subjects.is_empty() {
        return Err(PipelineError::Data(format!("no evaluated subjects under {}", out_dir.display())));
    }
    let mut rows = Vec::new();
    for s in subjects {
        let path = s.join(run).join("report.json");
        let out: EvalOutcome =
            serde_json::from_str(&read_text(&path)?).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        rows.push(ReportRow {
            subject: out.subject,
            report: out.report,
        });
    }
    let table: Vec<(String, EvalReport)> = rows.iter().map(|r| (r.subject.clone(), r.report.clone())).collect();
    let text = format_table(&table);
    write_file(&out_dir.join("report.json"), json(&rows))?;
    write_file(&out_dir.join("report.txt"), &text)?;
    Ok((rows, text))
}
