use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;
use teeg::alarm::{format_table, EvalReport};
use teeg::backbone::AblationMode;
use teeg::pipeline::{
    ablate, evaluate, render_report, run_ingest, run_protocol, train, PipelineError, RunManifest, SubjectDir, Variant,
};
use teeg::protocol::ProtocolConfig;
use teeg::signal::SegmentConfig;
use teeg::synthgen::{artifact_profile, generate_subject, SubjectProfile};
use teeg::trainer::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "teeg", version, about = "Seizure forecasting from scalp EEG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Options,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic subject (EDF files and annotations) under the data directory.
    Synth {
        /// Scales the profile's artifact rate.
        #[arg(long, value_name = "F", default_value_t = 1.0)]
        artifact_multiplier: f64,
        /// JSON file with subject profile fields; unset fields keep their defaults.
        #[arg(long, value_name = "PATH")]
        profile: Option<PathBuf>,
    },
    /// Protocol audit plus segment caches.
    Ingest,
    /// Label the timeline and print the cluster and split audit.
    Protocol,
    /// Fit a model on the training and validation caches.
    Train,
    /// Pick a threshold on validation, then report on the test cluster.
    Eval,
    /// Train and evaluate every ablation mode and context length.
    Ablate,
    /// Collect evaluated subjects into one summary table.
    Report,
}

#[derive(Args, Debug)]
struct Options {
    /// key = value run configuration; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "ID")]
    subject: Option<String>,
    #[arg(long, global = true, value_name = "PATH", default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, global = true, value_name = "PATH", default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Context length in segments.
    #[arg(long, global = true, value_parser = ["12", "60"])]
    context: Option<String>,
    #[arg(long, global = true, value_parser = ["full", "attention_only", "memory_only"])]
    ablation: Option<String>,
    #[arg(long, global = true, value_name = "F")]
    fpr_cap: Option<f64>,
    #[arg(long, global = true, value_name = "K")]
    topk: Option<usize>,
    #[arg(long, global = true, value_name = "W")]
    fusion_window: Option<usize>,
    /// Model directory name under each subject.
    #[arg(long, global = true, value_name = "NAME", default_value = "model")]
    run: String,
    /// Print JSON instead of a table.
    #[arg(long, global = true)]
    json: bool,
}

impl Options {
    fn subject(&self, command: &str) -> Result<&str, PipelineError> {
        self.subject
            .as_deref()
            .ok_or_else(|| PipelineError::Usage(format!("{command} needs --subject")))
    }

    /// Defaults, then the config file, then flags.
    fn run_config(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| PipelineError::Usage(format!("config {}: {e}", path.display())))?;
            cfg.apply_kv(&text)?;
        }
        self.apply_flags(&mut cfg)?;
        Ok(cfg)
    }

    fn apply_flags(&self, cfg: &mut RunConfig) -> Result<(), PipelineError> {
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("context_segments", self.context.clone()),
            ("ablation_mode", self.ablation.clone()),
            ("fpr_cap", self.fpr_cap.map(|v| v.to_string())),
            ("topk", self.topk.map(|v| v.to_string())),
            ("fusion_window", self.fusion_window.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(())
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn synth(opts: &Options, multiplier: f64, profile_path: Option<&Path>) -> Result<(), PipelineError> {
    let mut profile = match profile_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::Usage(format!("profile {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| PipelineError::Usage(format!("profile {}: {e}", p.display())))?
        }
        None => SubjectProfile::default(),
    };
    if let Some(s) = &opts.subject {
        profile.subject_id = s.clone();
    }
    if let Some(seed) = opts.seed {
        profile.seed = seed;
    }
    let profile = artifact_profile(&profile, multiplier).map_err(|e| PipelineError::Usage(e.to_string()))?;
    let subject = generate_subject(&profile).map_err(|e| PipelineError::Usage(e.to_string()))?;
    let dir = opts.data_dir.join(&profile.subject_id);
    info!("writing {} files to {}", subject.files.len(), dir.display());
    let written = subject.write_to(&dir).map_err(|e| PipelineError::Data(e.to_string()))?;
    let profile_json = serde_json::to_string_pretty(&profile).expect("profile serializes");
    RunManifest::new("synth", &profile.subject_id, profile.seed, &profile_json)
        .outputs(&written, &dir)?
        .write(&dir.join("manifest.synth.json"))?;
    let hours: f64 = subject.recorded_spans().iter().map(|(a, b)| b - a).sum::<f64>() / 3600.0;
    let summary = json!({
        "subject": profile.subject_id,
        "dir": dir,
        "files": subject.files.len(),
        "recorded_h": hours,
        "seizures": subject.truth.seizures.len(),
        "artifacts": subject.truth.artifacts.len(),
    });
    if opts.json {
        print_json(&summary);
    } else {
        println!(
            "{}: {} files, {hours:.2} h, {} seizures, {} artifact bursts -> {}",
            profile.subject_id,
            subject.files.len(),
            subject.truth.seizures.len(),
            subject.truth.artifacts.len(),
            dir.display()
        );
    }
    Ok(())
}

fn protocol(opts: &Options) -> Result<(), PipelineError> {
    let subject = opts.subject("protocol")?;
    let (prepared, audit) = run_protocol(&opts.data_dir, subject, &opts.out_dir, &ProtocolConfig::default())?;
    let sd = SubjectDir::new(&opts.out_dir, subject);
    let mut inputs = vec![prepared.input.annotation_path.clone()];
    inputs.extend(prepared.input.files.iter().map(|f| f.path.clone()));
    let base = prepared.input.annotation_path.parent().unwrap_or(&opts.data_dir).to_path_buf();
    let outputs = [sd.root.join("audit.json"), sd.root.join("audit.txt"), sd.split()];
    RunManifest::new("protocol", subject, 0, "")
        .inputs(&inputs, &base)?
        .outputs(&outputs, &sd.root)?
        .write(&sd.root.join("manifest.protocol.json"))?;
    if opts.json {
        print_json(&audit);
    } else {
        print!("{}", audit.to_text());
    }
    Ok(())
}

fn ingest(opts: &Options) -> Result<(), PipelineError> {
    let subject = opts.subject("ingest")?;
    let (_, summary) = run_ingest(
        &opts.data_dir,
        subject,
        &opts.out_dir,
        &ProtocolConfig::default(),
        &SegmentConfig::default(),
    )?;
    if opts.json {
        print_json(&summary);
    } else {
        println!("{:<6} {:>10} {:>12}", "split", "pre-ictal", "inter-ictal");
        for (name, (pre, inter)) in [("train", summary.train), ("val", summary.val), ("test", summary.test)] {
            println!("{name:<6} {pre:>10} {inter:>12}");
        }
    }
    Ok(())
}

fn train_cmd(opts: &Options) -> Result<(), PipelineError> {
    let subject = opts.subject("train")?;
    let cfg = opts.run_config()?;
    let sd = SubjectDir::new(&opts.out_dir, subject);
    let s = train(&sd, &sd.run(&opts.run), &cfg)?;
    if opts.json {
        print_json(&s);
    } else {
        println!(
            "{}: best epoch {} of {}, validation loss {:.4}, {} training sequences ({} pre-ictal, {} inter-ictal)",
            s.subject,
            s.best_epoch,
            s.epochs_run,
            s.best_val_loss,
            s.class_counts.0 + s.class_counts.1,
            s.class_counts.0,
            s.class_counts.1
        );
    }
    Ok(())
}

fn eval_cmd(opts: &Options) -> Result<(), PipelineError> {
    let subject = opts.subject("eval")?;
    let sd = SubjectDir::new(&opts.out_dir, subject);
    let run = sd.run(&opts.run);
    let stored = fs::read_to_string(run.config())
        .map_err(|e| PipelineError::Data(format!("{}: {e}; run train first", run.config().display())))?;
    let mut cfg = RunConfig::from_kv(&stored)?;
    opts.apply_flags(&mut cfg)?;
    let out = evaluate(&sd, &run, Some(&cfg.alarm))?;
    if opts.json {
        print_json(&out);
    } else {
        print!("{}", format_table(&[(out.subject.clone(), out.report.clone())]));
        if out.threshold.cap_unmet {
            println!("warning: no threshold met the FPR cap on validation");
        }
    }
    Ok(())
}

fn ablate_cmd(opts: &Options) -> Result<(), PipelineError> {
    let subject = opts.subject("ablate")?;
    let base = opts.run_config()?;
    let contexts: Vec<usize> = match &opts.context {
        Some(c) => vec![c.parse().expect("validated by clap")],
        None => vec![12, 60],
    };
    let modes: Vec<AblationMode> = match &opts.ablation {
        Some(m) => vec![m.parse().expect("validated by clap")],
        None => vec![AblationMode::Full, AblationMode::AttentionOnly, AblationMode::MemoryOnly],
    };
    let variants: Vec<Variant> = contexts
        .iter()
        .flat_map(|&context| modes.iter().map(move |&mode| Variant { mode, context }))
        .collect();
    let rows = ablate(&SubjectDir::new(&opts.out_dir, subject), &base, &variants)?;
    if opts.json {
        print_json(&rows);
    } else {
        let table: Vec<(String, EvalReport)> = rows.iter().map(|r| (r.variant.clone(), r.report.clone())).collect();
        print!("{}", format_table(&table));
    }
    Ok(())
}

fn report_cmd(opts: &Options) -> Result<(), PipelineError> {
    let (rows, text) = render_report(&opts.out_dir, &opts.run)?;
    if opts.json {
        print_json(&rows);
    } else {
        print!("{text}");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let opts = &cli.opts;
    match &cli.command {
        Command::Synth {
            artifact_multiplier,
            profile,
        } => synth(opts, *artifact_multiplier, profile.as_deref()),
        Command::Ingest => ingest(opts),
        Command::Protocol => protocol(opts),
        Command::Train => train_cmd(opts),
        Command::Eval => eval_cmd(opts),
        Command::Ablate => ablate_cmd(opts),
        Command::Report => report_cmd(opts),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TEEG_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
