//! Deterministic synthetic EEG subjects: pink background noise with an alpha
//! rhythm, a planted band-power ramp before every seizure cluster, and
//! label-independent artifact bursts.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edfio::{write_edf, AnnotationSet, EdfError, EegRecord, FileAnnotation, SeizureSpan, CANONICAL_MONTAGE};
use crate::protocol::{ProtocolConfig, SeizureEvent};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("clusters {0} and {1} overlap or crowd each other's safety margins")]
    OverlappingClusters(usize, usize),
    #[error(transparent)]
    Edf(#[from] EdfError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unset fields take their defaults when read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubjectProfile {
    pub subject_id: String,
    pub seed: u64,
    pub fs: f64,
    /// Length of each recording file.
    pub file_s: f64,
    /// Absolute start of the first file, seconds since 1970.
    pub start_time: f64,
    pub n_clusters: usize,
    /// Inter-ictal hours recorded before the first cluster's safety margin.
    pub lead_in_h: f64,
    /// Inter-ictal hours between consecutive clusters' safety margins.
    pub interictal_h: Vec<f64>,
    /// Inter-ictal hours after the last cluster's safety margin.
    pub tail_h: f64,
    pub seizures_per_cluster: usize,
    pub seizure_s: f64,
    /// Gap between seizures of one cluster, offset to onset.
    pub intra_cluster_gap_s: f64,
    pub noise_rms_uv: f64,
    /// Background spectrum exponent alpha in `1/f^alpha`.
    pub noise_exponent: f64,
    pub alpha_hz: f64,
    pub alpha_uv: f64,
    pub drift_band_hz: (f64, f64),
    /// Band-power ratio reached at the end of each pre-ictal window; values
    /// at or below 1 plant nothing.
    pub drift_gain: f64,
    pub artifact_rate_h: f64,
    pub artifact_uv: f64,
    pub artifact_duration_s: (f64, f64),
}

impl Default for SubjectProfile {
    fn default() -> Self {
        Self {
            subject_id: "synth01".into(),
            seed: 1,
            fs: 256.0,
            file_s: 3600.0,
            start_time: 1.6e9,
            n_clusters: 3,
            lead_in_h: 1.0,
            interictal_h: vec![1.0, 1.5],
            tail_h: 0.5,
            seizures_per_cluster: 1,
            seizure_s: 60.0,
            intra_cluster_gap_s: 900.0,
            noise_rms_uv: 10.0,
            noise_exponent: 1.0,
            alpha_hz: 10.0,
            alpha_uv: 20.0,
            drift_band_hz: (15.0, 25.0),
            drift_gain: 3.0,
            artifact_rate_h: 2.0,
            artifact_uv: 150.0,
            artifact_duration_s: (0.5, 2.0),
        }
    }
}

/// Copy of `base` with the artifact rate scaled by `multiplier`.
pub fn artifact_profile(base: &SubjectProfile, multiplier: f64) -> Result<SubjectProfile, SynthError> {
    if !(multiplier >= 0.0 && multiplier.is_finite()) {
        return Err(SynthError::Profile(format!("artifact multiplier {multiplier} must be >= 0")));
    }
    Ok(SubjectProfile {
        artifact_rate_h: base.artifact_rate_h * multiplier,
        ..base.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactBurst {
    /// Absolute start time.
    pub t: f64,
    pub duration_s: f64,
    #[serde(skip)]
    gains: [f32; 18],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seizures: Vec<SeizureEvent>,
    /// Absolute `[start, end)` of each planted ramp.
    pub drift_intervals: Vec<(f64, f64)>,
    pub artifacts: Vec<ArtifactBurst>,
    /// Share of background noise power inside the drift band.
    pub band_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthFile {
    pub name: String,
    /// Seconds from the start of the recording.
    pub offset_s: f64,
    pub n_samples: usize,
}

/// Layout, annotations and ground truth of a subject. Signals are produced
/// file by file on demand.
#[derive(Clone, Debug)]
pub struct SyntheticSubject {
    pub profile: SubjectProfile,
    pub files: Vec<SynthFile>,
    pub annotations: AnnotationSet,
    pub truth: GroundTruth,
    alpha_phase: Vec<f64>,
}

const STREAM_ALPHA: u64 = 1;
const STREAM_ARTIFACTS: u64 = 2;

/// Independent ChaCha stream `id` of the subject seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn check(profile: &SubjectProfile, cfg: &ProtocolConfig) -> Result<(), SynthError> {
    let p = profile;
    let bad = |m: String| Err(SynthError::Profile(m));
    if p.n_clusters < 2 {
        return bad(format!("need at least 2 clusters, got {}", p.n_clusters));
    }
    if p.interictal_h.len() != p.n_clusters - 1 {
        return bad(format!(
            "{} inter-ictal gaps given for {} clusters",
            p.interictal_h.len(),
            p.n_clusters
        ));
    }
    if let Some(i) = p.interictal_h.iter().position(|&h| !(h >= 0.0)) {
        return Err(SynthError::OverlappingClusters(i, i + 1));
    }
    if !(p.fs > 200.0 && p.fs.fract() == 0.0) {
        return bad(format!("sampling rate {} must be a whole number above 200 Hz", p.fs));
    }
    if !(p.file_s >= 10.0 && p.file_s.fract() == 0.0) {
        return bad(format!("file length {} must be whole seconds >= 10", p.file_s));
    }
    if p.seizures_per_cluster == 0 || !(p.seizure_s > 0.0) {
        return bad("clusters need at least one seizure of positive length".into());
    }
    if p.seizures_per_cluster > 1 && !(p.intra_cluster_gap_s >= 0.0 && p.intra_cluster_gap_s < cfg.cluster_gap_s) {
        return bad(format!(
            "intra-cluster gap {} s would split the cluster (limit {} s)",
            p.intra_cluster_gap_s, cfg.cluster_gap_s
        ));
    }
    let (lo, hi) = p.drift_band_hz;
    if !(lo > 0.0 && lo < hi && hi < p.fs / 2.0) {
        return bad(format!("drift band {lo}-{hi} Hz"));
    }
    let (dmin, dmax) = p.artifact_duration_s;
    if !(p.artifact_rate_h >= 0.0 && dmin > 0.0 && dmin <= dmax) {
        return bad("artifact rate must be >= 0 and durations positive".into());
    }
    if !(p.lead_in_h >= 0.0 && p.tail_h >= 0.0 && p.noise_rms_uv >= 0.0 && p.drift_gain >= 0.0) {
        return bad("lead-in, tail, noise level and drift gain must be non-negative".into());
    }
    Ok(())
}

/// Spectral weights `|H(f)|^2 = 1/f^alpha` for bins `1..=n/2`, flat below 0.5 Hz.
fn pink_weight(f: f64, alpha: f64) -> f64 {
    1.0 / f.max(0.5).powf(alpha)
}

fn band_fraction(p: &SubjectProfile) -> f64 {
    let n = (p.file_s * p.fs) as usize;
    let df = p.fs / n as f64;
    let (mut band, mut total) = (0.0, 0.0);
    for k in 1..=n / 2 {
        let f = k as f64 * df;
        let w = pink_weight(f, p.noise_exponent);
        total += w;
        if f >= p.drift_band_hz.0 && f <= p.drift_band_hz.1 {
            band += w;
        }
    }
    band / total
}

pub fn generate_subject(profile: &SubjectProfile) -> Result<SyntheticSubject, SynthError> {
    generate_subject_with(profile, &ProtocolConfig::default())
}

/// Builds the timeline: seizure clusters separated by recorded inter-ictal
/// stretches, each flanked by a full safety margin.
pub fn generate_subject_with(profile: &SubjectProfile, cfg: &ProtocolConfig) -> Result<SyntheticSubject, SynthError> {
    check(profile, cfg)?;
    let p = profile;
    let mut seizures = Vec::new();
    let mut drift = Vec::new();
    let mut t = p.lead_in_h * 3600.0;
    for i in 0..p.n_clusters {
        let lead = (t + cfg.safety_margin_s).round();
        let mut end = lead;
        for j in 0..p.seizures_per_cluster {
            let onset = lead + j as f64 * (p.seizure_s + p.intra_cluster_gap_s);
            end = onset + p.seizure_s;
            seizures.push(SeizureEvent { onset, offset: end });
        }
        drift.push((lead - cfg.preictal_start_s, lead - cfg.sph_s));
        let gap = if i + 1 < p.n_clusters { p.interictal_h[i] } else { p.tail_h };
        t = end + cfg.safety_margin_s + gap * 3600.0;
    }
    let total_s = t.ceil();
    let n_total = (total_s * p.fs) as usize;
    let per_file = (p.file_s * p.fs) as usize;

    let mut files = Vec::new();
    let mut start = 0;
    while start < n_total {
        let n = per_file.min(n_total - start);
        files.push(SynthFile {
            name: format!("{}_{:02}.edf", p.subject_id, files.len() + 1),
            offset_s: start as f64 / p.fs,
            n_samples: n,
        });
        start += n;
    }

    let mut annotations = AnnotationSet::default();
    for f in &files {
        let end = f.offset_s + f.n_samples as f64 / p.fs;
        let spans = seizures
            .iter()
            .filter(|s| s.onset >= f.offset_s && s.onset < end)
            .map(|s| SeizureSpan {
                onset_s: s.onset - f.offset_s,
                offset_s: s.offset - f.offset_s,
            })
            .collect();
        annotations.files.push(FileAnnotation {
            file: f.name.clone(),
            start_time: Some(p.start_time + f.offset_s),
            seizures: spans,
        });
    }

    let mut rng = stream(p.seed, STREAM_ARTIFACTS);
    let mut artifacts = Vec::new();
    if p.artifact_rate_h > 0.0 {
        let rate = p.artifact_rate_h / 3600.0;
        let mut at = 0.0;
        loop {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            at += -u.ln() / rate;
            let dur = rng.gen_range(p.artifact_duration_s.0..=p.artifact_duration_s.1);
            if at + dur > total_s {
                break;
            }
            let mut gains = [0f32; 18];
            gains.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
            artifacts.push(ArtifactBurst {
                t: p.start_time + at,
                duration_s: dur,
                gains,
            });
        }
    }

    let mut arng = stream(p.seed, STREAM_ALPHA);
    let alpha_phase = (0..18).map(|_| arng.gen_range(0.0..2.0 * PI)).collect();
    let shift = |(a, b): (f64, f64)| (a + p.start_time, b + p.start_time);
    Ok(SyntheticSubject {
        profile: p.clone(),
        files,
        annotations,
        truth: GroundTruth {
            seizures: seizures
                .iter()
                .map(|s| SeizureEvent {
                    onset: s.onset + p.start_time,
                    offset: s.offset + p.start_time,
                })
                .collect(),
            drift_intervals: drift.into_iter().map(shift).collect(),
            artifacts,
            band_fraction: band_fraction(p),
        },
        alpha_phase,
    })
}

/// Real signal of length `n` with power spectrum `weight(f)`, scaled to unit RMS.
fn shaped_noise(n: usize, fs: f64, rng: &mut ChaCha8Rng, weight: impl Fn(f64) -> f64, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    for k in 1..=n / 2 {
        let w = weight(k as f64 * fs / n as f64).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = if 2 * k == n { 0.0 } else { rng.sample(StandardNormal) };
        spectrum[k] = Complex64::new(re * w, im * w);
        if 2 * k != n {
            spectrum[n - k] = spectrum[k].conj();
        }
    }
    planner.plan_fft_inverse(n).process(&mut spectrum);
    let rms = (spectrum.iter().map(|c| c.re * c.re).sum::<f64>() / n as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 0.0 };
    spectrum.iter().map(|c| c.re * scale).collect()
}

impl SyntheticSubject {
    pub fn recorded_spans(&self) -> Vec<(f64, f64)> {
        let p = &self.profile;
        self.files
            .iter()
            .map(|f| {
                let t0 = p.start_time + f.offset_s;
                (t0, t0 + f.n_samples as f64 / p.fs)
            })
            .collect()
    }

    /// Signal of file `index` in microvolts, canonical montage order.
    pub fn record(&self, index: usize) -> Result<EegRecord, SynthError> {
        let p = &self.profile;
        let f = self.files.get(index).ok_or_else(|| SynthError::Profile(format!("no file {index}")))?;
        let n = f.n_samples;
        let t0 = f.offset_s;
        let abs0 = p.start_time + t0;
        let abs1 = abs0 + n as f64 / p.fs;
        let mut planner = FftPlanner::new();
        let band_sd = (self.truth.band_fraction).sqrt() * p.noise_rms_uv;
        let ramps: Vec<(f64, f64)> = self
            .truth
            .drift_intervals
            .iter()
            .copied()
            .filter(|&(a, b)| p.drift_gain > 1.0 && a < abs1 && b > abs0)
            .collect();
        let bursts: Vec<(usize, &ArtifactBurst)> = self
            .truth
            .artifacts
            .iter()
            .enumerate()
            .filter(|(_, b)| b.t < abs1 && b.t + b.duration_s > abs0)
            .collect();

        let mut data = Vec::with_capacity(18);
        for c in 0..18 {
            let id = ((index as u64) << 8) | c as u64;
            let mut rng = stream(p.seed, 1 << 32 | id);
            let mut x = shaped_noise(n, p.fs, &mut rng, |fr| pink_weight(fr, p.noise_exponent), &mut planner);
            let w = 2.0 * PI * p.alpha_hz;
            for (i, v) in x.iter_mut().enumerate() {
                let t = t0 + i as f64 / p.fs;
                *v = *v * p.noise_rms_uv + p.alpha_uv * (w * t + self.alpha_phase[c]).sin();
            }
            if !ramps.is_empty() {
                let mut rng = stream(p.seed, 2 << 32 | id);
                let (lo, hi) = p.drift_band_hz;
                let band = shaped_noise(n, p.fs, &mut rng, |fr| if fr >= lo && fr <= hi { 1.0 } else { 0.0 }, &mut planner);
                for &(a, b) in &ramps {
                    let i0 = (((a - abs0) * p.fs).ceil().max(0.0)) as usize;
                    let i1 = (((b - abs0) * p.fs).ceil() as usize).min(n);
                    for i in i0..i1 {
                        let frac = (abs0 + i as f64 / p.fs - a) / (b - a);
                        x[i] += ((p.drift_gain - 1.0) * frac).sqrt() * band_sd * band[i];
                    }
                }
            }
            for &(k, burst) in &bursts {
                let mut rng = stream(p.seed, 3 << 32 | (k as u64) << 8 | c as u64);
                let len = (burst.duration_s * p.fs).round() as usize;
                let start = ((burst.t - abs0) * p.fs).round() as i64;
                let amp = p.artifact_uv * burst.gains[c] as f64;
                for j in 0..len {
                    let z: f64 = rng.sample(StandardNormal);
                    let i = start + j as i64;
                    if i >= 0 && (i as usize) < n {
                        let hann = 0.5 - 0.5 * (2.0 * PI * j as f64 / len as f64).cos();
                        x[i as usize] += amp * hann * z;
                    }
                }
            }
            data.push(x);
        }
        let channels = CANONICAL_MONTAGE.iter().map(|s| s.to_string()).collect();
        Ok(EegRecord::new(channels, p.fs, data, abs0)?)
    }

    /// Writes every file as EDF plus `<id>_annotations.json` and
    /// `<id>_truth.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
        fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for (i, f) in self.files.iter().enumerate() {
            let rec = self.record(i)?;
            let path = dir.join(&f.name);
            fs::write(&path, write_edf(&rec, &self.profile.subject_id)?)?;
            out.push(path);
        }
        let ann = dir.join(format!("{}_annotations.json", self.profile.subject_id));
        fs::write(&ann, self.annotations.to_json())?;
        out.push(ann);
        let truth = dir.join(format!("{}_truth.json", self.profile.subject_id));
        fs::write(&truth, serde_json::to_string_pretty(&self.truth).expect("truth serializes"))?;
        out.push(truth);
        Ok(out)
    }
}
