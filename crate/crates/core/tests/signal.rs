use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex64, FftPlanner};
use teeg::edfio::EegRecord;
use teeg::protocol::{Interval, IntervalMap, Label};
use teeg::signal::{
    apply_filters, design_filters, plan_windows, read_segment_cache, segment, write_segment_cache, Phase,
    SegmentConfig, Segmenter, SignalError,
};

const FS: f64 = 256.0;

fn db(x: f64) -> f64 {
    20.0 * x.log10()
}

/// Magnitude response estimated from the FFT of a long impulse response.
fn fft_magnitude(h: &[f64], f: f64) -> f64 {
    let n = h.len();
    let mut buf: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let bin = (f * n as f64 / FS).round() as usize;
    buf[bin].norm()
}

fn sine(f: f64, amp: f64, secs: f64) -> Vec<f64> {
    (0..(secs * FS) as usize)
        .map(|i| amp * (2.0 * std::f64::consts::PI * f * i as f64 / FS).sin())
        .collect()
}

fn record(rows: Vec<Vec<f64>>, start: f64) -> EegRecord {
    let labels = (0..rows.len()).map(|i| format!("C{i}")).collect();
    EegRecord::new(labels, FS, rows, start).unwrap()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[test]
fn bank_meets_response_targets() {
    let bank = design_filters(FS).unwrap();
    assert!(bank.is_stable());
    // 2^18 samples gives ~0.001 Hz bins; the 0.5 Hz high-pass has settled by then.
    let h = bank.impulse_response(1 << 18);
    let at = |f: f64| db(fft_magnitude(&h, f));
    assert!(at(60.0) <= -20.0, "notch {:.1} dB", at(60.0));
    for f in (1..=95).map(f64::from) {
        if (f - 60.0).abs() < 3.0 {
            continue;
        }
        assert!(at(f).abs() <= 3.0, "{f} Hz: {:.2} dB", at(f));
        assert!((db(bank.magnitude(f)) - at(f)).abs() < 0.05, "analytic vs FFT at {f}");
    }
    assert!(at(0.1) <= -12.0, "0.1 Hz: {:.1} dB", at(0.1));
    assert!(at(120.0) <= -12.0, "120 Hz: {:.1} dB", at(120.0));
}

#[test]
fn low_rate_is_rejected() {
    assert!(matches!(design_filters(200.0), Err(SignalError::SamplingRate(_))));
    assert!(design_filters(128.0).is_err());
}

#[test]
fn zero_in_zero_out_and_empty() {
    let bank = design_filters(FS).unwrap();
    let out = apply_filters(&record(vec![vec![0.0; 2048]; 2], 0.0), &bank).unwrap();
    assert!(out.data.iter().flatten().all(|&v| v == 0.0));
    let empty = apply_filters(&record(vec![vec![]; 3], 0.0), &bank).unwrap();
    assert_eq!(empty.n_samples(), 0);
    assert_eq!(empty.channels.len(), 3);
}

#[test]
fn line_noise_is_suppressed() {
    let bank = design_filters(FS).unwrap();
    let x = sine(60.0, 100.0, 10.0);
    let y = apply_filters(&record(vec![x.clone()], 0.0), &bank).unwrap();
    // The Q=30 notch rings for ~0.16 s after a cold start; measure after the first second.
    let settled = rms(&y.data[0][256..]) / rms(&x[256..]);
    assert!(settled <= 0.1, "{settled}");
    let whole = rms(&y.data[0]) / rms(&x);
    assert!(whole < 0.12, "{whole}");
}

#[test]
fn dc_offset_settles() {
    let bank = design_filters(FS).unwrap();
    let y = apply_filters(&record(vec![vec![50.0; 20 * 256]], 0.0), &bank).unwrap();
    let worst = y.data[0][2 * 256..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1.0, "residual {worst} uV after 2 s");
}

#[test]
fn alpha_band_passes() {
    let bank = design_filters(FS).unwrap();
    let x = sine(10.0, 20.0, 10.0);
    let y = apply_filters(&record(vec![x.clone()], 0.0), &bank).unwrap();
    let ratio = rms(&y.data[0][512..]) / rms(&x[512..]);
    assert!(db(ratio).abs() <= 3.0, "{ratio}");
}

#[test]
fn rate_mismatch_is_error() {
    let bank = design_filters(FS).unwrap();
    let rec = EegRecord::new(vec!["A".into()], 512.0, vec![vec![0.0; 10]], 0.0).unwrap();
    assert!(matches!(apply_filters(&rec, &bank), Err(SignalError::RateMismatch { .. })));
}

fn one_interval(label: Label, len: f64) -> IntervalMap {
    IntervalMap::from_intervals(vec![Interval { label, t0: 1000.0, t1: 1000.0 + len }])
}

#[test]
fn preictal_window_counts() {
    let cfg = SegmentConfig::default();
    let rec = record(vec![vec![0.0; 1800 * 256]], 1000.0);
    let map = one_interval(Label::Preictal, 1800.0);
    let train = segment(&rec, &map, Phase::Train, "s", &cfg);
    let eval = segment(&rec, &map, Phase::Eval, "s", &cfg);
    // Oracle: floor((1800 - 5) / 2.5) + 1 and 1800 / 5.
    assert_eq!(train.len(), ((1800.0 - 5.0) / 2.5f64).floor() as usize + 1);
    assert_eq!(train.len(), 719);
    assert_eq!(eval.len(), 360);
    assert!(train.iter().all(|s| s.n_samples() == 1280));
    let inter = segment(&rec, &one_interval(Label::Interictal, 1800.0), Phase::Train, "s", &cfg);
    assert_eq!(inter.len(), 360);
    let excl = segment(&rec, &one_interval(Label::Excluded, 1800.0), Phase::Train, "s", &cfg);
    assert!(excl.is_empty());
    let short = record(vec![vec![0.0; 4 * 256]], 1000.0);
    assert!(segment(&short, &map, Phase::Eval, "s", &cfg).is_empty());
}

fn random_map(rng: &mut ChaCha8Rng, t0: f64, t1: f64) -> IntervalMap {
    let mut t = t0;
    let mut pieces = Vec::new();
    while t < t1 {
        let len = rng.gen_range(1.0..120.0f64).round();
        let label = [Label::Preictal, Label::Interictal, Label::Excluded][rng.gen_range(0..3)];
        pieces.push(Interval { label, t0: t, t1: (t + len).min(t1) });
        t += len;
    }
    IntervalMap::from_intervals(pieces)
}

#[test]
fn windows_respect_intervals_and_chunking() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = SegmentConfig::default();
    for _ in 0..20 {
        let secs = 600usize;
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..secs * 256).map(|_| rng.gen_range(-50.0..50.0)).collect())
            .collect();
        let rec = record(rows.clone(), 0.0);
        let map = random_map(&mut rng, 0.0, secs as f64);
        for phase in [Phase::Train, Phase::Eval] {
            let segs = segment(&rec, &map, phase, "s", &cfg);
            for s in &segs {
                let iv = map.intervals().iter().find(|i| i.contains(s.t_start)).unwrap();
                assert_eq!(iv.label, s.label);
                assert!(s.t_start + 5.0 <= iv.t1 + 1e-9);
                let i0 = (s.t_start * 256.0).round() as usize;
                assert_eq!(s.channel(1)[7], rows[1][i0 + 7] as f32);
            }
            if phase == Phase::Eval {
                for w in segs.windows(2) {
                    assert!(w[0].t_start + 5.0 <= w[1].t_start + 1e-9);
                }
            }
            // Same windows when the record arrives in uneven chunks.
            let plan = plan_windows(&map.labeled_within(0.0, secs as f64), phase, &cfg);
            let mut st = Segmenter::new("s".into(), &plan, 0.0, FS, 5.0, 2);
            let mut chunked = Vec::new();
            let mut at = 0;
            while at < secs * 256 {
                let n = rng.gen_range(1..40_000).min(secs * 256 - at);
                let chunk: Vec<Vec<f64>> = rows.iter().map(|r| r[at..at + n].to_vec()).collect();
                chunked.extend(st.push(&chunk));
                at += n;
            }
            assert_eq!(chunked, segs);
        }
    }
}

#[test]
fn cache_round_trip() {
    let rec = record(vec![sine(3.0, 10.0, 20.0), sine(7.0, 5.0, 20.0)], 1000.0);
    let segs = segment(&rec, &one_interval(Label::Interictal, 100.0), Phase::Eval, "chb99", &SegmentConfig::default());
    assert_eq!(segs.len(), 4);
    let mut buf = Vec::new();
    write_segment_cache(&mut buf, &segs).unwrap();
    assert_eq!(&buf[..5], b"TSEG1");
    assert_eq!(read_segment_cache(&buf[..]).unwrap(), segs);
    assert!(read_segment_cache(&b"XSEG1\0\0\0\0\0\0"[..]).is_err());
    assert!(read_segment_cache(&buf[..buf.len() - 3]).is_err());
}
