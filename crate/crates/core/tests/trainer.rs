use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use teeg::backbone::BackboneConfig;
use teeg::numkernel::{write_checkpoint, Feed, Graph, ParamStore, Tensor};
use teeg::protocol::{Interval, Label};
use teeg::signal::LabeledSegment;
use teeg::tokenizer::{ChannelStats, TokenizerConfig};
use teeg::trainer::{
    bce_loss, fit, history_csv, make_sequences, sequence_loss, EpochRecord, Model, ModelConfig, RunConfig, SegmentSet,
    TrainConfig, TrainError,
};

const N: usize = 128;

fn tiny() -> ModelConfig {
    let tokenizer = TokenizerConfig {
        n_channels: 2,
        n_samples: N,
        fs: 256.0,
        temporal_filters: 2,
        kernel: 8,
        spatial_filters: 2,
        pool_window: 32,
        pool_stride: 16,
        d_model: 4,
        segment_pooling: true,
    };
    let backbone = BackboneConfig {
        d_model: 4,
        n_heads: 1,
        d_k: 4,
        window: 4,
        ..BackboneConfig::default()
    };
    ModelConfig { tokenizer, backbone }
}

/// Pre-ictal segments carry a strong 40 Hz tone; inter-ictal are plain noise.
fn segment(rng: &mut ChaCha8Rng, t: f64, label: Label) -> LabeledSegment {
    let amp = if label == Label::Preictal { 3.0 } else { 0.0 };
    let mut data = Vec::with_capacity(2 * N);
    for c in 0..2 {
        for i in 0..N {
            let tone = amp * (2.0 * std::f64::consts::PI * 40.0 * i as f64 / 256.0 + c as f64).sin();
            let z: f64 = rng.sample(StandardNormal);
            data.push((tone + 0.5 * z) as f32);
        }
    }
    LabeledSegment {
        subject_id: Arc::from("toy"),
        t_start: t,
        label,
        n_channels: 2,
        data,
    }
}

/// Labeled intervals of 5 s segments: `(label, start, count)`.
fn make_set(seed: u64, parts: &[(Label, f64, usize)]) -> SegmentSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut segs = Vec::new();
    let mut ivs = Vec::new();
    for &(label, t0, n) in parts {
        for k in 0..n {
            segs.push(segment(&mut rng, t0 + 5.0 * k as f64, label));
        }
        ivs.push(Interval {
            label,
            t0,
            t1: t0 + 5.0 * n as f64,
        });
    }
    SegmentSet::new(segs, &ivs)
}

fn toy_sets() -> (SegmentSet, SegmentSet) {
    let train = make_set(
        1,
        &[
            (Label::Interictal, 0.0, 24),
            (Label::Preictal, 1000.0, 16),
            (Label::Interictal, 2000.0, 24),
            (Label::Preictal, 3000.0, 16),
        ],
    );
    let val = make_set(2, &[(Label::Interictal, 5000.0, 12), (Label::Preictal, 6000.0, 12)]);
    (train, val)
}

fn toy_train(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr,
        epochs,
        batch_size: 8,
        chunk: 4,
        context_segments: 3,
        seed: 7,
        patience: epochs,
        ..TrainConfig::default()
    }
}

fn toy_model(train: &SegmentSet) -> Model {
    let stats = ChannelStats::fit(train.segments.iter(), 2);
    Model::init(tiny(), stats, 3)
}

#[test]
fn bce_reference_values() {
    assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]) < 1e-6);
    assert!((bce_loss(&[0.5], &[1.0]) - 2f64.ln()).abs() < 1e-12);
    assert!((bce_loss(&[0.5, 0.5], &[0.0, 1.0]) - 2f64.ln()).abs() < 1e-12);
    assert!(bce_loss(&[0.0], &[1.0]).is_finite());

    let mut g = Graph::new();
    let p = g.param("p", &[1, 1]).unwrap();
    let loss = g.bce(p, &[1.0]).unwrap();
    let mut store = ParamStore::new();
    store.insert("p", Tensor::full(&[1, 1], 0.5));
    g.evaluate(&store, &Feed::new()).unwrap();
    assert!((g.value(loss).unwrap()[0] - 2f64.ln()).abs() < 1e-12);
    let grads = g.backward(loss, &Tensor::scalar(1.0)).unwrap();
    assert!((grads.get("p").unwrap().data()[0] + 2.0).abs() < 1e-12);
}

#[test]
fn sequence_counts() {
    let set = make_set(0, &[(Label::Interictal, 0.0, 360)]);
    assert_eq!(make_sequences(&set, 12, 12).len(), 30);
    assert_eq!(make_sequences(&set, 12, 1).len(), 349);
    let twelve = make_set(0, &[(Label::Interictal, 0.0, 12)]);
    assert_eq!(make_sequences(&twelve, 12, 12).len(), 1);
    let eleven = make_set(0, &[(Label::Interictal, 0.0, 11)]);
    assert!(make_sequences(&eleven, 12, 1).is_empty());
}

#[test]
fn sequences_never_cross_runs() {
    let set = make_set(0, &[(Label::Interictal, 0.0, 10), (Label::Preictal, 50.0, 10)]);
    assert_eq!(set.runs.len(), 2);
    let seqs = make_sequences(&set, 4, 1);
    assert_eq!(seqs.len(), 14);
    for s in seqs {
        let run = set.runs.iter().find(|r| r.contains(&s.start)).unwrap();
        assert!(s.start + s.len <= run.end);
        assert!(set.segments[s.start..s.start + s.len].iter().all(|x| x.label == s.label));
    }
}

#[test]
fn segments_outside_their_interval_are_dropped() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let segs = vec![
        segment(&mut rng, 0.0, Label::Interictal),
        segment(&mut rng, 5.0, Label::Preictal),
        segment(&mut rng, 100.0, Label::Interictal),
    ];
    let ivs = [Interval {
        label: Label::Interictal,
        t0: 0.0,
        t1: 50.0,
    }];
    let set = SegmentSet::new(segs, &ivs);
    assert_eq!(set.len(), 1);
    assert_eq!(set.segments[0].t_start, 0.0);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (train, val) = toy_sets();
    let model = toy_model(&train);
    let out = fit(model.clone(), &train, &val, &toy_train(0.0, 2)).unwrap();
    assert_eq!(out.model.params, model.params);
    assert_eq!(out.history.len(), 2);
}

#[test]
fn small_step_lowers_training_loss() {
    let (train, _) = toy_sets();
    let model = toy_model(&train);
    let seqs = make_sequences(&train, 3, 3);
    let before = sequence_loss(&model, &train, &seqs).unwrap();
    let cfg = TrainConfig {
        batch_size: 64,
        chunk: 64,
        ..toy_train(1e-5, 1)
    };
    let out = fit(model, &train, &train, &cfg).unwrap();
    let after = sequence_loss(&out.model, &train, &seqs).unwrap();
    assert_eq!(out.best_epoch, 1);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn separable_toy_is_learned() {
    let (train, val) = toy_sets();
    let out = fit(toy_model(&train), &train, &val, &toy_train(2e-2, 50)).unwrap();
    let best = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert!(best < 0.05, "best validation loss {best}");
    let trace = out.model.predict(&val, 5).unwrap();
    for (&(t, p), s) in trace.points().iter().zip(&val.segments) {
        assert_eq!(t, s.t_start);
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let (train, val) = toy_sets();
    let run = || {
        let out = fit(toy_model(&train), &train, &val, &toy_train(1e-2, 3)).unwrap();
        (write_checkpoint(&out.model.to_store()), history_csv(&out.history))
    };
    assert_eq!(run(), run());
}

#[test]
fn single_class_training_fails() {
    let train = make_set(1, &[(Label::Interictal, 0.0, 30)]);
    let val = make_set(2, &[(Label::Interictal, 500.0, 12), (Label::Preictal, 1000.0, 12)]);
    let err = fit(toy_model(&train), &train, &val, &toy_train(1e-3, 1)).unwrap_err();
    assert!(matches!(err, TrainError::SingleClass { pre: 0, inter: 28 }), "{err}");
}

#[test]
fn fit_reads_only_training_and_validation_data() {
    let (train, val) = toy_sets();
    let test = make_set(9, &[(Label::Interictal, 9000.0, 12), (Label::Preictal, 9500.0, 12)]);
    let test_start = 9000.0;
    fit(toy_model(&train), &train, &val, &toy_train(1e-3, 2)).unwrap();
    let seen: Vec<f64> = train.access_log().into_iter().chain(val.access_log()).collect();
    assert!(!seen.is_empty());
    assert!(seen.iter().all(|&t| t < test_start));
    assert!(test.access_log().is_empty());
}

#[test]
fn streaming_prediction_ignores_block_size() {
    let (train, val) = toy_sets();
    let model = toy_model(&train);
    let a = model.predict(&val, 1).unwrap();
    let b = model.predict(&val, 100).unwrap();
    assert_eq!(a.len(), val.len());
    for (x, y) in a.points().iter().zip(b.points()) {
        assert!((x.1 - y.1).abs() < 1e-9);
    }
}

#[test]
fn checkpoint_round_trip_and_shape_check() {
    let (train, _) = toy_sets();
    let model = toy_model(&train);
    let back = Model::from_store(tiny(), model.to_store()).unwrap();
    assert_eq!(back, model);
    let mut wrong = tiny();
    wrong.tokenizer.d_model = 8;
    wrong.backbone.d_model = 8;
    assert!(matches!(Model::from_store(wrong, model.to_store()), Err(TrainError::Checkpoint(_))));
    let mut store = model.to_store();
    store.remove("norm.std");
    assert!(Model::from_store(tiny(), store).is_err());
}

#[test]
fn config_round_trip() {
    let mut c = RunConfig::default();
    c.apply_kv("lr = 0.005\n# comment\nd_model = 32  # trailing\nattn_window = 40\nablation_mode = memory_only\n")
        .unwrap();
    assert_eq!(c.train.lr, 0.005);
    assert_eq!(c.model.backbone.d_model, 32);
    let text = c.to_kv();
    assert_eq!(RunConfig::from_kv(&text).unwrap(), c);
    let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
    assert_eq!(keys, RunConfig::KEYS);
    assert_eq!(RunConfig::from_kv(&RunConfig::default().to_kv()).unwrap(), RunConfig::default());

    assert!(matches!(RunConfig::from_kv("learning_rate = 1"), Err(TrainError::Config(_))));
    assert!(RunConfig::from_kv("lr = fast").is_err());
    assert!(RunConfig::from_kv("lr").is_err());
    assert!(RunConfig::from_kv("ablation_mode = half").is_err());

    let auto = RunConfig::default().resolved_model().unwrap();
    assert_eq!(auto.backbone.window, 12);
    let bad = RunConfig::from_kv("topk = 20\nfusion_window = 12").unwrap();
    assert!(bad.validate().is_err());
}

#[test]
fn history_csv_layout() {
    let h = [
        EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.25,
        },
        EpochRecord {
            epoch: 2,
            train_loss: 0.125,
            val_loss: 0.0625,
        },
    ];
    let csv = history_csv(&h);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss");
    assert_eq!(lines.len(), 3);
    let v: Vec<f64> = lines[2].split(',').skip(1).map(|x| x.parse().unwrap()).collect();
    assert_eq!(v, [0.125, 0.0625]);
}
