//! Supervised training: sequence construction, mini-batch Adam with gradient
//! clipping, early stopping on validation loss.

mod config;
mod model;

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{build_mag, mag_forward, BackboneError, MemoryState};
use crate::numkernel::{Feed, Graph, KernelError, ParamStore, Tensor, BCE_EPS};
use crate::protocol::Label;
use crate::tokenizer::TokenizerError;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use model::{make_sequences, Model, SegmentSet, TrainingSequence, NORM_MEAN, NORM_STD};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training data has a single class ({pre} pre-ictal, {inter} inter-ictal sequences)")]
    SingleClass { pre: usize, inter: usize },
    #[error("validation data yields no sequences of length {0}")]
    EmptyValidation(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (gradient norm {grad_norm})")]
    NonFinite { epoch: usize, batch: usize, grad_norm: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: &[f64], y: &[f64]) -> f64 {
    let n = p.len().max(1) as f64;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let _ = writeln!(s, "{},{:.17e},{:.17e}", r.epoch, r.train_loss, r.val_loss);
    }
    s
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Training sequences per class, `(pre-ictal, inter-ictal)`.
    pub class_counts: (usize, usize),
}

/// Adam moments for every trainable tensor.
struct Adam {
    m: ParamStore,
    v: ParamStore,
    t: i32,
}

impl Adam {
    fn new() -> Self {
        Self {
            m: ParamStore::new(),
            v: ParamStore::new(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (name, g) in grads.iter() {
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(g.shape()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            let p = params.get_mut(name).expect("gradient for unknown parameter").data_mut();
            for i in 0..g.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                p[i] -= cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Batch of contiguous chunks: `(first sequence start, number of sequences, label)`.
type Chunk = (usize, usize, Label);

/// Loss and gradients of one batch. Each chunk's segments are tokenized once
/// and shared by its overlapping sequences.
fn batch_gradients(
    model: &Model,
    set: &SegmentSet,
    chunks: &[Chunk],
    context: usize,
) -> Result<(f64, ParamStore), TrainError> {
    let tps = model.tokens_per_segment();
    let d = model.cfg.backbone.d_model;
    let mut g = Graph::new();
    let mut feed = Feed::new();
    let h0 = g.constant(Tensor::zeros(&[1, d]));
    let mut probs = Vec::new();
    let mut targets = Vec::new();
    for &(start, n, label) in chunks {
        let mut toks = Vec::with_capacity(n + context - 1);
        for i in start..start + n + context - 1 {
            toks.push(model.segment_node(&mut g, &mut feed, set, i)?);
        }
        let all = if toks.len() == 1 { toks[0] } else { g.concat_rows(&toks)? };
        for b in 0..n {
            let seq = g.slice(all, 0, b * tps, context * tps)?;
            let nodes = build_mag(&mut g, seq, None, h0, &model.cfg.backbone)?;
            probs.push(g.row(nodes.probs, context * tps - 1)?);
            targets.push(label.target().expect("sets hold labeled segments"));
        }
    }
    let p = if probs.len() == 1 { probs[0] } else { g.concat_rows(&probs)? };
    let loss = g.bce(p, &targets)?;
    g.evaluate(&model.params, &feed)?;
    let value = g.value(loss)?[0];
    let grads = g.backward(loss, &Tensor::scalar(1.0))?;
    Ok((value, grads))
}

/// Mean final-token BCE over `sequences`, each started from empty memory.
pub fn sequence_loss(model: &Model, set: &SegmentSet, sequences: &[TrainingSequence]) -> Result<f64, TrainError> {
    let tps = model.tokens_per_segment();
    let d = model.cfg.backbone.d_model;
    let mut p = Vec::with_capacity(sequences.len());
    let mut y = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let tokens = model.tokens(set, seq.start..seq.start + seq.len)?;
        let out = mag_forward(&tokens, &MemoryState::zero(d), 0, &model.params, &model.cfg.backbone)?;
        p.push(out.probs[seq.len * tps - 1]);
        y.push(seq.label.target().expect("sets hold labeled segments"));
    }
    Ok(bce_loss(&p, &y))
}

/// Splits every run's stride-1 sequences into chunks of at most `chunk`,
/// with a random phase so chunk boundaries move between epochs.
fn epoch_chunks(set: &SegmentSet, context: usize, chunk: usize, rng: &mut ChaCha8Rng) -> Vec<Chunk> {
    let mut out = Vec::new();
    for run in &set.runs {
        if run.len() < context {
            continue;
        }
        let n_seq = run.len() - context + 1;
        let label = set.segments[run.start].label;
        let mut s = 0;
        let first = rng.gen_range(1..=chunk.min(n_seq));
        let mut len = first;
        while s < n_seq {
            let n = len.min(n_seq - s);
            out.push((run.start + s, n, label));
            s += n;
            len = chunk;
        }
    }
    out.shuffle(rng);
    out
}

/// Trains `model` on `train`, keeping the parameters with the lowest loss on
/// `val` (non-overlapping sequences). Deterministic given `cfg.seed`.
pub fn fit(model: Model, train: &SegmentSet, val: &SegmentSet, cfg: &TrainConfig) -> Result<FitOutput, TrainError> {
    let ctx = cfg.context_segments;
    let train_seqs = make_sequences(train, ctx, 1);
    let pre = train_seqs.iter().filter(|s| s.label == Label::Preictal).count();
    let inter = train_seqs.len() - pre;
    if pre == 0 || inter == 0 {
        return Err(TrainError::SingleClass { pre, inter });
    }
    let val_seqs = make_sequences(val, ctx, ctx);
    if val_seqs.is_empty() {
        return Err(TrainError::EmptyValidation(ctx));
    }
    info!(
        "training on {} sequences ({pre} pre-ictal / {inter} inter-ictal, ratio {:.3}); {} validation sequences",
        train_seqs.len(),
        pre as f64 / inter as f64,
        val_seqs.len()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model;
    let mut adam = Adam::new();
    let mut best = (sequence_loss(&model, val, &val_seqs)?, model.params.clone(), 0usize);
    let mut history = Vec::new();
    let mut stale = 0;
    let per_batch = (cfg.batch_size / cfg.chunk.min(cfg.batch_size)).max(1);
    let chunk = cfg.chunk.min(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        let chunks = epoch_chunks(train, ctx, chunk, &mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (b, batch) in chunks.chunks(per_batch).enumerate() {
            let (loss, mut grads) = batch_gradients(&model, train, batch, ctx)?;
            let norm = grads.global_norm();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    grad_norm: norm,
                });
            }
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            adam.step(&mut model.params, &grads, cfg);
            let n: usize = batch.iter().map(|c| c.1).sum();
            total += loss * n as f64;
            count += n;
            debug!("epoch {epoch} batch {b}: loss {loss:.5}, grad norm {norm:.4}");
        }
        let train_loss = total / count as f64;
        let val_loss = sequence_loss(&model, val, &val_seqs)?;
        info!("epoch {epoch}: train {train_loss:.5}, val {val_loss:.5}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: usize::MAX,
                grad_norm: f64::NAN,
            });
        }
        if val_loss < best.0 {
            best = (val_loss, model.params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                info!("early stop after epoch {epoch}; best epoch {}", best.2);
                break;
            }
        }
    }
    model.params = best.1;
    Ok(FitOutput {
        model,
        history,
        best_epoch: best.2,
        class_counts: (pre, inter),
    })
}
