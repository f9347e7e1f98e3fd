//! Shallow convolutional tokenizer: temporal filtering, spatial mixing across
//! all channels, log band power, and a linear projection to `d_model`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::{Feed, Graph, KernelError, NodeId, ParamStore, Tensor};
use crate::signal::LabeledSegment;

pub const W_TEMP: &str = "tok.w_temp";
pub const B_TEMP: &str = "tok.b_temp";
pub const W_SPAT: &str = "tok.w_spat";
pub const W_PROJ: &str = "tok.w_proj";
pub const B_PROJ: &str = "tok.b_proj";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("{t} samples is too short for kernel {k} and pool window {w} (need {})", k + w - 1)]
    TooShort { t: usize, k: usize, w: usize },
    #[error("segment shape {got:?}, expected {expected:?}")]
    Shape { got: [usize; 2], expected: [usize; 2] },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub n_channels: usize,
    pub n_samples: usize,
    pub fs: f64,
    /// Temporal filters F_t.
    pub temporal_filters: usize,
    /// Temporal kernel length K_t.
    pub kernel: usize,
    /// Spatial filters F_s.
    pub spatial_filters: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub d_model: usize,
    /// Average the pooled steps into a single token per segment.
    pub segment_pooling: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            n_channels: 18,
            n_samples: 1280,
            fs: 256.0,
            temporal_filters: 40,
            kernel: 40,
            spatial_filters: 40,
            pool_window: 75,
            pool_stride: 15,
            d_model: 64,
            segment_pooling: true,
        }
    }
}

impl TokenizerConfig {
    /// Pooled steps per segment.
    pub fn pooled_len(&self) -> Result<usize, TokenizerError> {
        token_count(self.n_samples, self.kernel, self.pool_window, self.pool_stride)
    }

    /// Tokens emitted per segment.
    pub fn tokens_per_segment(&self) -> Result<usize, TokenizerError> {
        if self.segment_pooling {
            self.pooled_len().map(|_| 1)
        } else {
            self.pooled_len()
        }
    }
}

/// `floor((T - K + 1 - W) / stride) + 1`.
pub fn token_count(t_samples: usize, kernel: usize, window: usize, stride: usize) -> Result<usize, TokenizerError> {
    if kernel == 0 || window == 0 || stride == 0 || t_samples + 1 < kernel + window {
        return Err(TokenizerError::TooShort {
            t: t_samples,
            k: kernel,
            w: window,
        });
    }
    Ok((t_samples + 1 - kernel - window) / stride + 1)
}

/// Glorot-uniform weights and zero biases.
pub fn init_tokenizer<R: Rng + ?Sized>(cfg: &TokenizerConfig, rng: &mut R, store: &mut ParamStore) {
    let (ft, fs, k, c, d) = (
        cfg.temporal_filters,
        cfg.spatial_filters,
        cfg.kernel,
        cfg.n_channels,
        cfg.d_model,
    );
    let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
    store.insert(W_TEMP, Tensor::uniform(&[ft, k], glorot(k, ft), rng));
    store.insert(B_TEMP, Tensor::zeros(&[ft]));
    store.insert(W_SPAT, Tensor::uniform(&[fs, ft * c], glorot(ft * c, fs), rng));
    store.insert(W_PROJ, Tensor::uniform(&[fs, d], glorot(fs, d), rng));
    store.insert(B_PROJ, Tensor::zeros(&[d]));
}

/// Nodes produced by [`build_tokenizer`].
#[derive(Clone, Copy, Debug)]
pub struct TokenizerNodes {
    /// Log band power `[F_s, L_pooled]` before projection.
    pub log_power: NodeId,
    /// `[L, d_model]`.
    pub tokens: NodeId,
}

/// Adds the tokenizer to `g` for an input node of shape `[C, T]`.
pub fn build_tokenizer(g: &mut Graph, x: NodeId, cfg: &TokenizerConfig) -> Result<TokenizerNodes, TokenizerError> {
    let (c, t) = match g.shape(x) {
        &[c, t] => (c, t),
        s => {
            return Err(TokenizerError::Shape {
                got: [s.first().copied().unwrap_or(0), s.get(1).copied().unwrap_or(0)],
                expected: [cfg.n_channels, cfg.n_samples],
            })
        }
    };
    if c != cfg.n_channels {
        return Err(TokenizerError::Shape {
            got: [c, t],
            expected: [cfg.n_channels, cfg.n_samples],
        });
    }
    token_count(t, cfg.kernel, cfg.pool_window, cfg.pool_stride)?;

    let w_temp = g.param(W_TEMP, &[cfg.temporal_filters, cfg.kernel])?;
    let b_temp = g.param(B_TEMP, &[cfg.temporal_filters])?;
    let w_spat = g.param(W_SPAT, &[cfg.spatial_filters, cfg.temporal_filters * c])?;
    let w_proj = g.param(W_PROJ, &[cfg.spatial_filters, cfg.d_model])?;
    let b_proj = g.param(B_PROJ, &[cfg.d_model])?;

    let z_temp = g.temporal_conv(x, w_temp, b_temp)?;
    let z_spat = g.matmul(w_spat, z_temp)?;
    let power = g.square(z_spat);
    let pooled = g.avg_pool(power, cfg.pool_window, cfg.pool_stride)?;
    let log_power = g.log_clamped(pooled);
    let feats = if cfg.segment_pooling {
        g.mean_last(log_power)?
    } else {
        log_power
    };
    let steps = g.transpose(feats)?;
    let proj = g.matmul(steps, w_proj)?;
    let tokens = g.add_bias(proj, b_proj)?;
    Ok(TokenizerNodes { log_power, tokens })
}

/// Per-channel mean and standard deviation used to standardize input segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(n_channels: usize) -> Self {
        Self {
            mean: vec![0.0; n_channels],
            std: vec![1.0; n_channels],
        }
    }

    /// Pooled statistics over every sample of every segment. Channels with no
    /// variance keep unit scale.
    pub fn fit<'a, I>(segments: I, n_channels: usize) -> Self
    where
        I: IntoIterator<Item = &'a LabeledSegment>,
    {
        let mut sum = vec![0.0; n_channels];
        let mut sq = vec![0.0; n_channels];
        let mut n = 0usize;
        for s in segments {
            for (c, (a, b)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in s.channel(c) {
                    *a += v as f64;
                    *b += (v as f64) * (v as f64);
                }
            }
            n += s.n_samples();
        }
        if n == 0 {
            return Self::identity(n_channels);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n as f64 - m * m).max(0.0);
                if var > 1e-24 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    /// Standardized `[C, T]` tensor for one segment.
    pub fn apply(&self, seg: &LabeledSegment) -> Tensor {
        let n = seg.n_samples();
        let mut data = Vec::with_capacity(seg.data.len());
        for c in 0..seg.n_channels {
            let (m, s) = (self.mean[c], self.std[c]);
            data.extend(seg.channel(c).iter().map(|&v| (v as f64 - m) / s));
        }
        Tensor::new(vec![seg.n_channels, n], data).expect("segment is non-empty")
    }

    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        (Tensor::vector(self.mean.clone()), Tensor::vector(self.std.clone()))
    }

    pub fn from_tensors(mean: &Tensor, std: &Tensor) -> Self {
        Self {
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
        }
    }
}

/// Tokens for one segment with their start times.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub subject_id: String,
    /// `[L, d_model]`.
    pub tokens: Tensor,
    pub t_start: Vec<f64>,
}

/// Tokenizes one segment. Inputs are standardized with `stats` first.
pub fn tokenize(
    segment: &LabeledSegment,
    params: &ParamStore,
    stats: &ChannelStats,
    cfg: &TokenizerConfig,
) -> Result<TokenSequence, TokenizerError> {
    let shape = [segment.n_channels, segment.n_samples()];
    if shape != [cfg.n_channels, cfg.n_samples] {
        return Err(TokenizerError::Shape {
            got: shape,
            expected: [cfg.n_channels, cfg.n_samples],
        });
    }
    let mut g = Graph::new();
    let x = g.input("x", &shape)?;
    let nodes = build_tokenizer(&mut g, x, cfg)?;
    g.evaluate(params, &Feed::new().with("x", stats.apply(segment)))?;
    let tokens = g.tensor(nodes.tokens)?;
    let t_start = if cfg.segment_pooling {
        vec![segment.t_start]
    } else {
        (0..tokens.shape()[0])
            .map(|i| segment.t_start + (i * cfg.pool_stride) as f64 / cfg.fs)
            .collect()
    };
    Ok(TokenSequence {
        subject_id: segment.subject_id.to_string(),
        tokens,
        t_start,
    })
}
