//! Memory-as-a-gate temporal backbone: a decaying recurrent memory and causal
//! sliding-window attention fused by a learned elementwise gate, followed by a
//! logistic classification head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::{sigmoid, Feed, Graph, KernelError, NodeId, ParamStore, Tensor};

pub const W_Q: &str = "mag.w_q";
pub const W_K: &str = "mag.w_k";
pub const W_V: &str = "mag.w_v";
pub const W_O: &str = "mag.w_o";
pub const THETA: &str = "mag.theta";
pub const W_WRITE: &str = "mag.w_write";
pub const B_WRITE: &str = "mag.b_write";
pub const W_MEM: &str = "mag.w_mem";
pub const B_MEM: &str = "mag.b_mem";
pub const W_GATE: &str = "mag.w_g";
pub const B_GATE: &str = "mag.b_g";
pub const W_CLS: &str = "head.w_cls";
pub const B_CLS: &str = "head.b_cls";

/// Parameters read only by the attention branch.
pub const ATTENTION_PARAMS: [&str; 4] = [W_Q, W_K, W_V, W_O];
/// Parameters read only by the memory branch.
pub const MEMORY_PARAMS: [&str; 5] = [THETA, W_WRITE, B_WRITE, W_MEM, B_MEM];

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("memory state is at step {state}, call expects step {expected}")]
    StaleState { state: u64, expected: u64 },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    /// Gate pinned to 1: attention only.
    AttentionOnly,
    /// Gate pinned to 0: memory only.
    MemoryOnly,
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Self::Full),
            "attention_only" => Ok(Self::AttentionOnly),
            "memory_only" => Ok(Self::MemoryOnly),
            _ => Err(format!("unknown ablation mode `{s}` (full, attention_only, memory_only)")),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::AttentionOnly => "attention_only",
            Self::MemoryOnly => "memory_only",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    /// Attention window S, in tokens.
    pub window: usize,
    pub mode: AblationMode,
    /// Initial decay `sigma(theta)`.
    pub init_decay: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            window: 12,
            mode: AblationMode::Full,
            init_decay: 0.9,
        }
    }
}

impl BackboneConfig {
    pub fn with_mode(&self, mode: AblationMode) -> Self {
        Self { mode, ..self.clone() }
    }

    fn uses_attention(&self) -> bool {
        self.mode != AblationMode::MemoryOnly
    }

    fn uses_memory(&self) -> bool {
        self.mode != AblationMode::AttentionOnly
    }
}

/// Glorot-uniform matrices, zero biases, `theta = logit(init_decay)`.
pub fn init_backbone<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R, store: &mut ParamStore) {
    let d = cfg.d_model;
    let hk = cfg.n_heads * cfg.d_k;
    let glorot = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
    store.insert(W_Q, Tensor::uniform(&[d, hk], glorot(d, hk), rng));
    store.insert(W_K, Tensor::uniform(&[d, hk], glorot(d, hk), rng));
    store.insert(W_V, Tensor::uniform(&[d, hk], glorot(d, hk), rng));
    store.insert(W_O, Tensor::uniform(&[hk, d], glorot(hk, d), rng));
    let logit = (cfg.init_decay / (1.0 - cfg.init_decay)).ln();
    store.insert(THETA, Tensor::full(&[d], logit));
    store.insert(W_WRITE, Tensor::uniform(&[d, d], glorot(d, d), rng));
    store.insert(B_WRITE, Tensor::zeros(&[d]));
    store.insert(W_MEM, Tensor::uniform(&[d, d], glorot(d, d), rng));
    store.insert(B_MEM, Tensor::zeros(&[d]));
    store.insert(W_GATE, Tensor::uniform(&[2 * d, d], glorot(2 * d, d), rng));
    store.insert(B_GATE, Tensor::zeros(&[d]));
    store.insert(W_CLS, Tensor::uniform(&[d, 1], glorot(d, 1), rng));
    store.insert(B_CLS, Tensor::zeros(&[1]));
}

/// One recurrence step given an already transformed write value:
/// `h = sigma(theta) * h_prev + (1 - sigma(theta)) * write`.
pub fn memory_step(h_prev: &[f64], write: &[f64], theta: &[f64]) -> Vec<f64> {
    h_prev
        .iter()
        .zip(write)
        .zip(theta)
        .map(|((&h, &w), &th)| {
            let a = sigmoid(th);
            a * h + (1.0 - a) * w
        })
        .collect()
}

/// `memory_step` with the write transform `tanh(x W_write + b_write)`.
pub fn memory_update(h_prev: &[f64], x: &[f64], params: &ParamStore) -> Result<Vec<f64>, BackboneError> {
    let get = |n: &str| {
        params
            .get(n)
            .ok_or_else(|| BackboneError::Shape(format!("missing parameter {n}")))
    };
    let (w, b, theta) = (get(W_WRITE)?, get(B_WRITE)?, get(THETA)?);
    let d = theta.len();
    if h_prev.len() != d || x.len() != d || w.shape() != [d, d] || b.len() != d {
        return Err(BackboneError::Shape(format!(
            "memory update needs d_model={d}, got h {} and x {}",
            h_prev.len(),
            x.len()
        )));
    }
    let write: Vec<f64> = (0..d)
        .map(|j| {
            let z: f64 = (0..d).map(|i| x[i] * w.data()[i * d + j]).sum::<f64>() + b.data()[j];
            z.tanh()
        })
        .collect();
    Ok(memory_step(h_prev, &write, theta.data()))
}

/// Multi-head causal sliding-window attention over `[history; tokens]`, with
/// queries from `tokens` only. Returns `[L, d_model]`.
pub fn build_attention(
    g: &mut Graph,
    tokens: NodeId,
    history: Option<NodeId>,
    cfg: &BackboneConfig,
) -> Result<NodeId, BackboneError> {
    let d = cfg.d_model;
    let hk = cfg.n_heads * cfg.d_k;
    let w_q = g.param(W_Q, &[d, hk])?;
    let w_k = g.param(W_K, &[d, hk])?;
    let w_v = g.param(W_V, &[d, hk])?;
    let w_o = g.param(W_O, &[hk, d])?;
    let (keys_src, offset) = match history {
        Some(h) => (g.concat_rows(&[h, tokens])?, g.shape(h)[0]),
        None => (tokens, 0),
    };
    let q = g.matmul(tokens, w_q)?;
    let k = g.matmul(keys_src, w_k)?;
    let v = g.matmul(keys_src, w_v)?;
    let scale = 1.0 / (cfg.d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice(q, 1, h * cfg.d_k, cfg.d_k)?;
        let kh = g.slice(k, 1, h * cfg.d_k, cfg.d_k)?;
        let vh = g.slice(v, 1, h * cfg.d_k, cfg.d_k)?;
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let scores = g.scale(raw, scale);
        let attn = g.window_softmax(scores, cfg.window, offset)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok(g.matmul(cat, w_o)?)
}

/// Nodes produced by [`build_mag`].
#[derive(Clone, Debug)]
pub struct MagNodes {
    pub z_attn: Option<NodeId>,
    pub z_mem: Option<NodeId>,
    pub gate: Option<NodeId>,
    /// Fused outputs `[L, d_model]`.
    pub y: NodeId,
    /// Head probabilities `[L, 1]`.
    pub probs: NodeId,
    /// Memory after each step, `[1, d_model]` each.
    pub h: Vec<NodeId>,
}

/// Memory recurrence over the rows of `tokens`, starting from `h0 [1, d]`.
fn build_memory(g: &mut Graph, tokens: NodeId, h0: NodeId, cfg: &BackboneConfig) -> Result<Vec<NodeId>, BackboneError> {
    let d = cfg.d_model;
    let l = g.shape(tokens)[0];
    let w_write = g.param(W_WRITE, &[d, d])?;
    let b_write = g.param(B_WRITE, &[d])?;
    let theta = g.param(THETA, &[d])?;
    let theta = g.reshape(theta, &[1, d])?;
    let decay = g.sigmoid(theta);
    let keep = g.one_minus(decay);
    let xw = g.matmul(tokens, w_write)?;
    let xw = g.add_bias(xw, b_write)?;
    let write = g.tanh(xw);
    let mut h = h0;
    let mut out = Vec::with_capacity(l);
    for t in 0..l {
        let wt = g.row(write, t)?;
        let old = g.mul(decay, h)?;
        let new = g.mul(keep, wt)?;
        h = g.add(old, new)?;
        out.push(h);
    }
    Ok(out)
}

/// Full block plus head for `tokens [L, d]`. `history` holds up to `S - 1`
/// earlier tokens visible to attention; `h0` is the carried memory `[1, d]`.
pub fn build_mag(
    g: &mut Graph,
    tokens: NodeId,
    history: Option<NodeId>,
    h0: NodeId,
    cfg: &BackboneConfig,
) -> Result<MagNodes, BackboneError> {
    let d = cfg.d_model;
    if g.shape(tokens).len() != 2 || g.shape(tokens)[1] != d {
        return Err(BackboneError::Shape(format!(
            "tokens {:?} do not have d_model={d} columns",
            g.shape(tokens)
        )));
    }
    if cfg.window == 0 || cfg.n_heads == 0 || cfg.d_k == 0 {
        return Err(BackboneError::Shape("window, heads and d_k must be >= 1".into()));
    }
    let z_attn = if cfg.uses_attention() {
        Some(build_attention(g, tokens, history, cfg)?)
    } else {
        None
    };
    let (h, z_mem) = if cfg.uses_memory() {
        let h = build_memory(g, tokens, h0, cfg)?;
        let hs = if h.len() == 1 { h[0] } else { g.concat_rows(&h)? };
        let w_mem = g.param(W_MEM, &[d, d])?;
        let b_mem = g.param(B_MEM, &[d])?;
        let z = g.matmul(hs, w_mem)?;
        (h, Some(g.add_bias(z, b_mem)?))
    } else {
        (Vec::new(), None)
    };
    let (y, gate) = match (z_attn, z_mem) {
        (Some(a), Some(m)) => {
            let w_g = g.param(W_GATE, &[2 * d, d])?;
            let b_g = g.param(B_GATE, &[d])?;
            let cat = g.concat_cols(&[a, m])?;
            let lin = g.matmul(cat, w_g)?;
            let lin = g.add_bias(lin, b_g)?;
            let gate = g.sigmoid(lin);
            let ga = g.mul(gate, a)?;
            let inv = g.one_minus(gate);
            let gm = g.mul(inv, m)?;
            (g.add(ga, gm)?, Some(gate))
        }
        (Some(a), None) => (a, None),
        (None, Some(m)) => (m, None),
        (None, None) => unreachable!("every mode keeps one branch"),
    };
    let w_cls = g.param(W_CLS, &[d, 1])?;
    let b_cls = g.param(B_CLS, &[1])?;
    let logit = g.matmul(y, w_cls)?;
    let logit = g.add_bias(logit, b_cls)?;
    let probs = g.sigmoid(logit);
    Ok(MagNodes {
        z_attn,
        z_mem,
        gate,
        y,
        probs,
        h,
    })
}

/// Memory and attention context carried between streaming calls.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub h: Vec<f64>,
    /// Up to `S - 1` most recent tokens, oldest first.
    pub history: Vec<Vec<f64>>,
    /// Number of tokens consumed so far.
    pub step: u64,
}

impl MemoryState {
    pub fn zero(d_model: usize) -> Self {
        Self {
            h: vec![0.0; d_model],
            history: Vec::new(),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagOutput {
    /// `[L, d_model]`.
    pub outputs: Tensor,
    pub probs: Vec<f64>,
    pub state: MemoryState,
}

/// Runs the block over `tokens [L, d]` continuing from `state`, which must be
/// at step `start_step`.
pub fn mag_forward(
    tokens: &Tensor,
    state: &MemoryState,
    start_step: u64,
    params: &ParamStore,
    cfg: &BackboneConfig,
) -> Result<MagOutput, BackboneError> {
    if state.step != start_step {
        return Err(BackboneError::StaleState {
            state: state.step,
            expected: start_step,
        });
    }
    let d = cfg.d_model;
    if tokens.rank() != 2 || tokens.shape()[1] != d || state.h.len() != d {
        return Err(BackboneError::Shape(format!(
            "tokens {:?} / memory {} vs d_model {d}",
            tokens.shape(),
            state.h.len()
        )));
    }
    let l = tokens.shape()[0];
    let mut g = Graph::new();
    let x = g.input("tokens", &[l, d])?;
    let history = if state.history.is_empty() {
        None
    } else {
        Some(g.constant(Tensor::from_rows(&state.history)))
    };
    let h0 = g.constant(Tensor::new(vec![1, d], state.h.clone())?);
    let nodes = build_mag(&mut g, x, history, h0, cfg)?;
    g.evaluate(params, &Feed::new().with("tokens", tokens.clone()))?;

    let h = match nodes.h.last() {
        Some(&last) => g.value(last)?.to_vec(),
        None => state.h.clone(),
    };
    let keep = cfg.window.saturating_sub(1);
    let mut hist: Vec<Vec<f64>> = state.history.clone();
    hist.extend((0..l).map(|i| tokens.row(i).to_vec()));
    let drop = hist.len().saturating_sub(keep);
    hist.drain(..drop);
    Ok(MagOutput {
        outputs: g.tensor(nodes.y)?,
        probs: g.value(nodes.probs)?.to_vec(),
        state: MemoryState {
            h,
            history: hist,
            step: state.step + l as u64,
        },
    })
}
