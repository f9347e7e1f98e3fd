//! Flat `key = value` run configuration.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::alarm::AlarmConfig;
use crate::backbone::{AblationMode, BackboneConfig};
use crate::tokenizer::TokenizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub backbone: BackboneConfig,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Sequences per optimisation step.
    pub batch_size: usize,
    pub context_segments: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Consecutive training sequences drawn together; their segments are
    /// tokenized once and shared.
    pub chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 100,
            batch_size: 32,
            context_segments: 12,
            seed: 0,
            clip_norm: 5.0,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            chunk: 16,
        }
    }
}

/// Everything a run needs, serialisable as sorted `key = value` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub alarm: AlarmConfig,
    /// Attention window in tokens; `None` follows the context length.
    pub attn_window: Option<usize>,
}


fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 24] = [
        "ablation_mode",
        "attn_window",
        "batch_size",
        "chunk",
        "clip_norm",
        "context_segments",
        "d_k",
        "d_model",
        "epochs",
        "fpr_cap",
        "fusion_window",
        "heads",
        "init_decay",
        "kernel",
        "lr",
        "patience",
        "pool_stride",
        "pool_window",
        "refractory_s",
        "seed",
        "segment_pooling",
        "spatial_filters",
        "temporal_filters",
        "topk",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let v = value.trim();
        let tok = &mut self.model.tokenizer;
        let bb = &mut self.model.backbone;
        let tr = &mut self.train;
        match key.trim() {
            "lr" => tr.lr = parse(key, v)?,
            "epochs" => tr.epochs = parse(key, v)?,
            "batch_size" => tr.batch_size = parse(key, v)?,
            "context_segments" => tr.context_segments = parse(key, v)?,
            "seed" => tr.seed = parse(key, v)?,
            "clip_norm" => tr.clip_norm = parse(key, v)?,
            "patience" => tr.patience = parse(key, v)?,
            "chunk" => tr.chunk = parse(key, v)?,
            "d_model" => {
                tok.d_model = parse(key, v)?;
                bb.d_model = tok.d_model;
            }
            "heads" => bb.n_heads = parse(key, v)?,
            "d_k" => bb.d_k = parse(key, v)?,
            "init_decay" => bb.init_decay = parse(key, v)?,
            "attn_window" => {
                self.attn_window = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "ablation_mode" => bb.mode = v.parse::<AblationMode>().map_err(TrainError::Config)?,
            "pool_window" => tok.pool_window = parse(key, v)?,
            "pool_stride" => tok.pool_stride = parse(key, v)?,
            "kernel" => tok.kernel = parse(key, v)?,
            "temporal_filters" => tok.temporal_filters = parse(key, v)?,
            "spatial_filters" => tok.spatial_filters = parse(key, v)?,
            "segment_pooling" => tok.segment_pooling = parse(key, v)?,
            "fpr_cap" => self.alarm.fpr_cap = parse(key, v)?,
            "topk" => self.alarm.k = parse(key, v)?,
            "fusion_window" => self.alarm.window = parse(key, v)?,
            "refractory_s" => self.alarm.refractory_s = parse(key, v)?,
            other => return Err(TrainError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), TrainError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self, TrainError> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let tok = &self.model.tokenizer;
        let bb = &self.model.backbone;
        let tr = &self.train;
        let values = [
            bb.mode.to_string(),
            self.attn_window.map_or("auto".into(), |w| w.to_string()),
            tr.batch_size.to_string(),
            tr.chunk.to_string(),
            tr.clip_norm.to_string(),
            tr.context_segments.to_string(),
            bb.d_k.to_string(),
            bb.d_model.to_string(),
            tr.epochs.to_string(),
            self.alarm.fpr_cap.to_string(),
            self.alarm.window.to_string(),
            bb.n_heads.to_string(),
            bb.init_decay.to_string(),
            tok.kernel.to_string(),
            tr.lr.to_string(),
            tr.patience.to_string(),
            tok.pool_stride.to_string(),
            tok.pool_window.to_string(),
            self.alarm.refractory_s.to_string(),
            tr.seed.to_string(),
            tok.segment_pooling.to_string(),
            tok.spatial_filters.to_string(),
            tok.temporal_filters.to_string(),
            self.alarm.k.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Model configuration with the attention window resolved and checked.
    pub fn resolved_model(&self) -> Result<ModelConfig, TrainError> {
        let mut m = self.model.clone();
        let tps = m.tokenizer.tokens_per_segment()?;
        m.backbone.window = self.attn_window.unwrap_or(self.train.context_segments * tps);
        m.backbone.d_model = m.tokenizer.d_model;
        self.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let tr = &self.train;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(tr.lr >= 0.0 && tr.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if tr.batch_size == 0 || tr.chunk == 0 || tr.context_segments == 0 {
            return bad("batch_size, chunk and context_segments must be >= 1");
        }
        if !(tr.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if self.attn_window == Some(0) {
            return bad("attn_window must be >= 1");
        }
        let bb = &self.model.backbone;
        if bb.n_heads == 0 || bb.d_k == 0 || !(bb.init_decay > 0.0 && bb.init_decay < 1.0) {
            return bad("heads and d_k must be >= 1, init_decay in (0, 1)");
        }
        if self.alarm.k == 0 || self.alarm.k > self.alarm.window {
            return bad("need 1 <= topk <= fusion_window");
        }
        Ok(())
    }
}
