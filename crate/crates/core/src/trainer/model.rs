use std::cell::RefCell;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, TrainError};
use crate::alarm::ProbabilityTrace;
use crate::backbone::{init_backbone, mag_forward, MemoryState};
use crate::numkernel::{Feed, Graph, NodeId, ParamStore, Tensor};
use crate::protocol::{Interval, Label};
use crate::signal::LabeledSegment;
use crate::tokenizer::{build_tokenizer, init_tokenizer, ChannelStats};

pub const NORM_MEAN: &str = "norm.mean";
pub const NORM_STD: &str = "norm.std";

/// Time-sorted segments grouped into runs that each lie inside one labeled
/// interval. Memory and sequences never cross a run boundary.
#[derive(Clone, Debug, Default)]
pub struct SegmentSet {
    pub segments: Vec<LabeledSegment>,
    pub runs: Vec<Range<usize>>,
    access: RefCell<Vec<f64>>,
}

impl SegmentSet {
    /// Keeps the segments that fall inside `intervals` with a matching label.
    pub fn new(mut segments: Vec<LabeledSegment>, intervals: &[Interval]) -> Self {
        let mut ivs: Vec<Interval> = intervals.iter().filter(|i| i.label != Label::Excluded).copied().collect();
        ivs.sort_by(|a, b| a.t0.total_cmp(&b.t0));
        segments.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
        let locate = |t: f64| {
            let i = ivs.partition_point(|iv| iv.t1 <= t);
            ivs.get(i).filter(|iv| iv.contains(t)).map(|iv| (i, iv.label))
        };
        let mut kept = Vec::with_capacity(segments.len());
        let mut runs: Vec<Range<usize>> = Vec::new();
        let mut current = None;
        for s in segments {
            let Some((idx, label)) = locate(s.t_start) else { continue };
            if label != s.label {
                continue;
            }
            if current != Some(idx) {
                runs.push(kept.len()..kept.len());
                current = Some(idx);
            }
            kept.push(s);
            runs.last_mut().unwrap().end = kept.len();
        }
        Self {
            segments: kept,
            runs,
            access: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.segments.iter().filter(|s| s.label == label).count()
    }

    /// Segment `i`, recording its start time in the access log.
    pub fn read(&self, i: usize) -> &LabeledSegment {
        let s = &self.segments[i];
        self.access.borrow_mut().push(s.t_start);
        s
    }

    /// Start times of every segment read so far, in read order.
    pub fn access_log(&self) -> Vec<f64> {
        self.access.borrow().clone()
    }

    pub fn clear_access_log(&self) {
        self.access.borrow_mut().clear();
    }
}

/// `context` consecutive segments of one run, starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingSequence {
    pub start: usize,
    pub len: usize,
    pub label: Label,
}

/// Sliding windows of `context` segments inside each run, `stride` apart.
/// Runs shorter than `context` contribute nothing.
pub fn make_sequences(set: &SegmentSet, context: usize, stride: usize) -> Vec<TrainingSequence> {
    let mut out = Vec::new();
    if context == 0 || stride == 0 {
        return out;
    }
    for run in &set.runs {
        let mut s = run.start;
        while s + context <= run.end {
            out.push(TrainingSequence {
                start: s,
                len: context,
                label: set.segments[s].label,
            });
            s += stride;
        }
    }
    out
}

/// Tokenizer, backbone and head parameters plus input standardisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub stats: ChannelStats,
}

impl Model {
    pub fn init(cfg: ModelConfig, stats: ChannelStats, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_tokenizer(&cfg.tokenizer, &mut rng, &mut params);
        init_backbone(&cfg.backbone, &mut rng, &mut params);
        Self { cfg, params, stats }
    }

    /// Parameters plus the standardisation tensors, for checkpointing.
    pub fn to_store(&self) -> ParamStore {
        let mut s = self.params.clone();
        let (m, sd) = self.stats.to_tensors();
        s.insert(NORM_MEAN, m);
        s.insert(NORM_STD, sd);
        s
    }

    pub fn from_store(cfg: ModelConfig, mut store: ParamStore) -> Result<Self, TrainError> {
        let missing = |n: &str| TrainError::Checkpoint(format!("missing tensor {n}"));
        let mean = store.remove(NORM_MEAN).ok_or_else(|| missing(NORM_MEAN))?;
        let std = store.remove(NORM_STD).ok_or_else(|| missing(NORM_STD))?;
        let reference = Self::init(cfg.clone(), ChannelStats::identity(mean.len()), 0);
        for (name, t) in reference.params.iter() {
            match store.get(name) {
                Some(s) if s.shape() == t.shape() => {}
                Some(s) => {
                    return Err(TrainError::Checkpoint(format!(
                        "{name} has shape {:?}, config expects {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                None => return Err(missing(name)),
            }
        }
        Ok(Self {
            cfg,
            params: store,
            stats: ChannelStats::from_tensors(&mean, &std),
        })
    }

    pub fn tokens_per_segment(&self) -> usize {
        self.cfg.tokenizer.tokens_per_segment().unwrap_or(1)
    }

    /// Adds tokenizer nodes for segment `i` of `set` and returns its token rows.
    pub(crate) fn segment_node(
        &self,
        g: &mut Graph,
        feed: &mut Feed,
        set: &SegmentSet,
        i: usize,
    ) -> Result<NodeId, TrainError> {
        let seg = set.read(i);
        let name = format!("x{i}");
        let x = g.input(&name, &[seg.n_channels, seg.n_samples()])?;
        feed.insert(name, self.stats.apply(seg));
        Ok(build_tokenizer(g, x, &self.cfg.tokenizer)?.tokens)
    }

    /// Token rows for segments `range` of `set`, `[n * tokens_per_segment, d]`.
    pub fn tokens(&self, set: &SegmentSet, range: Range<usize>) -> Result<Tensor, TrainError> {
        let d = self.cfg.tokenizer.d_model;
        let mut data = Vec::with_capacity(range.len() * self.tokens_per_segment() * d);
        for i in range {
            let mut g = Graph::new();
            let mut feed = Feed::new();
            let node = self.segment_node(&mut g, &mut feed, set, i)?;
            g.evaluate(&self.params, &feed)?;
            data.extend_from_slice(g.value(node)?);
        }
        let rows = data.len() / d;
        Ok(Tensor::new(vec![rows, d], data)?)
    }

    /// Probability per segment, streaming each run in blocks of `block`
    /// segments with memory carried inside the run and reset between runs.
    pub fn predict(&self, set: &SegmentSet, block: usize) -> Result<ProbabilityTrace, TrainError> {
        let tps = self.tokens_per_segment();
        let d = self.cfg.backbone.d_model;
        let mut points = Vec::with_capacity(set.len());
        for run in &set.runs {
            let mut state = MemoryState::zero(d);
            let mut s = run.start;
            while s < run.end {
                let e = (s + block.max(1)).min(run.end);
                let tokens = self.tokens(set, s..e)?;
                let out = mag_forward(&tokens, &state, state.step, &self.params, &self.cfg.backbone)?;
                for (k, i) in (s..e).enumerate() {
                    points.push((set.segments[i].t_start, out.probs[(k + 1) * tps - 1]));
                }
                state = out.state;
                s = e;
            }
        }
        ProbabilityTrace::new(points).map_err(|e| TrainError::Data(e.to_string()))
    }
}
