//! Dense `f64` tensors, a static computation graph with reverse-mode
//! differentiation, finite-difference gradient checking and the binary
//! parameter checkpoint format.

mod checkpoint;
mod graph;
pub(crate) mod kernels;
mod tensor;

use std::collections::BTreeMap;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use graph::{Feed, Graph, NodeId, BCE_EPS, LOG_FLOOR};
pub use kernels::sigmoid;
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unbound {kind} `{name}`")]
    Unbound { kind: &'static str, name: String },
    #[error("binding `{name}` has shape {got:?}, graph expects {expected:?}")]
    BindingShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("log of non-positive value {value} at node {node}")]
    NonPositiveLog { node: usize, value: f64 },
    #[error("graph has not been evaluated")]
    NotEvaluated,
    #[error("gradcheck epsilon {0} outside [1e-7, 1e-3]")]
    Epsilon(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    /// Element-wise `self += other` for every shared name.
    pub fn accumulate(&mut self, other: &ParamStore) {
        for (name, g) in other.iter() {
            if let Some(t) = self.map.get_mut(name) {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.map.values_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn zeros_like(&self) -> ParamStore {
        let map = self
            .map
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        ParamStore { map }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }
}

/// Fixed projection weights that reduce a non-scalar output to a scalar.
fn projection_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.3 * i as f64 + 0.7).cos()).collect()
}

fn projected(graph: &Graph, output: NodeId, w: &[f64]) -> Result<f64, KernelError> {
    Ok(kernels::dot(graph.value(output)?, w))
}

/// Compares reverse-mode gradients of `output` against central finite
/// differences for every parameter entry. Returns
/// `max |analytic - numeric| / max(1, |numeric|)`.
///
/// Non-scalar outputs are reduced with fixed projection weights first.
pub fn gradcheck(
    graph: &mut Graph,
    output: NodeId,
    params: &ParamStore,
    feed: &Feed,
    epsilon: f64,
) -> Result<f64, KernelError> {
    gradcheck_sampled(graph, output, params, feed, epsilon, usize::MAX)
}

/// [`gradcheck`] restricted to at most `max_per_param` evenly spaced entries of
/// each parameter tensor.
pub fn gradcheck_sampled(
    graph: &mut Graph,
    output: NodeId,
    params: &ParamStore,
    feed: &Feed,
    epsilon: f64,
    max_per_param: usize,
) -> Result<f64, KernelError> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(KernelError::Epsilon(epsilon));
    }
    let n_out: usize = graph.shape(output).iter().product();
    let w = projection_weights(n_out);
    let seed = Tensor::new(graph.shape(output).to_vec(), w.clone())?;
    graph.evaluate(params, feed)?;
    let analytic = graph.backward(output, &seed)?;

    let names: Vec<String> = graph.param_names().map(str::to_string).collect();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for name in names {
        let len = analytic.get(&name).map(Tensor::len).unwrap_or(0);
        let step = if len <= max_per_param { 1 } else { len.div_ceil(max_per_param) };
        for i in (0..len).step_by(step) {
            let orig = params.get(&name).expect("bound param").data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + epsilon;
            graph.evaluate(&probe, feed)?;
            let up = projected(graph, output, &w)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - epsilon;
            graph.evaluate(&probe, feed)?;
            let down = projected(graph, output, &w)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.get(&name).unwrap().data()[i];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    graph.evaluate(params, feed)?;
    Ok(worst)
}
