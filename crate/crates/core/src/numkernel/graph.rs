use std::collections::BTreeMap;

use super::kernels::{self, axpy, dot, sigmoid};
use super::{KernelError, ParamStore, Tensor};

/// Floor applied by [`Graph::log_clamped`].
pub const LOG_FLOOR: f64 = 1e-8;
/// Probability clamp used by [`Graph::bce`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    Const(Vec<f64>),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Square(NodeId),
    Log(NodeId),
    LogClamped(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    WindowSoftmax {
        x: NodeId,
        window: usize,
        query_offset: usize,
    },
    AvgPool {
        x: NodeId,
        window: usize,
        stride: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanLast(NodeId),
    AddBias(NodeId, NodeId),
    TemporalConv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Bce {
        p: NodeId,
        targets: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(_) => "square",
            Op::Log(_) => "log",
            Op::LogClamped(_) => "log_clamped",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::WindowSoftmax { .. } => "window_softmax",
            Op::AvgPool { .. } => "avg_pool",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::MeanLast(_) => "mean_last",
            Op::AddBias(..) => "add_bias",
            Op::TemporalConv { .. } => "temporal_conv",
            Op::Bce { .. } => "bce",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Named input tensors bound at evaluation time.
#[derive(Clone, Debug, Default)]
pub struct Feed {
    map: BTreeMap<String, Tensor>,
}

impl Feed {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn with(mut self, name: impl Into<String>, t: Tensor) -> Self {
        self.insert(name, t);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

/// Static computation graph with cached forward values.
///
/// Nodes are appended in construction order, which is always a valid
/// topological order; evaluation and backpropagation walk that order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Vec<f64>>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    evaluated: bool,
}

fn dims(shape: &[usize]) -> String {
    format!("{shape:?}")
}

fn mismatch(op: &'static str, detail: String) -> KernelError {
    KernelError::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Param(_) => true,
            Op::Input(_) | Op::Const(_) => false,
            other => self.op_inputs(other).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Square(a)
            | Op::Log(a)
            | Op::LogClamped(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::MeanLast(a) => vec![*a],
            Op::WindowSoftmax { x, .. } | Op::AvgPool { x, .. } | Op::Slice { x, .. } => vec![*x],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::TemporalConv { x, w, b } => vec![*x, *w, *b],
            Op::Bce { p, .. } => vec![*p],
        }
    }

    fn check_valid_shape(op: &'static str, shape: &[usize]) -> Result<(), KernelError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(mismatch(op, format!("invalid shape {}", dims(shape))));
        }
        Ok(())
    }

    fn mat(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), KernelError> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(mismatch(op, format!("expected rank-2 operand, got {}", dims(s))));
        }
        Ok((s[0], s[1]))
    }

    // ---- leaves ----------------------------------------------------------

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, KernelError> {
        Self::check_valid_shape("input", shape)?;
        if let Some(&id) = self.inputs.get(name) {
            if self.shape(id) != shape {
                return Err(mismatch(
                    "input",
                    format!("{name} redeclared as {} (was {})", dims(shape), dims(self.shape(id))),
                ));
            }
            return Ok(id);
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Trainable parameter leaf. Declaring the same name twice returns the same node.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, KernelError> {
        Self::check_valid_shape("param", shape)?;
        if let Some(&id) = self.params.get(name) {
            if self.shape(id) != shape {
                return Err(mismatch(
                    "param",
                    format!("{name} redeclared as {} (was {})", dims(shape), dims(self.shape(id))),
                ));
            }
            return Ok(id);
        }
        let id = self.push(Op::Param(name.to_string()), shape.to_vec());
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t.into_data()), shape)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (m, k) = self.mat("matmul", a)?;
        let (k2, n) = self.mat("matmul", b)?;
        if k != k2 {
            return Err(mismatch(
                "matmul",
                format!("inner dims differ: {} x {}", dims(&[m, k]), dims(&[k2, n])),
            ));
        }
        Ok(self.push(Op::MatMul(a, b), vec![m, n]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let (m, n) = self.mat("transpose", a)?;
        Ok(self.push(Op::Transpose(a), vec![n, m]))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (m, n) = self.mat("add_bias", a)?;
        let bn: usize = self.shape(b).iter().product();
        let bs = self.shape(b);
        let ok = bn == n && (bs.len() == 1 || (bs.len() == 2 && bs[0] == 1));
        if !ok {
            return Err(mismatch(
                "add_bias",
                format!("bias {} does not match {} columns", dims(bs), dims(&[m, n])),
            ));
        }
        Ok(self.push(Op::AddBias(a, b), vec![m, n]))
    }

    /// Valid cross-correlation of every channel of `x [C, T]` with every filter of
    /// `w [F, K]`, plus per-filter bias `b [F]`. Output row `f * C + c` holds filter
    /// `f` applied to channel `c`; output length is `T - K + 1`.
    pub fn temporal_conv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (c, t) = self.mat("temporal_conv", x)?;
        let (f, k) = self.mat("temporal_conv", w)?;
        let bn: usize = self.shape(b).iter().product();
        if bn != f {
            return Err(mismatch(
                "temporal_conv",
                format!("bias {} vs {} filters", dims(self.shape(b)), f),
            ));
        }
        if k > t {
            return Err(mismatch(
                "temporal_conv",
                format!("kernel {k} longer than input {}", dims(&[c, t])),
            ));
        }
        Ok(self.push(Op::TemporalConv { x, w, b }, vec![f * c, t - k + 1]))
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>, KernelError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                op,
                format!("{} vs {}", dims(self.shape(a)), dims(self.shape(b))),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, s), shape)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, s), shape)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Square(a), shape)
    }

    /// Natural log; evaluation fails on non-positive entries.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log(a), shape)
    }

    /// `log(max(a, LOG_FLOOR))`
    pub fn log_clamped(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::LogClamped(a), shape)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh(a), shape)
    }

    // ---- normalisation / pooling -----------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax(a), shape)
    }

    /// Row-wise softmax of a score matrix `[Lq, Lk]` restricted to a causal window.
    ///
    /// Query row `i` sits at key position `query_offset + i` and may only attend to
    /// keys `j` with `pos - window < j <= pos`; every other entry is exactly zero.
    pub fn window_softmax(
        &mut self,
        a: NodeId,
        window: usize,
        query_offset: usize,
    ) -> Result<NodeId, KernelError> {
        let (lq, lk) = self.mat("window_softmax", a)?;
        if window == 0 {
            return Err(mismatch("window_softmax", "window must be >= 1".into()));
        }
        if query_offset + lq > lk {
            return Err(mismatch(
                "window_softmax",
                format!("{lq} queries at offset {query_offset} exceed {lk} keys"),
            ));
        }
        Ok(self.push(
            Op::WindowSoftmax {
                x: a,
                window,
                query_offset,
            },
            vec![lq, lk],
        ))
    }

    /// Average pooling along the last axis of `[R, T]`.
    pub fn avg_pool(&mut self, a: NodeId, window: usize, stride: usize) -> Result<NodeId, KernelError> {
        let (r, t) = self.mat("avg_pool", a)?;
        if window == 0 || stride == 0 || window > t {
            return Err(mismatch(
                "avg_pool",
                format!("window {window} stride {stride} on {}", dims(&[r, t])),
            ));
        }
        let l = (t - window) / stride + 1;
        Ok(self.push(Op::AvgPool { x: a, window, stride }, vec![r, l]))
    }

    // ---- structural -------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, KernelError> {
        if parts.is_empty() {
            return Err(mismatch("concat_cols", "no operands".into()));
        }
        let (r, _) = self.mat("concat_cols", parts[0])?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.mat("concat_cols", p)?;
            if pr != r {
                return Err(mismatch("concat_cols", format!("row counts {r} vs {pr}")));
            }
            cols += pc;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![r, cols]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, KernelError> {
        if parts.is_empty() {
            return Err(mismatch("concat_rows", "no operands".into()));
        }
        let (_, c) = self.mat("concat_rows", parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.mat("concat_rows", p)?;
            if pc != c {
                return Err(mismatch("concat_rows", format!("column counts {c} vs {pc}")));
            }
            rows += pr;
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![rows, c]))
    }

    /// Contiguous slice of a rank-2 tensor along `axis` (0 = rows, 1 = columns).
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, KernelError> {
        let (r, c) = self.mat("slice", a)?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => return Err(mismatch("slice", format!("axis {axis} on rank-2 tensor"))),
        };
        if len == 0 || start + len > extent {
            return Err(mismatch(
                "slice",
                format!("[{start}, {}) out of {extent} on axis {axis}", start + len),
            ));
        }
        let shape = if axis == 0 { vec![len, c] } else { vec![r, len] };
        Ok(self.push(Op::Slice { x: a, axis, start, len }, shape))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId, KernelError> {
        self.slice(a, 0, i, 1)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, KernelError> {
        Self::check_valid_shape("reshape", shape)?;
        let n: usize = shape.iter().product();
        let m: usize = self.shape(a).iter().product();
        if n != m {
            return Err(mismatch(
                "reshape",
                format!("{} -> {}", dims(self.shape(a)), dims(shape)),
            ));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), vec![1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanAll(a), vec![1])
    }

    /// Mean over the last axis of `[R, T]`, giving `[R, 1]`.
    pub fn mean_last(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let (r, _) = self.mat("mean_last", a)?;
        Ok(self.push(Op::MeanLast(a), vec![r, 1]))
    }

    /// Mean binary cross-entropy of probabilities `p` against fixed targets.
    pub fn bce(&mut self, p: NodeId, targets: &[f64]) -> Result<NodeId, KernelError> {
        let n: usize = self.shape(p).iter().product();
        if n != targets.len() {
            return Err(mismatch(
                "bce",
                format!("{} probabilities vs {} targets", n, targets.len()),
            ));
        }
        Ok(self.push(
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            vec![1],
        ))
    }

    // ---- evaluation -------------------------------------------------------

    /// Runs every node in construction order, binding parameters and inputs by name.
    pub fn evaluate(&mut self, params: &ParamStore, feed: &Feed) -> Result<(), KernelError> {
        self.evaluated = false;
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let out = Self::forward_node(idx, node, &values, params, feed)?;
            values.push(out);
        }
        self.values = values;
        self.evaluated = true;
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Result<&[f64], KernelError> {
        if !self.evaluated {
            return Err(KernelError::NotEvaluated);
        }
        Ok(&self.values[id.0])
    }

    pub fn tensor(&self, id: NodeId) -> Result<Tensor, KernelError> {
        Tensor::new(self.shape(id).to_vec(), self.value(id)?.to_vec())
    }

    fn bind(
        name: &str,
        expected: &[usize],
        t: Option<&Tensor>,
        kind: &'static str,
    ) -> Result<Vec<f64>, KernelError> {
        let t = t.ok_or_else(|| KernelError::Unbound {
            kind,
            name: name.to_string(),
        })?;
        if t.shape() != expected {
            return Err(KernelError::BindingShape {
                name: name.to_string(),
                expected: expected.to_vec(),
                got: t.shape().to_vec(),
            });
        }
        Ok(t.data().to_vec())
    }

    fn forward_node(
        idx: usize,
        node: &Node,
        v: &[Vec<f64>],
        params: &ParamStore,
        feed: &Feed,
    ) -> Result<Vec<f64>, KernelError> {
        let shape = &node.shape;
        let map = |a: &NodeId, f: &dyn Fn(f64) -> f64| v[a.0].iter().map(|&x| f(x)).collect::<Vec<_>>();
        let zip = |a: &NodeId, b: &NodeId, f: &dyn Fn(f64, f64) -> f64| {
            v[a.0].iter().zip(&v[b.0]).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>()
        };
        let out = match &node.op {
            Op::Input(name) => Self::bind(name, shape, feed.get(name), "input")?,
            Op::Param(name) => Self::bind(name, shape, params.get(name), "param")?,
            Op::Const(data) => data.clone(),
            Op::MatMul(a, b) => {
                let (m, n) = (shape[0], shape[1]);
                let k = v[a.0].len() / m;
                let mut c = vec![0.0; m * n];
                kernels::matmul_acc(&v[a.0], &v[b.0], &mut c, m, k, n);
                c
            }
            Op::Transpose(a) => {
                let (n, m) = (shape[0], shape[1]);
                let src = &v[a.0];
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = src[i * n + j];
                    }
                }
                out
            }
            Op::Add(a, b) => zip(a, b, &|x, y| x + y),
            Op::Sub(a, b) => zip(a, b, &|x, y| x - y),
            Op::Mul(a, b) => zip(a, b, &|x, y| x * y),
            Op::Scale(a, s) => map(a, &|x| x * s),
            Op::AddScalar(a, s) => map(a, &|x| x + s),
            Op::Square(a) => map(a, &|x| x * x),
            Op::Log(a) => {
                if let Some(&bad) = v[a.0].iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(KernelError::NonPositiveLog { node: idx, value: bad });
                }
                map(a, &f64::ln)
            }
            Op::LogClamped(a) => map(a, &|x| x.max(LOG_FLOOR).ln()),
            Op::Sigmoid(a) => map(a, &sigmoid),
            Op::Tanh(a) => map(a, &f64::tanh),
            Op::Softmax(a) => {
                let cols = *shape.last().unwrap();
                let mut out = v[a.0].clone();
                for row in out.chunks_mut(cols) {
                    softmax_in_place(row);
                }
                out
            }
            Op::WindowSoftmax {
                x,
                window,
                query_offset,
            } => {
                let (lq, lk) = (shape[0], shape[1]);
                let mut out = vec![0.0; lq * lk];
                for i in 0..lq {
                    let pos = query_offset + i;
                    let lo = (pos + 1).saturating_sub(*window);
                    let src = &v[x.0][i * lk + lo..i * lk + pos + 1];
                    let dst = &mut out[i * lk + lo..i * lk + pos + 1];
                    dst.copy_from_slice(src);
                    softmax_in_place(dst);
                }
                out
            }
            Op::AvgPool { x, window, stride } => {
                let (r, l) = (shape[0], shape[1]);
                let t = v[x.0].len() / r;
                let inv = 1.0 / *window as f64;
                let mut out = vec![0.0; r * l];
                for row in 0..r {
                    let src = &v[x.0][row * t..(row + 1) * t];
                    for j in 0..l {
                        let s = j * stride;
                        out[row * l + j] = kernels::sum(&src[s..s + window]) * inv;
                    }
                }
                out
            }
            Op::ConcatCols(parts) => {
                let (r, c) = (shape[0], shape[1]);
                let mut out = Vec::with_capacity(r * c);
                for row in 0..r {
                    for p in parts {
                        let pc = v[p.0].len() / r;
                        out.extend_from_slice(&v[p.0][row * pc..(row + 1) * pc]);
                    }
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut out = Vec::with_capacity(shape[0] * shape[1]);
                for p in parts {
                    out.extend_from_slice(&v[p.0]);
                }
                out
            }
            Op::Slice { x, axis, start, len } => {
                let (r, c) = (shape[0], shape[1]);
                let src = &v[x.0];
                if *axis == 0 {
                    src[start * c..(start + len) * c].to_vec()
                } else {
                    let sc = src.len() / r;
                    let mut out = Vec::with_capacity(r * c);
                    for row in 0..r {
                        out.extend_from_slice(&src[row * sc + start..row * sc + start + len]);
                    }
                    out
                }
            }
            Op::Reshape(a) => v[a.0].clone(),
            Op::SumAll(a) => vec![kernels::sum(&v[a.0])],
            Op::MeanAll(a) => vec![kernels::sum(&v[a.0]) / v[a.0].len() as f64],
            Op::MeanLast(a) => {
                let r = shape[0];
                let c = v[a.0].len() / r;
                v[a.0].chunks(c).map(|row| kernels::sum(row) / c as f64).collect()
            }
            Op::AddBias(a, b) => {
                let n = shape[1];
                let bias = &v[b.0];
                let mut out = v[a.0].clone();
                for row in out.chunks_mut(n) {
                    for (o, bj) in row.iter_mut().zip(bias) {
                        *o += bj;
                    }
                }
                out
            }
            Op::TemporalConv { x, w, b } => {
                let tp = shape[1];
                let f = v[b.0].len();
                let k = v[w.0].len() / f;
                let c = shape[0] / f;
                let t = v[x.0].len() / c;
                let mut out = vec![0.0; f * c * tp];
                for fi in 0..f {
                    let wrow = &v[w.0][fi * k..(fi + 1) * k];
                    for ci in 0..c {
                        let dst = &mut out[(fi * c + ci) * tp..(fi * c + ci + 1) * tp];
                        kernels::correlate(&v[x.0][ci * t..(ci + 1) * t], wrow, v[b.0][fi], dst);
                    }
                }
                out
            }
            Op::Bce { p, targets } => {
                let n = targets.len() as f64;
                let mut total = 0.0;
                for (&pi, &y) in v[p.0].iter().zip(targets) {
                    let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
                    total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
                }
                vec![total / n]
            }
        };
        Ok(out)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode gradients of `output` (seeded with `seed`) with respect to every
    /// parameter declared in the graph. Parameters the output does not depend on
    /// receive zero gradients.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<ParamStore, KernelError> {
        if !self.evaluated {
            return Err(KernelError::NotEvaluated);
        }
        if seed.shape() != self.shape(output) {
            return Err(mismatch(
                "backward",
                format!(
                    "seed {} vs output {}",
                    dims(seed.shape()),
                    dims(self.shape(output))
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.data().to_vec());
        }
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
        }
        let mut out = ParamStore::new();
        for (name, &id) in &self.params {
            let data = grads[id.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.shape(id).iter().product()]);
            out.insert(name.clone(), Tensor::new(self.shape(id).to_vec(), data)?);
        }
        Ok(out)
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.values[id.0].len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let v = &self.values;
        let y = &v[idx];
        let shape = &node.shape;
        let add_into = |slot: Option<&mut Vec<f64>>, f: &dyn Fn(usize) -> f64| {
            if let Some(s) = slot {
                for (i, si) in s.iter_mut().enumerate() {
                    *si += f(i);
                }
            }
        };
        match &node.op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
            Op::MatMul(a, b) => {
                let (m, n) = (shape[0], shape[1]);
                let k = v[a.0].len() / m;
                if let Some(ga) = self.grad_slot(grads, *a) {
                    kernels::matmul_bt_acc(g, &v[b.0], ga, m, n, k);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    kernels::matmul_at_acc(&v[a.0], g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (shape[0], shape[1]);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.grad_slot(grads, *a), &|i| g[i]);
                add_into(self.grad_slot(grads, *b), &|i| g[i]);
            }
            Op::Sub(a, b) => {
                add_into(self.grad_slot(grads, *a), &|i| g[i]);
                add_into(self.grad_slot(grads, *b), &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&v[a.0], &v[b.0]);
                add_into(self.grad_slot(grads, *a), &|i| g[i] * vb[i]);
                add_into(self.grad_slot(grads, *b), &|i| g[i] * va[i]);
            }
            Op::Scale(a, s) => add_into(self.grad_slot(grads, *a), &|i| g[i] * s),
            Op::AddScalar(a, _) | Op::Reshape(a) => add_into(self.grad_slot(grads, *a), &|i| g[i]),
            Op::Square(a) => {
                let va = &v[a.0];
                add_into(self.grad_slot(grads, *a), &|i| 2.0 * va[i] * g[i]);
            }
            Op::Log(a) => {
                let va = &v[a.0];
                add_into(self.grad_slot(grads, *a), &|i| g[i] / va[i]);
            }
            Op::LogClamped(a) => {
                let va = &v[a.0];
                add_into(self.grad_slot(grads, *a), &|i| {
                    if va[i] > LOG_FLOOR {
                        g[i] / va[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::Sigmoid(a) => add_into(self.grad_slot(grads, *a), &|i| g[i] * y[i] * (1.0 - y[i])),
            Op::Tanh(a) => add_into(self.grad_slot(grads, *a), &|i| g[i] * (1.0 - y[i] * y[i])),
            Op::Softmax(a) | Op::WindowSoftmax { x: a, .. } => {
                let cols = *shape.last().unwrap();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((gr, yr), dst) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let s = dot(gr, yr);
                        for j in 0..cols {
                            dst[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::AvgPool { x, window, stride } => {
                let (r, l) = (shape[0], shape[1]);
                let t = v[x.0].len() / r;
                let inv = 1.0 / *window as f64;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for row in 0..r {
                        let dst = &mut gx[row * t..(row + 1) * t];
                        for j in 0..l {
                            let gj = g[row * l + j] * inv;
                            for d in &mut dst[j * stride..j * stride + window] {
                                *d += gj;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = (shape[0], shape[1]);
                let mut offset = 0;
                for p in parts {
                    let pc = v[p.0].len() / r;
                    if let Some(gp) = self.grad_slot(grads, *p) {
                        for row in 0..r {
                            let src = &g[row * c + offset..row * c + offset + pc];
                            for (d, s) in gp[row * pc..(row + 1) * pc].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = v[p.0].len();
                    if let Some(gp) = self.grad_slot(grads, *p) {
                        for (d, s) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *d += s;
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let (r, c) = (shape[0], shape[1]);
                let sc = v[x.0].len() / r.max(1);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    if *axis == 0 {
                        for (d, s) in gx[start * c..(start + len) * c].iter_mut().zip(g) {
                            *d += s;
                        }
                    } else {
                        for row in 0..r {
                            let dst = &mut gx[row * sc + start..row * sc + start + len];
                            for (d, s) in dst.iter_mut().zip(&g[row * c..(row + 1) * c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => add_into(self.grad_slot(grads, *a), &|_| g[0]),
            Op::MeanAll(a) => {
                let n = v[a.0].len() as f64;
                add_into(self.grad_slot(grads, *a), &|_| g[0] / n);
            }
            Op::MeanLast(a) => {
                let r = shape[0];
                let c = v[a.0].len() / r;
                add_into(self.grad_slot(grads, *a), &|i| g[i / c] / c as f64);
            }
            Op::AddBias(a, b) => {
                let n = shape[1];
                add_into(self.grad_slot(grads, *a), &|i| g[i]);
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for row in g.chunks(n) {
                        for (d, s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::TemporalConv { x, w, b } => {
                let tp = shape[1];
                let f = v[b.0].len();
                let k = v[w.0].len() / f;
                let c = shape[0] / f;
                let t = v[x.0].len() / c;
                let xv = &v[x.0];
                let wv = &v[w.0];
                if let Some(gw) = self.grad_slot(grads, *w) {
                    for fi in 0..f {
                        for ci in 0..c {
                            let gr = &g[(fi * c + ci) * tp..(fi * c + ci + 1) * tp];
                            kernels::correlate_grad(gr, &xv[ci * t..(ci + 1) * t], &mut gw[fi * k..(fi + 1) * k]);
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for fi in 0..f {
                        gb[fi] += kernels::sum(&g[fi * c * tp..(fi + 1) * c * tp]);
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for fi in 0..f {
                        for ci in 0..c {
                            let gr = &g[(fi * c + ci) * tp..(fi * c + ci + 1) * tp];
                            for ki in 0..k {
                                axpy(wv[fi * k + ki], gr, &mut gx[ci * t + ki..ci * t + ki + tp]);
                            }
                        }
                    }
                }
            }
            Op::Bce { p, targets } => {
                let n = targets.len() as f64;
                let vp = &v[p.0];
                add_into(self.grad_slot(grads, *p), &|i| {
                    let pi = vp[i];
                    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pi) {
                        return 0.0;
                    }
                    let yv = targets[i];
                    g[0] * (-yv / pi + (1.0 - yv) / (1.0 - pi)) / n
                });
            }
        }
    }

    /// Name of the op that produced `id`, for diagnostics.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
