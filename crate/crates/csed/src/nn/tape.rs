//! Reverse-mode autodiff over a recorded operation tape.
//!
//! Every op appends a node holding the forward value plus whatever the
//! backward rule needs. Node indices are topological by construction, so
//! `backward` is a single reverse sweep. Ops validate shapes up front and
//! return errors instead of panicking; anything accepted here is safe to
//! differentiate.

use std::collections::BTreeMap;

use super::tensor::{Tensor, TensorError};

/// Probabilities from `sigmoid` are clamped into this closed range so they
/// stay strictly inside (0, 1) even for extreme preactivations.
pub const SIGMOID_FLOOR: f64 = f64::MIN_POSITIVE;
/// Largest f64 below 1.0.
pub const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Cross-entropy inputs are clamped into [BCE_CLAMP, 1 - BCE_CLAMP]; outside
/// the open interval the subgradient is zero.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel first and second moments, used by batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ChannelStats {
    /// Fresh running statistics: zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average update, keep = 1 - rate.
    pub fn blend(&mut self, observed: &ChannelStats, rate: f64) {
        for (r, o) in self.mean.iter_mut().zip(&observed.mean) {
            *r = (1.0 - rate) * *r + rate * o;
        }
        for (r, o) in self.var.iter_mut().zip(&observed.var) {
            *r = (1.0 - rate) * *r + rate * o;
        }
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleOffset {
        x: NodeId,
        scale: f64,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    ConcatCols(Vec<NodeId>),
    Row {
        x: NodeId,
        index: usize,
    },
    StackRows(Vec<NodeId>),
    Reshape(NodeId),
    SumAll(NodeId),
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    BceMean {
        scores: NodeId,
        targets: Tensor,
        mask: Option<Tensor>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient w.r.t. an arbitrary node, if the loss depends on it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all registered parameters, keyed by name. Parameters the
    /// loss does not reach get zero tensors.
    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

fn stable_sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(SIGMOID_FLOOR, SIGMOID_CEIL)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a tensor the loss will not be differentiated against.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Records a named trainable leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId, TensorError> {
        if self.params.contains_key(name) {
            return Err(TensorError::Usage(format!(
                "parameter {name:?} bound twice on one tape"
            )));
        }
        let id = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// y = scale * x + offset, elementwise with constants.
    pub fn scale_offset(&mut self, x: NodeId, scale: f64, offset: f64) -> NodeId {
        let out = self.value(x).map(|v| scale * v + offset);
        self.push(out, Op::ScaleOffset { x, scale })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(stable_sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// out = x · wᵀ + b, with x of shape [n, k], w of shape [m, k], b of
    /// shape [m]. Row i of w holds the weights of output feature i.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, TensorError> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.rank() != 2 || wt.rank() != 2 {
            return Err(TensorError::Dimension(format!(
                "linear expects rank-2 input and weight, got {:?} and {:?}",
                xt.shape(),
                wt.shape()
            )));
        }
        let (n, k) = (xt.rows(), xt.cols());
        let (m, kw) = (wt.rows(), wt.cols());
        if k != kw {
            return Err(TensorError::Dimension(format!(
                "linear: input has {k} features, weight expects {kw}"
            )));
        }
        if let Some(bid) = b {
            let bt = self.value(bid);
            if bt.shape() != [m] {
                return Err(TensorError::Dimension(format!(
                    "linear: bias shape {:?} does not match {m} outputs",
                    bt.shape()
                )));
            }
        }
        let mut out = vec![0.0; n * m];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for i in 0..n {
                let xrow = &xd[i * k..(i + 1) * k];
                for j in 0..m {
                    let wrow = &wd[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for t in 0..k {
                        acc += xrow[t] * wrow[t];
                    }
                    out[i * m + j] = acc;
                }
            }
            if let Some(bid) = b {
                let bd = self.value(bid).data();
                for i in 0..n {
                    for j in 0..m {
                        out[i * m + j] += bd[j];
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Concatenates rank-2 tensors along columns; all must share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Argument("concat_cols: no inputs".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(TensorError::Dimension(format!(
                    "concat_cols: shape {:?} incompatible with {rows} rows",
                    t.shape()
                )));
            }
            cols += t.cols();
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let w = t.cols();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + w].copy_from_slice(t.row_slice(r));
            }
            offset += w;
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Selects one row of a rank-2 tensor as a 1 x cols tensor.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 || index >= t.rows() {
            return Err(TensorError::Dimension(format!(
                "row {index} out of range for shape {:?}",
                t.shape()
            )));
        }
        let out = Tensor::new(vec![1, t.cols()], t.row_slice(index).to_vec())?;
        Ok(self.push(out, Op::Row { x, index }))
    }

    /// Stacks k tensors of shape [1, c] into [k, c].
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::Argument("stack_rows: no inputs".into()));
        }
        let cols = self.value(rows[0]).cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 2 || t.rows() != 1 || t.cols() != cols {
                return Err(TensorError::Dimension(format!(
                    "stack_rows: expected [1, {cols}], got {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec())))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// 3x3 convolution over [t, f, c_in] with kernel [3, 3, c_in, c_out] and
    /// bias [c_out]; zero padding of one frame/bin preserves t and f.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (xt, kt, bt) = (self.value(x), self.value(kernel), self.value(bias));
        if xt.rank() != 3 {
            return Err(TensorError::Dimension(format!(
                "conv2d input must be [t, f, c], got {:?}",
                xt.shape()
            )));
        }
        let (t, f, cin) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        if kt.rank() != 4 || kt.shape()[0] != 3 || kt.shape()[1] != 3 || kt.shape()[2] != cin {
            return Err(TensorError::Dimension(format!(
                "conv2d kernel must be [3, 3, {cin}, c_out], got {:?}",
                kt.shape()
            )));
        }
        let cout = kt.shape()[3];
        if bt.shape() != [cout] {
            return Err(TensorError::Dimension(format!(
                "conv2d bias shape {:?} does not match {cout} channels",
                bt.shape()
            )));
        }
        let mut out = vec![0.0; t * f * cout];
        {
            let xd = xt.data();
            let kd = kt.data();
            let bd = bt.data();
            for ot in 0..t {
                for of in 0..f {
                    for kh in 0..3usize {
                        let it = ot as isize + kh as isize - 1;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for kw in 0..3usize {
                            let jf = of as isize + kw as isize - 1;
                            if jf < 0 || jf >= f as isize {
                                continue;
                            }
                            let xbase = (it as usize * f + jf as usize) * cin;
                            let kbase = (kh * 3 + kw) * cin * cout;
                            let obase = (ot * f + of) * cout;
                            for ci in 0..cin {
                                let xv = xd[xbase + ci];
                                let krow = kbase + ci * cout;
                                for co in 0..cout {
                                    out[obase + co] += xv * kd[krow + co];
                                }
                            }
                        }
                    }
                    let obase = (ot * f + of) * cout;
                    for co in 0..cout {
                        out[obase + co] += bd[co];
                    }
                }
            }
        }
        let out = Tensor::new(vec![t, f, cout], out)?;
        Ok(self.push(out, Op::Conv2d { x, kernel, bias }))
    }

    /// Max pooling over non-overlapping windows of [t, f, c]; both dims must
    /// divide evenly.
    pub fn max_pool(&mut self, x: NodeId, pool_t: usize, pool_f: usize) -> Result<NodeId, TensorError> {
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(TensorError::Dimension(format!(
                "max_pool input must be [t, f, c], got {:?}",
                xt.shape()
            )));
        }
        let (t, f, c) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        if pool_t == 0 || pool_f == 0 || t % pool_t != 0 || f % pool_f != 0 {
            return Err(TensorError::Dimension(format!(
                "max_pool window {pool_t}x{pool_f} does not divide {t}x{f}"
            )));
        }
        let (ot, of) = (t / pool_t, f / pool_f);
        let mut out = vec![0.0; ot * of * c];
        let mut argmax = vec![0usize; ot * of * c];
        let xd = xt.data();
        for i in 0..ot {
            for j in 0..of {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..pool_t {
                        for dj in 0..pool_f {
                            let idx = ((i * pool_t + di) * f + (j * pool_f + dj)) * c + ch;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (i * of + j) * c + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let out = Tensor::new(vec![ot, of, c], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Batch norm in training mode: normalizes with statistics of this batch
    /// (channel = last axis, biased variance) and reports them so the caller
    /// can update running averages.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, ChannelStats), TensorError> {
        let (c, n) = self.batch_norm_check(x, gamma, beta)?;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, &v) in xd.iter().enumerate() {
            mean[i % c] += v;
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for (i, &v) in xd.iter().enumerate() {
            let d = v - mean[i % c];
            var[i % c] += d * d;
        }
        for v in var.iter_mut() {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let stats = ChannelStats {
            mean: mean.clone(),
            var,
        };
        let id = self.batch_norm_apply(x, gamma, beta, mean, inv_std, true)?;
        Ok((id, stats))
    }

    /// Batch norm in inference mode, normalizing with frozen running stats.
    pub fn batch_norm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running: &ChannelStats,
    ) -> Result<NodeId, TensorError> {
        let (c, _) = self.batch_norm_check(x, gamma, beta)?;
        if running.mean.len() != c || running.var.len() != c {
            return Err(TensorError::Dimension(format!(
                "batch_norm: running stats cover {} channels, input has {c}",
                running.mean.len()
            )));
        }
        let inv_std: Vec<f64> = running.var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_norm_apply(x, gamma, beta, running.mean.clone(), inv_std, false)
    }

    fn batch_norm_check(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(usize, usize), TensorError> {
        let xt = self.value(x);
        if xt.rank() < 2 || xt.is_empty() {
            return Err(TensorError::Dimension(format!(
                "batch_norm input must be non-empty with rank >= 2, got {:?}",
                xt.shape()
            )));
        }
        let c = *xt.shape().last().unwrap();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let t = self.value(id);
            if t.shape() != [c] {
                return Err(TensorError::Dimension(format!(
                    "batch_norm {name} shape {:?} does not match {c} channels",
                    t.shape()
                )));
            }
        }
        Ok((c, xt.len() / c))
    }

    fn batch_norm_apply(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    ) -> Result<NodeId, TensorError> {
        let c = mean.len();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let xt = self.value(x);
        let data: Vec<f64> = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                gd[ch] * (v - mean[ch]) * inv_std[ch] + bd[ch]
            })
            .collect();
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
        ))
    }

    /// Mean binary cross-entropy between scores and 0/1 targets, optionally
    /// restricted by a 0/1 mask (1 = counted). Scores are clamped into
    /// [BCE_CLAMP, 1 - BCE_CLAMP] with zero subgradient outside.
    pub fn bce_mean(
        &mut self,
        scores: NodeId,
        targets: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<NodeId, TensorError> {
        let st = self.value(scores);
        if st.shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                left: st.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        if let Some(v) = targets.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(TensorError::Argument(format!(
                "bce_mean: target value {v} is not 0 or 1"
            )));
        }
        if let Some(m) = mask {
            if m.shape() != targets.shape() {
                return Err(TensorError::ShapeMismatch {
                    left: m.shape().to_vec(),
                    right: targets.shape().to_vec(),
                });
            }
            if let Some(v) = m.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(TensorError::Argument(format!(
                    "bce_mean: mask value {v} is not 0 or 1"
                )));
            }
        }
        let count = match mask {
            Some(m) => m.data().iter().filter(|&&v| v == 1.0).count(),
            None => targets.len(),
        };
        if count == 0 {
            return Err(TensorError::Argument(
                "bce_mean: every element is masked out".into(),
            ));
        }
        let sd = st.data();
        let mut total = 0.0;
        for i in 0..sd.len() {
            if let Some(m) = mask {
                if m.data()[i] == 0.0 {
                    continue;
                }
            }
            let z = sd[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = targets.data()[i];
            total -= y * z.ln() + (1.0 - y) * (1.0 - z).ln();
        }
        let out = Tensor::scalar(total / count as f64);
        Ok(self.push(
            out,
            Op::BceMean {
                scores,
                targets: targets.clone(),
                mask: mask.cloned(),
                count,
            },
        ))
    }

    /// Number of elements a masked mean divides by, given the same mask
    /// semantics as `bce_mean`.
    pub fn unmasked_count(targets: &Tensor, mask: Option<&Tensor>) -> usize {
        match mask {
            Some(m) => m.data().iter().filter(|&&v| v == 1.0).count(),
            None => targets.len(),
        }
    }

    /// Runs the reverse sweep from a scalar loss node. Returns gradients for
    /// every reached node and for all registered parameters (zeros when the
    /// loss does not depend on one).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Usage(format!(
                "backward from unknown node {}",
                loss.0
            )));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        )?);
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut named = BTreeMap::new();
        for (name, id) in &self.params {
            let g = match &grads[id.0] {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
            };
            named.insert(name.clone(), g);
        }
        Ok(Gradients {
            by_node: grads,
            named,
        })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        target: NodeId,
        delta: Tensor,
    ) -> Result<(), TensorError> {
        match &mut grads[target.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        index: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        match &self.nodes[index].op {
            Op::Leaf => Ok(()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = Tensor::new(
                    ta.shape().to_vec(),
                    g.data().iter().zip(tb.data()).map(|(g, b)| g * b).collect(),
                )?;
                let db = Tensor::new(
                    tb.shape().to_vec(),
                    g.data().iter().zip(ta.data()).map(|(g, a)| g * a).collect(),
                )?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)
            }
            Op::ScaleOffset { x, scale } => self.accumulate(grads, *x, g.scaled(*scale)),
            Op::Sigmoid(x) => {
                let y = &self.nodes[index].value;
                let dx = Tensor::new(
                    y.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                )?;
                self.accumulate(grads, *x, dx)
            }
            Op::Tanh(x) => {
                let y = &self.nodes[index].value;
                let dx = Tensor::new(
                    y.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                )?;
                self.accumulate(grads, *x, dx)
            }
            Op::Relu(x) => {
                let xin = &self.nodes[x.0].value;
                let dx = Tensor::new(
                    xin.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xin.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )?;
                self.accumulate(grads, *x, dx)
            }
            Op::Linear { x, w, b } => {
                let xt = &self.nodes[x.0].value;
                let wt = &self.nodes[w.0].value;
                let (n, k) = (xt.rows(), xt.cols());
                let m = wt.rows();
                let gd = g.data();
                let mut dx = vec![0.0; n * k];
                let mut dw = vec![0.0; m * k];
                for i in 0..n {
                    for j in 0..m {
                        let gij = gd[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let wrow = wt.row_slice(j);
                        let xrow = xt.row_slice(i);
                        for t in 0..k {
                            dx[i * k + t] += gij * wrow[t];
                            dw[j * k + t] += gij * xrow[t];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, k], dx)?)?;
                self.accumulate(grads, *w, Tensor::new(vec![m, k], dw)?)?;
                if let Some(bid) = b {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += gd[i * m + j];
                        }
                    }
                    self.accumulate(grads, *bid, Tensor::new(vec![m], db)?)?;
                }
                Ok(())
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * cols + offset..r * cols + offset + w]);
                    }
                    self.accumulate(grads, p, Tensor::new(vec![rows, w], dp)?)?;
                    offset += w;
                }
                Ok(())
            }
            Op::Row { x, index: r } => {
                let xt = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(xt.shape().to_vec());
                let w = xt.cols();
                dx.data_mut()[r * w..(r + 1) * w].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx)
            }
            Op::StackRows(parts) => {
                let cols = g.cols();
                for (i, &p) in parts.iter().enumerate() {
                    let dp = Tensor::new(
                        vec![1, cols],
                        g.data()[i * cols..(i + 1) * cols].to_vec(),
                    )?;
                    self.accumulate(grads, p, dp)?;
                }
                Ok(())
            }
            Op::Reshape(x) => {
                let dx = g.reshaped(self.nodes[x.0].value.shape().to_vec())?;
                self.accumulate(grads, *x, dx)
            }
            Op::SumAll(x) => {
                let xt = &self.nodes[x.0].value;
                let dx = Tensor::full(xt.shape().to_vec(), g.scalar_value());
                self.accumulate(grads, *x, dx)
            }
            Op::Conv2d { x, kernel, bias } => {
                let xt = &self.nodes[x.0].value;
                let kt = &self.nodes[kernel.0].value;
                let (t, f, cin) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let cout = kt.shape()[3];
                let gd = g.data();
                let xd = xt.data();
                let kd = kt.data();
                let mut dx = vec![0.0; xt.len()];
                let mut dk = vec![0.0; kt.len()];
                let mut db = vec![0.0; cout];
                for ot in 0..t {
                    for of in 0..f {
                        let obase = (ot * f + of) * cout;
                        for co in 0..cout {
                            db[co] += gd[obase + co];
                        }
                        for kh in 0..3usize {
                            let it = ot as isize + kh as isize - 1;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for kw in 0..3usize {
                                let jf = of as isize + kw as isize - 1;
                                if jf < 0 || jf >= f as isize {
                                    continue;
                                }
                                let xbase = (it as usize * f + jf as usize) * cin;
                                let kbase = (kh * 3 + kw) * cin * cout;
                                for ci in 0..cin {
                                    let krow = kbase + ci * cout;
                                    let xv = xd[xbase + ci];
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        let gv = gd[obase + co];
                                        acc += gv * kd[krow + co];
                                        dk[krow + co] += gv * xv;
                                    }
                                    dx[xbase + ci] += acc;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?)?;
                self.accumulate(grads, *kernel, Tensor::new(kt.shape().to_vec(), dk)?)?;
                self.accumulate(grads, *bias, Tensor::new(vec![cout], db)?)
            }
            Op::MaxPool { x, argmax } => {
                let xt = &self.nodes[x.0].value;
                let mut dx = vec![0.0; xt.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g.data()[o];
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let xt = &self.nodes[x.0].value;
                let c = mean.len();
                let n = (xt.len() / c) as f64;
                let gd = self.nodes[gamma.0].value.data();
                let xd = xt.data();
                let gout = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                // Per-channel sums of g and g * xhat drive both the parameter
                // gradients and (in training mode) the stats feedback term.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..xd.len() {
                    let ch = i % c;
                    let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                    sum_g[ch] += gout[i];
                    sum_gx[ch] += gout[i] * xhat;
                    dgamma[ch] += gout[i] * xhat;
                    dbeta[ch] += gout[i];
                }
                let mut dx = vec![0.0; xd.len()];
                if *train {
                    for i in 0..xd.len() {
                        let ch = i % c;
                        let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                        dx[i] = gd[ch] * inv_std[ch]
                            * (gout[i] - sum_g[ch] / n - xhat * sum_gx[ch] / n);
                    }
                } else {
                    for i in 0..xd.len() {
                        let ch = i % c;
                        dx[i] = gout[i] * gd[ch] * inv_std[ch];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?)?;
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?)
            }
            Op::BceMean {
                scores,
                targets,
                mask,
                count,
            } => {
                let st = &self.nodes[scores.0].value;
                let scale = g.scalar_value() / *count as f64;
                let mut dz = vec![0.0; st.len()];
                for i in 0..st.len() {
                    if let Some(m) = mask {
                        if m.data()[i] == 0.0 {
                            continue;
                        }
                    }
                    let z = st.data()[i];
                    if z <= BCE_CLAMP || z >= 1.0 - BCE_CLAMP {
                        continue;
                    }
                    let y = targets.data()[i];
                    dz[i] = scale * ((1.0 - y) / (1.0 - z) - y / z);
                }
                self.accumulate(grads, *scores, Tensor::new(st.shape().to_vec(), dz)?)
            }
        }
    }
}
