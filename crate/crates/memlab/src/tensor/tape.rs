//! Reverse-mode tape. Operations append nodes in topological order; the
//! backward pass walks the tape once in reverse. Gradients accumulate on
//! nodes that (transitively) depend on a tracked leaf.

use super::{all_finite, matmul_raw, transpose_raw, Tensor, TensorError, TensorResult};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

/// Elementwise nonlinearity kinds.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Activation { a: usize, kind: Activation },
    Softmax { a: usize, axis: usize },
    CausalSoftmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    CrossEntropy { logits: usize, targets: Vec<usize>, mask: Vec<bool> },
    Sum { a: usize },
    EmbedLookup { table: usize, ids: Vec<usize> },
    SliceRows { a: usize, from: usize },
    SliceCols { a: usize, from: usize },
    ConcatCols { parts: Vec<usize> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recorded computation: append-only list of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Records a copy of `t` as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push_leaf(t.data.clone(), t.shape.clone(), t.requires_grad)
    }

    /// Records an owned buffer as a leaf, validating the tensor invariants.
    pub fn leaf_owned(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> TensorResult<TensorId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(t.data, t.shape, requires_grad))
    }

    fn push_leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        self.push(data, shape, requires_grad, requires_grad, Op::Leaf)
    }

    fn push(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        needs_grad: bool,
        op: Op,
    ) -> TensorId {
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            needs_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        op_name: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: &[TensorId],
        op: Op,
    ) -> TensorResult<TensorId> {
        if !all_finite(&data) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push(data, shape, false, needs, op))
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient buffer, present after a backward pass for tracked nodes.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copies a node back out as a value tensor (including any gradient).
    pub fn value(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: n.requires_grad,
            grad: n.grad.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> TensorResult<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(TensorError::InvalidArg {
                op,
                msg: format!("expected 2-d tensor, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        self.push_op("matmul", out, vec![m, n], &[a, b], Op::MatMul { a: a.0, b: b.0 })
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let (m, n) = self.dims2(a, "transpose")?;
        let mut out = vec![0.0; m * n];
        transpose_raw(&self.nodes[a.0].data, m, n, &mut out);
        self.push_op("transpose", out, vec![n, m], &[a], Op::Transpose { a: a.0 })
    }

    fn zip_elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TensorResult<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_op(op_name, out, shape, &[a, b], op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (r, c) = self.dims2(a, "add_row")?;
        if self.shape(b) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bvec = &self.nodes[b.0].data;
        let mut out = Vec::with_capacity(r * c);
        for row in self.nodes[a.0].data.chunks_exact(c) {
            out.extend(row.iter().zip(bvec.iter()).map(|(&x, &y)| x + y));
        }
        self.push_op("add_row", out, vec![r, c], &[a, b], Op::AddRow { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorResult<TensorId> {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("scale", out, shape, &[a], Op::Scale { a: a.0, factor })
    }

    pub fn activation(&mut self, a: TensorId, kind: Activation) -> TensorResult<TensorId> {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| kind.apply(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("activation", out, shape, &[a], Op::Activation { a: a.0, kind })
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorResult<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArg {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, len, inner) = fiber_dims(&shape, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    out[at(j)] /= denom;
                }
            }
        }
        self.push_op("softmax", out, shape, &[a], Op::Softmax { a: a.0, axis })
    }

    /// Row-wise softmax of a square score matrix where row `i` is a
    /// distribution over columns `0..=i`; later columns are exactly zero.
    pub fn causal_softmax(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let (t, t2) = self.dims2(a, "causal_softmax")?;
        if t != t2 {
            return Err(TensorError::InvalidArg {
                op: "causal_softmax",
                msg: format!("expected square matrix, got {t}x{t2}"),
            });
        }
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; t * t];
        for i in 0..t {
            let row = &src[i * t..i * t + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * t + j] = e;
                denom += e;
            }
            for j in 0..=i {
                out[i * t + j] /= denom;
            }
        }
        self.push_op("causal_softmax", out, vec![t, t], &[a], Op::CausalSoftmax { a: a.0 })
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// the affine gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> TensorResult<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.shape(gain).to_vec(),
            });
        }
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out.push((row[j] - mean) * inv_std * g[j] + b[j]);
            }
        }
        self.push_op(
            "layer_norm",
            out,
            self.shape(x).to_vec(),
            &[x, gain, bias],
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps },
        )
    }

    /// Mean negative log-likelihood of `targets` under `logits` rows, taken
    /// over positions where `mask` is true.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> TensorResult<TensorId> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::InvalidArg {
                op: "cross_entropy",
                msg: format!(
                    "logits have {t} rows but targets/mask have {}/{}",
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let unmasked = mask.iter().filter(|&&m| m).count();
        if unmasked == 0 {
            return Err(TensorError::AllMasked);
        }
        let src = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for (i, row) in src.chunks_exact(v).enumerate() {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(TensorError::TargetOutOfVocab {
                    position: i,
                    target: targets[i],
                    vocab: v,
                });
            }
            total += log_sum_exp(row) - row[targets[i]];
        }
        let loss = total / unmasked as f64;
        self.push_op(
            "cross_entropy",
            vec![loss],
            vec![1],
            &[logits],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push_op("sum", vec![s], vec![1], &[a], Op::Sum { a: a.0 })
    }

    /// Gathers rows of an embedding table: out[i] = table[ids[i]].
    pub fn embed_lookup(&mut self, table: TensorId, ids: &[usize]) -> TensorResult<TensorId> {
        let (v, d) = self.dims2(table, "embed_lookup")?;
        if ids.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "embed_lookup",
                msg: "empty id list".to_string(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(TensorError::InvalidArg {
                op: "embed_lookup",
                msg: format!("token id {bad} out of range for vocab size {v}"),
            });
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push_op(
            "embed_lookup",
            out,
            vec![ids.len(), d],
            &[table],
            Op::EmbedLookup { table: table.0, ids: ids.to_vec() },
        )
    }

    pub fn slice_rows(&mut self, a: TensorId, from: usize, to: usize) -> TensorResult<TensorId> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if from >= to || to > m {
            return Err(TensorError::InvalidArg {
                op: "slice_rows",
                msg: format!("row range {from}..{to} invalid for {m} rows"),
            });
        }
        let out = self.nodes[a.0].data[from * n..to * n].to_vec();
        self.push_op(
            "slice_rows",
            out,
            vec![to - from, n],
            &[a],
            Op::SliceRows { a: a.0, from },
        )
    }

    pub fn slice_cols(&mut self, a: TensorId, from: usize, to: usize) -> TensorResult<TensorId> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if from >= to || to > n {
            return Err(TensorError::InvalidArg {
                op: "slice_cols",
                msg: format!("column range {from}..{to} invalid for {n} columns"),
            });
        }
        let w = to - from;
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(m * w);
        for row in src.chunks_exact(n) {
            out.extend_from_slice(&row[from..to]);
        }
        self.push_op(
            "slice_cols",
            out,
            vec![m, w],
            &[a],
            Op::SliceCols { a: a.0, from },
        )
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorResult<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "concat_cols",
                msg: "no parts".to_string(),
            });
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for row in 0..m {
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                let src = &self.nodes[p.0].data;
                out.extend_from_slice(&src[row * w..(row + 1) * w]);
            }
        }
        self.push_op(
            "concat_cols",
            out,
            vec![m, total],
            parts,
            Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() },
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Populates gradients of every tracked node reachable from `loss`.
    /// Calling again without [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, loss: TensorId) -> TensorResult<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotAScalar {
                op: "backward",
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(TensorError::InvalidArg {
                op: "backward",
                msg: "loss does not depend on any tracked tensor".to_string(),
            });
        }
        self.backward_done = true;
        for node in self.nodes.iter_mut() {
            if node.needs_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        self.nodes[loss.0].grad.as_mut().expect("loss tracked")[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &grad, &op)?;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    /// Clears gradient buffers so a fresh backward pass may run.
    pub fn reset_grads(&mut self) {
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn add_to_grad(&mut self, target: usize, contribution: &[f64]) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let g = self.nodes[target]
            .grad
            .get_or_insert_with(|| vec![0.0; contribution.len()]);
        for (dst, src) in g.iter_mut().zip(contribution.iter()) {
            *dst += src;
        }
    }

    fn propagate(&mut self, node: usize, grad: &[f64], op: &Op) -> TensorResult<()> {
        match *op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let m = self.nodes[a].shape[0];
                let k = self.nodes[a].shape[1];
                let n = self.nodes[b].shape[1];
                if self.nodes[a].needs_grad {
                    // dA = dC · B^T
                    let mut bt = vec![0.0; k * n];
                    transpose_raw(&self.nodes[b].data, k, n, &mut bt);
                    let mut da = vec![0.0; m * k];
                    matmul_raw(grad, &bt, m, n, k, &mut da);
                    self.add_to_grad(a, &da);
                }
                if self.nodes[b].needs_grad {
                    // dB = A^T · dC
                    let mut at = vec![0.0; m * k];
                    transpose_raw(&self.nodes[a].data, m, k, &mut at);
                    let mut db = vec![0.0; k * n];
                    matmul_raw(&at, grad, k, m, n, &mut db);
                    self.add_to_grad(b, &db);
                }
            }

            Op::Transpose { a } => {
                let (n, m) = (self.nodes[node].shape[0], self.nodes[node].shape[1]);
                let mut da = vec![0.0; m * n];
                transpose_raw(grad, n, m, &mut da);
                self.add_to_grad(a, &da);
            }

            Op::Add { a, b } => {
                self.add_to_grad(a, grad);
                self.add_to_grad(b, grad);
            }

            Op::Sub { a, b } => {
                self.add_to_grad(a, grad);
                if self.nodes[b].needs_grad {
                    let neg: Vec<f64> = grad.iter().map(|&g| -g).collect();
                    self.add_to_grad(b, &neg);
                }
            }

            Op::Mul { a, b } => {
                if self.nodes[a].needs_grad {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[b].data.iter())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.add_to_grad(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let db: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[a].data.iter())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.add_to_grad(b, &db);
                }
            }

            Op::AddRow { a, b } => {
                self.add_to_grad(a, grad);
                if self.nodes[b].needs_grad {
                    let c = self.nodes[b].data.len();
                    let mut db = vec![0.0; c];
                    for row in grad.chunks_exact(c) {
                        for (d, &g) in db.iter_mut().zip(row.iter()) {
                            *d += g;
                        }
                    }
                    self.add_to_grad(b, &db);
                }
            }

            Op::Scale { a, factor } => {
                let da: Vec<f64> = grad.iter().map(|&g| g * factor).collect();
                self.add_to_grad(a, &da);
            }

            Op::Activation { a, kind } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[a].data.iter().zip(self.nodes[node].data.iter()))
                    .map(|(&g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                self.add_to_grad(a, &da);
            }

            Op::Softmax { a, axis } => {
                let shape = self.nodes[node].shape.clone();
                let (outer, len, inner) = fiber_dims(&shape, axis);
                let out = &self.nodes[node].data;
                let mut da = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += grad[at(j)] * out[at(j)];
                        }
                        for j in 0..len {
                            da[at(j)] = out[at(j)] * (grad[at(j)] - dot);
                        }
                    }
                }
                self.add_to_grad(a, &da);
            }

            Op::CausalSoftmax { a } => {
                let t = self.nodes[node].shape[0];
                let out = &self.nodes[node].data;
                let mut da = vec![0.0; t * t];
                for i in 0..t {
                    let row = &out[i * t..i * t + i + 1];
                    let grow = &grad[i * t..i * t + i + 1];
                    let dot: f64 = row.iter().zip(grow.iter()).map(|(&s, &g)| s * g).sum();
                    for j in 0..=i {
                        da[i * t + j] = row[j] * (grow[j] - dot);
                    }
                }
                self.add_to_grad(a, &da);
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *self.nodes[node].shape.last().expect("non-empty");
                let src = self.nodes[x].data.clone();
                let g_affine = self.nodes[gain].data.clone();
                let rows = src.len() / d;
                let mut dx = vec![0.0; src.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let grow = &grad[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = grow
                        .iter()
                        .zip(g_affine.iter())
                        .map(|(&g, &a)| g * a)
                        .collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dx[r * d + j] = inv_std / df
                            * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.add_to_grad(x, &dx);
                self.add_to_grad(gain, &dgain);
                self.add_to_grad(bias, &dbias);
            }

            Op::CrossEntropy { logits, ref targets, ref mask } => {
                let v = self.nodes[logits].shape[1];
                let src = &self.nodes[logits].data;
                let unmasked = mask.iter().filter(|&&m| m).count() as f64;
                let scale = grad[0] / unmasked;
                let mut da = vec![0.0; src.len()];
                for (i, row) in src.chunks_exact(v).enumerate() {
                    if !mask[i] {
                        continue;
                    }
                    let lse = log_sum_exp(row);
                    for j in 0..v {
                        let p = (row[j] - lse).exp();
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        da[i * v + j] = scale * (p - onehot);
                    }
                }
                self.add_to_grad(logits, &da);
            }

            Op::Sum { a } => {
                let da = vec![grad[0]; self.nodes[a].data.len()];
                self.add_to_grad(a, &da);
            }

            Op::EmbedLookup { table, ref ids } => {
                if self.nodes[table].needs_grad {
                    let d = self.nodes[table].shape[1];
                    let mut dt = vec![0.0; self.nodes[table].data.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += grad[row * d + j];
                        }
                    }
                    self.add_to_grad(table, &dt);
                }
            }

            Op::SliceRows { a, from } => {
                if self.nodes[a].needs_grad {
                    let n = self.nodes[a].shape[1];
                    let mut da = vec![0.0; self.nodes[a].data.len()];
                    da[from * n..from * n + grad.len()].copy_from_slice(grad);
                    self.add_to_grad(a, &da);
                }
            }

            Op::SliceCols { a, from } => {
                if self.nodes[a].needs_grad {
                    let n = self.nodes[a].shape[1];
                    let w = self.nodes[node].shape[1];
                    let mut da = vec![0.0; self.nodes[a].data.len()];
                    for (row, grow) in grad.chunks_exact(w).enumerate() {
                        da[row * n + from..row * n + from + w].copy_from_slice(grow);
                    }
                    self.add_to_grad(a, &da);
                }
            }

            Op::ConcatCols { ref parts } => {
                let m = self.nodes[node].shape[0];
                let total = self.nodes[node].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    if self.nodes[p].needs_grad {
                        let mut dp = vec![0.0; m * w];
                        for row in 0..m {
                            dp[row * w..(row + 1) * w]
                                .copy_from_slice(&grad[row * total + offset..row * total + offset + w]);
                        }
                        self.add_to_grad(p, &dp);
                    }
                    offset += w;
                }
            }
        }
        Ok(())
    }
}

fn fiber_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        tape.leaf_owned(shape, data, true).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let eye = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let prod = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.data(prod), &[1.0, 2.0, 3.0, 4.0]);

        let proj = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let x = leaf(&mut tape, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let px = tape.matmul(proj, x).unwrap();
        assert_eq!(tape.data(px), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 2]
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_associativity_on_random_triples() {
        let mut vals = 0.37_f64;
        let mut next = || {
            vals = (vals * 997.0 + 0.1234).fract();
            vals * 2.0 - 1.0
        };
        for _ in 0..5 {
            let mut tape = Tape::new();
            let a = leaf(&mut tape, vec![3, 4], (0..12).map(|_| next()).collect());
            let b = leaf(&mut tape, vec![4, 5], (0..20).map(|_| next()).collect());
            let c = leaf(&mut tape, vec![5, 2], (0..10).map(|_| next()).collect());
            let ab = tape.matmul(a, b).unwrap();
            let ab_c = tape.matmul(ab, c).unwrap();
            let bc = tape.matmul(b, c).unwrap();
            let a_bc = tape.matmul(a, bc).unwrap();
            for (x, y) in tape.data(ab_c).iter().zip(tape.data(a_bc).iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn activation_basics() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.0, -3.0, 3.0]);
        let s = tape.activation(x, Activation::Sigmoid).unwrap();
        assert_eq!(tape.data(s)[0], 0.5);
        let r = tape.activation(x, Activation::Relu).unwrap();
        assert_eq!(tape.data(r), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn sigmoid_symmetry_identity() {
        let mut tape = Tape::new();
        let xs = vec![-4.2, -1.0, -0.3, 0.0, 0.7, 2.5, 6.0];
        let neg: Vec<f64> = xs.iter().map(|&v| -v).collect();
        let a = leaf(&mut tape, vec![7], xs);
        let b = leaf(&mut tape, vec![7], neg);
        let sa = tape.activation(a, Activation::Sigmoid).unwrap();
        let sb = tape.activation(b, Activation::Sigmoid).unwrap();
        for (x, y) in tape.data(sa).iter().zip(tape.data(sb).iter()) {
            assert!((x + y - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_uniform_and_dominant() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![3], vec![0.0, 0.0, 0.0]);
        let s = tape.softmax(a, 0).unwrap();
        for &v in tape.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = leaf(&mut tape, vec![3], vec![1000.0, 0.0, 0.0]);
        let sb = tape.softmax(b, 0).unwrap();
        let out = tape.data(sb);
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12 && out[2].abs() < 1e-12);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = leaf(
            &mut tape,
            vec![2, 3],
            vec![1.0, -2.0, 0.5, 300.0, -300.0, 0.0],
        );
        let s = tape.softmax(a, 1).unwrap();
        for row in tape.data(s).chunks_exact(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let x = vec![0.3, -1.2, 2.4, 0.0];
        let shifted: Vec<f64> = x.iter().map(|&v| v + 17.5).collect();
        let a = leaf(&mut tape, vec![4], x);
        let b = leaf(&mut tape, vec![4], shifted);
        let sa = tape.softmax(a, 0).unwrap();
        let sb = tape.softmax(b, 0).unwrap();
        for (x, y) in tape.data(sa).iter().zip(tape.data(sb).iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![3.0; 4]);
        let g = leaf(&mut tape, vec![4], vec![1.0; 4]);
        let b = leaf(&mut tape, vec![4], vec![0.0; 4]);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.data(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![1.0, -1.0]);
        let g = leaf(&mut tape, vec![2], vec![1.0, 1.0]);
        let b = leaf(&mut tape, vec![2], vec![0.0, 0.0]);
        let y = tape.layer_norm(x, g, b, 1e-8).unwrap();
        let out = tape.data(y);
        assert!((out[0] - 1.0).abs() < 1e-4);
        assert!((out[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_output_statistics() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64 * 0.77).sin() * 3.0 + 1.0).collect();
        let x = leaf(&mut tape, vec![2, 8], data);
        let g = leaf(&mut tape, vec![8], vec![1.0; 8]);
        let b = leaf(&mut tape, vec![8], vec![0.0; 8]);
        let y = tape.layer_norm(x, g, b, 1e-9).unwrap();
        for row in tape.data(y).chunks_exact(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        // One-hot with a huge margin: loss ~ 0.
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, vec![2, 3], vec![50.0, 0.0, 0.0, 0.0, 50.0, 0.0]);
        let loss = tape.cross_entropy(logits, &[0, 1], &[true, true]).unwrap();
        assert!(tape.data(loss)[0].abs() < 1e-12);

        // Uniform logits over V=4: loss = ln 4.
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, vec![1, 4], vec![0.0; 4]);
        let loss = tape.cross_entropy(logits, &[2], &[true]).unwrap();
        assert!((tape.data(loss)[0] - 4.0_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_matches_per_position_oracle() {
        let data: Vec<f64> = (0..12).map(|i| ((i * 7 + 3) as f64 * 0.31).sin() * 2.0).collect();
        let targets = [2usize, 0, 3];
        let mask = [true, false, true];

        // Oracle: direct -log softmax at each unmasked position.
        let mut expected = 0.0;
        let mut count = 0;
        for (i, row) in data.chunks_exact(4).enumerate() {
            if !mask[i] {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            let p = (row[targets[i]] - max).exp() / denom;
            expected += -p.ln();
            count += 1;
        }
        expected /= count as f64;

        let mut tape = Tape::new();
        let logits = leaf(&mut tape, vec![3, 4], data);
        let loss = tape.cross_entropy(logits, &targets, &mask).unwrap();
        assert!((tape.data(loss)[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_error_paths() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        assert_eq!(
            tape.cross_entropy(logits, &[0, 1], &[false, false]),
            Err(TensorError::AllMasked)
        );
        assert_eq!(
            tape.cross_entropy(logits, &[0, 7], &[true, true]),
            Err(TensorError::TargetOutOfVocab {
                position: 1,
                target: 7,
                vocab: 3
            })
        );
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_half_square_gives_x() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![1.5, -2.0, 0.25]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn backward_twice_errors_and_reset_allows_again() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss), Err(TensorError::BackwardTwice));
        tape.reset_grads();
        assert!(tape.grad(x).is_none());
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NotAScalar { .. })
        ));
    }

    #[test]
    fn causal_softmax_rows_are_masked_distributions() {
        let mut tape = Tape::new();
        let x = leaf(
            &mut tape,
            vec![3, 3],
            vec![0.5, 9.0, -9.0, 1.0, 2.0, 99.0, -1.0, 0.0, 1.0],
        );
        let s = tape.causal_softmax(x).unwrap();
        let out = tape.data(s);
        assert_eq!(out[..3], [1.0, 0.0, 0.0]);
        assert_eq!(out[5], 0.0);
        for i in 0..3 {
            let sum: f64 = out[i * 3..i * 3 + i + 1].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_lookup_and_scatter_grad() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = tape.embed_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.data(rows), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(rows).unwrap();
        tape.backward(loss).unwrap();
        // Row 2 looked up twice, row 0 once, row 1 never.
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 4], (0..8).map(|v| v as f64).collect());
        let left = tape.slice_cols(x, 0, 2).unwrap();
        let right = tape.slice_cols(x, 2, 4).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.data(back), tape.data(x));
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut tape = Tape::new();
        let big = leaf(&mut tape, vec![1, 1], vec![1e308]);
        let two = leaf(&mut tape, vec![1, 1], vec![10.0]);
        assert_eq!(
            tape.mul(big, two),
            Err(TensorError::NonFinite { op: "mul" })
        );
    }

    #[test]
    fn deterministic_replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape
                .leaf_owned(vec![4, 4], (0..16).map(|i| (i as f64 * 0.37).sin()).collect(), true)
                .unwrap();
            let b = tape
                .leaf_owned(vec![4, 4], (0..16).map(|i| (i as f64 * 0.11).cos()).collect(), true)
                .unwrap();
            let c = tape.matmul(a, b).unwrap();
            let s = tape.activation(c, Activation::Gelu).unwrap();
            let loss = tape.sum(s).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.data(loss).to_vec(),
                tape.grad(a).unwrap().to_vec(),
                tape.grad(b).unwrap().to_vec(),
            )
        };
        let first = run();
        let second = run();
        assert_eq!(first, second);
    }
}
