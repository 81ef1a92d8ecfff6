//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation executed during one forward pass as a
//! node appended to a flat list, so the node order is already topological.
//! [`Graph::backward`] walks the list once in reverse and accumulates
//! gradients into every node that requires them. The graph is rebuilt for
//! every forward pass.

use rand::Rng;

use super::array::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{config_err, dim_err, validation_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train or inference behaviour for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Sum,
    Mean,
    Max,
    Concat,
    Narrow,
    BatchNorm,
    Dropout,
    SoftmaxCrossEntropy,
    Gather,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Max,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::BatchNorm,
        OpKind::Dropout,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Gather,
        OpKind::Reshape,
    ];

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Dropout => "dropout",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reduce {
        kind: Reduction,
        input: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    Gather {
        input: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Reduce { kind, .. } => match kind {
                Reduction::Sum => OpKind::Sum,
                Reduction::Mean => OpKind::Mean,
                Reduction::Max => OpKind::Max,
            },
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    faulty: Option<OpKind>,
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `b` broadcasts onto `a` when its shape is a suffix of `a`'s.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
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

    /// Makes every backward rule of `kind` emit negated gradients. Used only
    /// to check that the verification harness notices a broken kernel.
    #[doc(hidden)]
    pub fn inject_sign_fault(&mut self, kind: OpKind) {
        self.faulty = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err!(
                "matmul inner dimensions differ: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, kind: OpKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(dim_err!(
                "{} cannot broadcast {:?} onto {:?}",
                kind.name(),
                sb,
                sa
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let f: fn(f64, f64) -> f64 = match kind {
            OpKind::Add => |x, y| x + y,
            OpKind::Sub => |x, y| x - y,
            _ => |x, y| x * y,
        };
        let out: Vec<f64> = av
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bv).map(move |(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::new(sa.to_vec(), out)?;
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    /// `a + b`, where `b`'s shape must equal `a`'s trailing dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a);
        let out = value.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(value.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a);
        let out = value.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(value.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Reduces `axis` away. Max routes its gradient to the first maximal
    /// element along the axis.
    pub fn reduce(&mut self, kind: Reduction, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!(
                "reduce axis {} out of range for shape {:?}",
                axis,
                shape
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(dim_err!("reduce over empty axis {} of {:?}", axis, shape));
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            Reduction::Sum | Reduction::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if kind == Reduction::Mean {
                    let inv = 1.0 / len as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            Reduction::Max => {
                argmax = vec![0usize; outer * inner];
                for o in 0..outer {
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    dst.copy_from_slice(&x[o * len * inner..(o * len + 1) * inner]);
                    let arg = &mut argmax[o * inner..(o + 1) * inner];
                    for l in 1..len {
                        let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for i in 0..inner {
                            // strict comparison keeps the lowest index on ties
                            if src[i] > dst[i] {
                                dst[i] = src[i];
                                arg[i] = l;
                            }
                        }
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Reduce {
                kind,
                input,
                axis,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Sum, input, axis)
    }

    pub fn mean(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Mean, input, axis)
    }

    pub fn max(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Max, input, axis)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel();
        let flat = self.reshape(input, &[n])?;
        self.sum(flat, 0)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {} out of range for {:?}", axis, base));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(dim_err!(
                    "concat along axis {}: {:?} incompatible with {:?}",
                    axis,
                    s,
                    base
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`; the inverse of [`Graph::concat`].
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow [{}, {}) on axis {} of {:?}",
                start,
                start + len,
                axis,
                shape
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&x[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Narrow { input, axis, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Picks rows of a matrix (repeats allowed). Backward scatter-adds.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(input).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(dim_err!("gather row {} out of range for {} rows", bad, n));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&x[r * d..(r + 1) * d]);
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::Gather {
                input,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Batch norm over the rows of a `[batch × features]` matrix with a
    /// learnable per-feature scale and shift.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let (n, c) = self.value(input).dims2()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!(
                "batch_norm scale {:?}/shift {:?} do not match {} features",
                self.shape(gamma),
                self.shape(beta),
                c
            ));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(dim_err!("batch_norm running stats width differs from {}", c));
        }
        let x = self.value(input).data();
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(config_err!(
                        "batch_norm in train mode needs a batch of at least 2, got {}",
                        n
                    ));
                }
                let mut mean = vec![0.0; c];
                for row in x.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in x.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let unbias = n as f64 / (n as f64 - 1.0);
                for j in 0..c {
                    stats.mean[j] = (1.0 - cfg.momentum) * stats.mean[j] + cfg.momentum * mean[j];
                    stats.var[j] =
                        (1.0 - cfg.momentum) * stats.var[j] + cfg.momentum * var[j] * unbias;
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
                (mean, inv_std)
            }
            Mode::Eval => (
                stats.mean.clone(),
                stats.var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect(),
            ),
        };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let h = (x[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(vec![n, c], out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(config_err!("dropout probability must be in [0, 1), got {}", p));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - p);
        let x = self.value(input);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    /// Mean softmax cross-entropy of `[batch × K]` logits against one-hot rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, one_hot: &Tensor) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if one_hot.shape() != [b, k] {
            return Err(dim_err!(
                "targets {:?} do not match logits {:?}",
                one_hot.shape(),
                [b, k]
            ));
        }
        let mut targets = Vec::with_capacity(b);
        for i in 0..b {
            let row = one_hot.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != k - 1 {
                return Err(validation_err!("target row {} is not one-hot", i));
            }
            targets.push(row.iter().position(|&v| v == 1.0).unwrap());
        }
        self.softmax_cross_entropy_indices(logits, &targets)
    }

    /// Same as [`Graph::softmax_cross_entropy`] with class indices as targets.
    pub fn softmax_cross_entropy_indices(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(dim_err!("{} targets for {} logit rows", targets.len(), b));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(validation_err!("target class {} out of range for {} classes", t, k));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &x[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() + mx - row[targets[i]];
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Backpropagates from a one-element `loss`, replacing any gradients
    /// from an earlier call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(mut gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if self.faulty == Some(node.op.kind()) {
                gout.iter_mut().for_each(|v| *v = -*v);
            }
            self.backward_node(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulates into the gradient buffer of `v` if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.shape()[1];
                let bv = nodes[b.0].value.data();
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| gemm_nt_acc(gout, bv, ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn_acc(av, gout, gb, m, k, n));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
                });
                let nb = nodes[b.0].value.numel();
                acc(*b, &mut |gb| {
                    for chunk in gout.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(g, d)| *g += sign * d);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let nb = bv.len();
                acc(*a, &mut |ga| {
                    for (ga_c, go_c) in ga.chunks_mut(nb).zip(gout.chunks(nb)) {
                        for ((g, d), y) in ga_c.iter_mut().zip(go_c).zip(bv) {
                            *g += d * y;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (a_c, go_c) in av.chunks(nb).zip(gout.chunks(nb)) {
                        for ((g, d), x) in gb.iter_mut().zip(go_c).zip(a_c) {
                            *g += d * x;
                        }
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(gout).for_each(|(g, d)| *g += s * d);
            }),
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for ((g, d), &v) in ga.iter_mut().zip(gout).zip(x) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Reduce {
                kind,
                input,
                axis,
                argmax,
            } => {
                let (outer, len, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                acc(*input, &mut |gi| match kind {
                    Reduction::Sum | Reduction::Mean => {
                        let s = if *kind == Reduction::Mean { 1.0 / len as f64 } else { 1.0 };
                        for o in 0..outer {
                            let src = &gout[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let dst = &mut gi[(o * len + l) * inner..(o * len + l + 1) * inner];
                                dst.iter_mut().zip(src).for_each(|(g, d)| *g += s * d);
                            }
                        }
                    }
                    Reduction::Max => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let l = argmax[o * inner + i];
                                gi[(o * len + l) * inner + i] += gout[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            let src = &gout[from..from + len * inner];
                            let dst = &mut gv[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let (outer, full, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*input, &mut |gi| {
                    for o in 0..outer {
                        let to = (o * full + start) * inner;
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        gi[to..to + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
            }),
            Op::Gather { input, rows } => {
                let d = nodes[input.0].value.shape()[1];
                acc(*input, &mut |gi| {
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &gout[k * d..(k + 1) * d];
                        gi[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, v)| *g += v);
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c) = nodes[input.0].value.dims2().unwrap();
                let gam = nodes[gamma.0].value.data();
                let mut sum_d = vec![0.0; c];
                let mut sum_dx = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        let d = gout[i * c + j];
                        sum_d[j] += d;
                        sum_dx[j] += d * xhat[i * c + j];
                    }
                }
                acc(*gamma, &mut |gg| {
                    gg.iter_mut().zip(&sum_dx).for_each(|(g, v)| *g += v);
                });
                acc(*beta, &mut |gb| {
                    gb.iter_mut().zip(&sum_d).for_each(|(g, v)| *g += v);
                });
                acc(*input, &mut |gi| {
                    let nf = n as f64;
                    for i in 0..n {
                        for j in 0..c {
                            let d = gout[i * c + j];
                            gi[i * c + j] += if *train {
                                gam[j] * inv_std[j] / nf
                                    * (nf * d - sum_d[j] - xhat[i * c + j] * sum_dx[j])
                            } else {
                                gam[j] * inv_std[j] * d
                            };
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => acc(*input, &mut |gi| {
                for ((g, d), m) in gi.iter_mut().zip(gout).zip(mask) {
                    *g += d * m;
                }
            }),
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
            } => {
                let k = nodes[logits.0].value.shape()[1];
                let b = targets.len();
                let s = gout[0] / b as f64;
                acc(*logits, &mut |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let y = if j == t { 1.0 } else { 0.0 };
                            gl[i * k + j] += s * (probs[i * k + j] - y);
                        }
                    }
                });
            }
        }
    }
}

/// Returns an error if `v`'s value contains NaN or infinity.
pub fn ensure_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{} is not finite", what)))
    }
}
