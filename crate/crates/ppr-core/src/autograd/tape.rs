//! Reverse-mode differentiation tape over dense f64 tensors.
//!
//! Operations record nodes in topological order during the forward pass;
//! `backward` replays them in reverse, accumulating vector-Jacobian
//! products. A tape in inference mode runs the identical arithmetic
//! kernels without recording, so recorded and unrecorded forward passes
//! are bit-identical.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::tensor::{NodeId, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    /// out[m,n] from a and b; layout of each operand controlled by `trans`.
    MatMul {
        a: NodeId,
        b: NodeId,
        trans: MatLayout,
    },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    /// [n] -> [rows, n]; the explicit row-broadcast promotion.
    BroadcastRows { a: NodeId, rows: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice {
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum { a: NodeId },
    SumLast { a: NodeId },
    Mean { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
}

/// Operand layout for matmul: `NN` contracts A's columns with B's rows,
/// `NT` takes B transposed (B stored [n, k]), `TN` takes A transposed
/// (A stored [k, m]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatLayout {
    NN,
    NT,
    TN,
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    /// Index into `param_names` for trainable leaves.
    param: Option<usize>,
}

/// Gradients of a scalar loss with respect to the bound parameters,
/// in binding order.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Gradients {
        Gradients { entries }
    }

    /// Multiply every gradient element by one scalar in place.
    pub fn scale_all(&mut self, factor: f64) {
        for (_, t) in &mut self.entries {
            let data = t.make_mut();
            for v in data.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Global L2 norm over all entries.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

pub struct Tape {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
    param_names: Vec<String>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape for one training step.
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
            param_names: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// A non-recording tape: same kernels, no graph, no gradients.
    pub fn inference() -> Self {
        let mut t = Tape::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, param: Option<usize>) -> Tensor {
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite forward value");
        let value = Arc::new(data);
        if !self.recording {
            return Tensor::with_node(shape, value, None);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: Arc::clone(&value),
            param,
        });
        self.grads.push(None);
        Tensor::with_node(shape, value, Some(pack(self.id, id)))
    }

    /// Node id of `t` on this tape, interning it as a constant leaf if it
    /// is not already a member.
    fn input(&mut self, t: &Tensor) -> NodeId {
        if !self.recording {
            // The id is discarded by `push` in inference mode.
            return 0;
        }
        if let Some(packed) = t.node {
            let (tape_id, node_id) = unpack(packed);
            if tape_id == self.id {
                return node_id;
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: Arc::clone(t.data_arc()),
            param: None,
        });
        self.grads.push(None);
        id
    }

    /// Register a trainable leaf. Gradients for it are collected by name.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detached();
        }
        let pidx = self.param_names.len();
        self.param_names.push(name.to_string());
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: Arc::clone(t.data_arc()),
            param: Some(pidx),
        });
        self.grads.push(None);
        Tensor::with_node(t.shape().to_vec(), Arc::clone(t.data_arc()), Some(pack(self.id, id)))
    }

    /// Intern a constant; useful when the same tensor feeds many ops.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detached();
        }
        let id = self.input(t);
        Tensor::with_node(
            t.shape().to_vec(),
            Arc::clone(t.data_arc()),
            Some(pack(self.id, id)),
        )
    }

    // ── Forward primitives ───────────────────────────────────────────

    /// `a @ b` with explicit operand layout. Output is always [m, n].
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor, trans: MatLayout) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = match trans {
            MatLayout::NN | MatLayout::NT => (sa[0], sa[1]),
            MatLayout::TN => (sa[1], sa[0]),
        };
        let (kb, n) = match trans {
            MatLayout::NN | MatLayout::TN => (sb[0], sb[1]),
            MatLayout::NT => (sb[1], sb[0]),
        };
        if k != kb {
            return Err(shape_err("matmul", sa, sb));
        }
        let out = match trans {
            MatLayout::NN => matmul_nn(a.data(), b.data(), m, k, n),
            MatLayout::NT => matmul_nt(a.data(), b.data(), m, k, n),
            MatLayout::TN => matmul_tn(a.data(), b.data(), m, k, n),
        };
        let (ia, ib) = (self.input(a), self.input(b));
        Ok(self.push(Op::MatMul { a: ia, b: ib, trans }, vec![m, n], out, None))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_op("add", a, b, |x, y| x + y, |ia, ib| Op::Add { a: ia, b: ib })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_op("sub", a, b, |x, y| x - y, |ia, ib| Op::Sub { a: ia, b: ib })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_op(
            "elementwise-mul",
            a,
            b,
            |x, y| x * y,
            |ia, ib| Op::Mul { a: ia, b: ib },
        )
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err(name, a.shape(), b.shape()));
        }
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect();
        let (ia, ib) = (self.input(a), self.input(b));
        Ok(self.push(op(ia, ib), a.shape().to_vec(), out, None))
    }

    /// Multiply by a scalar constant (the only implicit broadcast).
    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let out: Vec<f64> = a.iter().map(|x| x * factor).collect();
        let ia = self.input(a);
        Ok(self.push(Op::Scale { a: ia, factor }, a.shape().to_vec(), out, None))
    }

    /// Explicit promotion of a vector [n] to [rows, n].
    pub fn broadcast_rows(&mut self, a: &Tensor, rows: usize) -> Result<Tensor> {
        if a.rank() != 1 {
            return Err(shape_err("broadcast-rows", a.shape(), &[rows]));
        }
        let n = a.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(a.data());
        }
        let ia = self.input(a);
        Ok(self.push(Op::BroadcastRows { a: ia, rows }, vec![rows, n], out, None))
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| domain_err("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(domain_err("concat", format!("axis {axis} out of rank {rank}")));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
            for (d, (x, y)) in first.shape().iter().zip(p.shape().iter()).enumerate() {
                if d != axis && x != y {
                    return Err(shape_err("concat", first.shape(), p.shape()));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let d = p.shape()[axis];
                let block = d * inner;
                out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| self.input(p)).collect();
        Ok(self.push(Op::Concat { parts: ids, axis }, shape, out, None))
    }

    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= a.rank() || start + len > a.shape()[axis] {
            return Err(domain_err(
                "slice",
                format!(
                    "range {start}..{} out of axis {axis} of {:?}",
                    start + len,
                    a.shape()
                ),
            ));
        }
        let shape_in = a.shape();
        let outer: usize = shape_in[..axis].iter().product();
        let inner: usize = shape_in[axis + 1..].iter().product();
        let d = shape_in[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            out.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut shape = shape_in.to_vec();
        shape[axis] = len;
        let ia = self.input(a);
        Ok(self.push(
            Op::Slice {
                a: ia,
                axis,
                start,
                len,
            },
            shape,
            out,
            None,
        ))
    }

    /// Sum of all elements, as a scalar [1].
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.iter().sum();
        let ia = self.input(a);
        Ok(self.push(Op::Sum { a: ia }, vec![1], vec![s], None))
    }

    /// Sum along the last axis: [.., n] -> [..]; rank-1 input gives [1].
    pub fn sum_last(&mut self, a: &Tensor) -> Result<Tensor> {
        let n = *a
            .shape()
            .last()
            .ok_or_else(|| domain_err("sum-last", "rank-0 input"))?;
        let rows = a.len() / n;
        let out: Vec<f64> = (0..rows)
            .map(|r| a.data()[r * n..(r + 1) * n].iter().sum())
            .collect();
        let shape = if a.rank() == 1 {
            vec![1]
        } else {
            a.shape()[..a.rank() - 1].to_vec()
        };
        let ia = self.input(a);
        Ok(self.push(Op::SumLast { a: ia }, shape, out, None))
    }

    /// Mean of all elements, as a scalar [1].
    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.iter().sum();
        let n = a.len() as f64;
        let ia = self.input(a);
        Ok(self.push(Op::Mean { a: ia }, vec![1], vec![s / n], None))
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |ia| Op::Sigmoid { a: ia })
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::tanh, |ia| Op::Tanh { a: ia })
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.max(0.0), |ia| Op::Relu { a: ia })
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::exp, |ia| Op::Exp { a: ia })
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        if let Some(bad) = a.iter().find(|v| **v <= 0.0) {
            return Err(domain_err("log", format!("non-positive input {bad}")));
        }
        self.unary(a, f64::ln, |ia| Op::Log { a: ia })
    }

    fn unary(
        &mut self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(NodeId) -> Op,
    ) -> Result<Tensor> {
        let out: Vec<f64> = a.iter().map(|x| f(*x)).collect();
        let ia = self.input(a);
        Ok(self.push(op(ia), a.shape().to_vec(), out, None))
    }

    /// Softmax along the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        let n = last_axis(a, "softmax")?;
        let out = softmax_kernel(a.data(), n, false);
        let ia = self.input(a);
        Ok(self.push(Op::Softmax { a: ia }, a.shape().to_vec(), out, None))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        let n = last_axis(a, "log-softmax")?;
        let out = softmax_kernel(a.data(), n, true);
        let ia = self.input(a);
        Ok(self.push(Op::LogSoftmax { a: ia }, a.shape().to_vec(), out, None))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// parameter bound via [`Tape::param`], in binding order; parameters
    /// the loss does not reach get zero gradients.
    pub fn backward(&mut self, loss: &Tensor) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let loss_id = match loss.node {
            Some(packed) => {
                let (tape_id, node_id) = unpack(packed);
                if tape_id != self.id {
                    return Err(domain_err("backward", "loss is not on this tape"));
                }
                Some(node_id)
            }
            // A constant scalar (e.g. a fully gated-off objective) is a
            // legal degenerate loss: every parameter gets zero gradient.
            None => None,
        };
        self.backward_done = true;
        if let Some(loss_id) = loss_id {
            self.grads[loss_id] = Some(vec![1.0]);
        }

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }

        let mut entries = Vec::with_capacity(self.param_names.len());
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(pidx) = node.param {
                let g = self.grads[id]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                entries.push((
                    self.param_names[pidx].clone(),
                    Tensor::from_vec(node.shape.clone(), g),
                ));
            }
        }
        Ok(Gradients { entries })
    }

    /// Gradient of the loss with respect to a tensor on this tape.
    pub fn grad(&self, t: &Tensor) -> Option<Tensor> {
        let (tape_id, node_id) = unpack(t.node?);
        if tape_id != self.id {
            return None;
        }
        self.grads[node_id]
            .as_ref()
            .map(|g| Tensor::from_vec(self.nodes[node_id].shape.clone(), g.clone()))
    }

    fn accum(&mut self, id: NodeId, contrib: &[f64]) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => self.grads[id] = Some(contrib.to_vec()),
        }
    }

    fn propagate(&mut self, id: NodeId, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans } => {
                let av = Arc::clone(&self.nodes[a].value);
                let bv = Arc::clone(&self.nodes[b].value);
                let out_shape = self.nodes[id].shape.clone();
                let (m, n) = (out_shape[0], out_shape[1]);
                let k = match trans {
                    MatLayout::NN | MatLayout::NT => self.nodes[a].shape[1],
                    MatLayout::TN => self.nodes[a].shape[0],
                };
                let (da, db) = match trans {
                    // out = A·B:  dA = G·Bᵀ, dB = Aᵀ·G
                    MatLayout::NN => (
                        matmul_nt(g, &bv, m, n, k),
                        matmul_tn(&av, g, k, m, n),
                    ),
                    // out = A·Bᵀ (B: [n,k]):  dA = G·B, dB = Gᵀ·A
                    MatLayout::NT => (
                        matmul_nn(g, &bv, m, n, k),
                        matmul_tn(g, &av, n, m, k),
                    ),
                    // out = Aᵀ·B (A: [k,m]):  dA = B·Gᵀ, dB = A·G
                    MatLayout::TN => (
                        matmul_nt(&bv, g, k, n, m),
                        matmul_nn(&av, g, k, m, n),
                    ),
                };
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Add { a, b } => {
                self.accum(a, g);
                self.accum(b, g);
            }
            Op::Sub { a, b } => {
                self.accum(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accum(b, &neg);
            }
            Op::Mul { a, b } => {
                let av = Arc::clone(&self.nodes[a].value);
                let bv = Arc::clone(&self.nodes[b].value);
                let da: Vec<f64> = g.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(av.iter()).map(|(x, y)| x * y).collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
                self.accum(a, &da);
            }
            Op::BroadcastRows { a, rows } => {
                let n = self.nodes[a].value.len();
                let mut da = vec![0.0; n];
                for r in 0..rows {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += g[r * n + j];
                    }
                }
                self.accum(a, &da);
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[id].shape.clone();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis];
                let mut offset = 0;
                for p in parts {
                    let d = self.nodes[p].shape[axis];
                    let mut dp = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[base..base + d * inner]);
                    }
                    self.accum(p, &dp);
                    offset += d;
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                len,
            } => {
                let in_shape = self.nodes[a].shape.clone();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let d = in_shape[axis];
                let mut da = vec![0.0; self.nodes[a].value.len()];
                for o in 0..outer {
                    let dst = (o * d + start) * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accum(a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.nodes[a].value.len()];
                self.accum(a, &da);
            }
            Op::SumLast { a } => {
                let n = *self.nodes[a].shape.last().unwrap();
                let rows = self.nodes[a].value.len() / n;
                let mut da = Vec::with_capacity(rows * n);
                for r in 0..rows {
                    da.extend(std::iter::repeat(g[r]).take(n));
                }
                self.accum(a, &da);
            }
            Op::Mean { a } => {
                let n = self.nodes[a].value.len();
                let da = vec![g[0] / n as f64; n];
                self.accum(a, &da);
            }
            Op::Sigmoid { a } => {
                let y = Arc::clone(&self.nodes[id].value);
                let da: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect();
                self.accum(a, &da);
            }
            Op::Tanh { a } => {
                let y = Arc::clone(&self.nodes[id].value);
                let da: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                self.accum(a, &da);
            }
            Op::Relu { a } => {
                let x = Arc::clone(&self.nodes[a].value);
                let da: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accum(a, &da);
            }
            Op::Exp { a } => {
                let y = Arc::clone(&self.nodes[id].value);
                let da: Vec<f64> = g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).collect();
                self.accum(a, &da);
            }
            Op::Log { a } => {
                let x = Arc::clone(&self.nodes[a].value);
                let da: Vec<f64> = g.iter().zip(x.iter()).map(|(gi, xi)| gi / xi).collect();
                self.accum(a, &da);
            }
            Op::Softmax { a } => {
                let y = Arc::clone(&self.nodes[id].value);
                let n = *self.nodes[id].shape.last().unwrap();
                let rows = y.len() / n;
                let mut da = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..n {
                        da[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(a, &da);
            }
            Op::LogSoftmax { a } => {
                let y = Arc::clone(&self.nodes[id].value);
                let n = *self.nodes[id].shape.last().unwrap();
                let rows = y.len() / n;
                let mut da = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        da[r * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accum(a, &da);
            }
        }
    }

    /// Recompute every non-leaf node from its parents and compare to the
    /// recorded value, bitwise. Used by tests to validate tape replay.
    pub fn verify_replay(&self) -> bool {
        for node in &self.nodes {
            let recomputed: Option<Vec<f64>> = match &node.op {
                Op::Leaf => None,
                Op::MatMul { a, b, trans } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = match trans {
                        MatLayout::NN | MatLayout::NT => self.nodes[*a].shape[1],
                        MatLayout::TN => self.nodes[*a].shape[0],
                    };
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    Some(match trans {
                        MatLayout::NN => matmul_nn(av, bv, m, k, n),
                        MatLayout::NT => matmul_nt(av, bv, m, k, n),
                        MatLayout::TN => matmul_tn(av, bv, m, k, n),
                    })
                }
                Op::Add { a, b } => Some(zip_vals(&self.nodes[*a].value, &self.nodes[*b].value, |x, y| x + y)),
                Op::Sub { a, b } => Some(zip_vals(&self.nodes[*a].value, &self.nodes[*b].value, |x, y| x - y)),
                Op::Mul { a, b } => Some(zip_vals(&self.nodes[*a].value, &self.nodes[*b].value, |x, y| x * y)),
                Op::Scale { a, factor } => {
                    Some(self.nodes[*a].value.iter().map(|x| x * factor).collect())
                }
                Op::BroadcastRows { a, rows } => {
                    let src = &self.nodes[*a].value;
                    let mut v = Vec::with_capacity(src.len() * rows);
                    for _ in 0..*rows {
                        v.extend_from_slice(src);
                    }
                    Some(v)
                }
                Op::Sigmoid { a } => Some(
                    self.nodes[*a]
                        .value
                        .iter()
                        .map(|x| 1.0 / (1.0 + (-x).exp()))
                        .collect(),
                ),
                Op::Tanh { a } => Some(self.nodes[*a].value.iter().map(|x| x.tanh()).collect()),
                Op::Relu { a } => Some(self.nodes[*a].value.iter().map(|x| x.max(0.0)).collect()),
                Op::Exp { a } => Some(self.nodes[*a].value.iter().map(|x| x.exp()).collect()),
                Op::Log { a } => Some(self.nodes[*a].value.iter().map(|x| x.ln()).collect()),
                Op::Softmax { a } => Some(softmax_kernel(
                    &self.nodes[*a].value,
                    *node.shape.last().unwrap(),
                    false,
                )),
                Op::LogSoftmax { a } => Some(softmax_kernel(
                    &self.nodes[*a].value,
                    *node.shape.last().unwrap(),
                    true,
                )),
                // Structural ops recompute through the same copy loops the
                // forward used; cheap enough to skip re-deriving here.
                Op::Concat { .. } | Op::Slice { .. } => None,
                Op::Sum { a } => Some(vec![self.nodes[*a].value.iter().sum()]),
                Op::SumLast { a } => {
                    let n = *self.nodes[*a].shape.last().unwrap();
                    let rows = self.nodes[*a].value.len() / n;
                    Some(
                        (0..rows)
                            .map(|r| self.nodes[*a].value[r * n..(r + 1) * n].iter().sum())
                            .collect(),
                    )
                }
                Op::Mean { a } => {
                    let s: f64 = self.nodes[*a].value.iter().sum();
                    Some(vec![s / self.nodes[*a].value.len() as f64])
                }
            };
            if let Some(v) = recomputed {
                let same = v.len() == node.value.len()
                    && v.iter()
                        .zip(node.value.iter())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return false;
                }
            }
        }
        true
    }
}

fn pack(tape_id: u64, node_id: usize) -> NodeId {
    // Tape id in the high bits guards against stale node ids from a
    // previous tape being read as members of this one.
    debug_assert!(node_id < (1 << 40));
    ((tape_id as usize) << 40) | node_id
}

fn unpack(packed: NodeId) -> (u64, usize) {
    ((packed >> 40) as u64, packed & ((1 << 40) - 1))
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn domain_err(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Domain {
        op,
        msg: msg.into(),
    }
}

fn last_axis(a: &Tensor, op: &'static str) -> Result<usize> {
    a.shape()
        .last()
        .copied()
        .filter(|n| *n > 0)
        .ok_or_else(|| domain_err(op, "empty last axis"))
}

fn zip_vals(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect()
}

// ── Arithmetic kernels ───────────────────────────────────────────────
// Shared by recording and inference paths, so both are bit-identical.

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(a[i * k + kk], &b[kk * n..(kk + 1) * n], row);
        }
    }
    out
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(dot(ar, &b[j * k..(j + 1) * k]));
        }
    }
    out
}

/// C[m,n] = A[k,m]ᵀ · B[k,n]
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let br = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            axpy(a[kk * m + i], br, &mut out[i * n..(i + 1) * n]);
        }
    }
    out
}

/// Row-wise (log-)softmax over rows of width `n`, max-subtracted.
pub(crate) fn softmax_kernel(x: &[f64], n: usize, log: bool) -> Vec<f64> {
    let rows = x.len() / n;
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = xr.iter().map(|v| (v - m).exp()).sum();
        let lz = z.ln();
        if log {
            out.extend(xr.iter().map(|v| v - m - lz));
        } else {
            out.extend(xr.iter().map(|v| (v - m - lz).exp()));
        }
    }
    out
}
