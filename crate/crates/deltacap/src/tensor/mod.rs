//! Dense f64 tensors on a reverse-mode autodiff tape.
//!
//! Values are computed eagerly as operations are recorded; `backward`
//! replays the tape in reverse, accumulating gradients additively into
//! every tracked node. Storage is row-major and flat; slice/transpose
//! copy rather than alias. One tape per training step (or per sample
//! when a batch fans out across workers), dropped afterwards.

mod kernels;
pub mod checkpoint;
pub mod fd;

use std::sync::Arc;

use crate::error::{TensorError, TensorResult};
pub use kernels::{matmul_nn, matmul_nt, matmul_tn_acc};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    /// Elementwise binary op; `b`'s shape is either equal to `a`'s or a
    /// suffix of it (tiled over the leading dims).
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    /// Divide each row of `a` ([r, c]) by the matching entry of `b` ([r]).
    RowDiv {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        c: f64,
    },
    Exp {
        a: TensorId,
    },
    Gelu {
        a: TensorId,
    },
    Softmax {
        a: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        // per-row mean and reciprocal std cached by the forward pass
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        a: TensorId,
        axis: usize,
        start: usize,
    },
    Transpose {
        a: TensorId,
        perm: Vec<usize>,
    },
    /// Sum over the last axis: [r, c] -> [r].
    RowSum {
        a: TensorId,
    },
    /// Sum of all entries -> scalar.
    Sum {
        a: TensorId,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        include: Vec<bool>,
        // softmax rows cached for the backward pass
        probs: Vec<f64>,
        n_included: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Append-only record of operations; nodes are in topological order by
/// construction, so the backward pass is a single reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if tracked.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            requires_grad,
            op,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Tracked leaf backed by shared storage (weights live outside tapes).
    pub fn leaf_shared(
        &mut self,
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> TensorResult<TensorId> {
        if numel(&shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "leaf",
                shape,
                reason: format!("storage has {} elements", data.len()),
            });
        }
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Tracked leaf owning its data.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorResult<TensorId> {
        self.leaf_shared(Arc::new(data), shape, true)
    }

    /// Untracked constant.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorResult<TensorId> {
        self.leaf_shared(Arc::new(data), shape, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        let n = numel(&shape);
        self.push(shape, vec![0.0; n], false, Op::Leaf)
    }

    // ── Operations ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b }))
    }

    fn broadcast_check(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> TensorResult<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if ok {
            Ok(())
        } else {
            Err(TensorError::DimensionMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn ewise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TensorResult<TensorId> {
        self.broadcast_check(op_name, a, b)?;
        let bn = self.value(b).len();
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % bn]))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, rg, op))
    }

    /// `a + b`, with `b` broadcast over leading dims when its shape is a
    /// suffix of `a`'s.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.ewise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.ewise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.ewise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Divide each row of `a` ([r, c]) by the matching scalar of `b` ([r]).
    pub fn row_div(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 1 || sa[0] != sb[0] {
            return Err(TensorError::DimensionMismatch {
                op: "row_div",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let d = bv[i];
            for j in 0..c {
                out[i * c + j] = av[i * c + j] / d;
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![r, c], out, rg, Op::RowDiv { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(shape, out, rg, Op::Scale { a, c })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(shape, out, rg, Op::Exp { a })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(shape, out, rg, Op::Gelu { a })
    }

    /// Numerically stable softmax along `axis`; rows sum to 1.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorResult<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape,
                reason: format!("axis {axis} is empty or out of range"),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..n {
                    m = m.max(av[base + j * inner]);
                }
                let mut denom = 0.0;
                for j in 0..n {
                    let e = (av[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    denom += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= denom;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(shape, out, rg, Op::Softmax { a, axis }))
    }

    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> TensorResult<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            shape: shape.clone(),
            reason: "rank 0 input".into(),
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::DimensionMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract(format!(
                "layer_norm: eps must be positive, got {eps}"
            )));
        }
        let rows = numel(&shape) / d;
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![0.0; xv.len()];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Gather rows of `table` ([v, d]) by id -> [ids.len(), d].
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize]) -> TensorResult<TensorId> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding_lookup",
                shape: st.to_vec(),
                reason: "table must be rank 2".into(),
            });
        }
        let (v, d) = (st[0], st[1]);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    size: v,
                });
            }
        }
        let tv = self.value(table);
        let mut out = vec![0.0; ids.len() * d];
        for (row, &id) in ids.iter().enumerate() {
            out[row * d..(row + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> TensorResult<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat: no inputs".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total_axis = 0;
        for &p in parts {
            let sp = self.shape(p);
            let compatible = sp.len() == first.len()
                && sp
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::DimensionMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: sp.to_vec(),
                });
            }
            total_axis += sp[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; numel(&shape)];
        let mut offset = 0;
        for &p in parts {
            let pn = self.shape(p)[axis];
            let pv = self.value(p);
            for o in 0..outer {
                let src = o * pn * inner;
                let dst = o * total_axis * inner + offset * inner;
                out[dst..dst + pn * inner].copy_from_slice(&pv[src..src + pn * inner]);
            }
            offset += pn;
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Copy `len` entries starting at `start` along `axis`.
    pub fn slice(
        &mut self,
        a: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> TensorResult<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: sa,
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let (outer, n, inner) = axis_split(&sa, axis);
        let mut shape = sa.clone();
        shape[axis] = len;
        let av = self.value(a);
        let mut out = vec![0.0; numel(&shape)];
        for o in 0..outer {
            let src = o * n * inner + start * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&av[src..src + len * inner]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(shape, out, rg, Op::Slice { a, axis, start }))
    }

    pub fn transpose(&mut self, a: TensorId, perm: &[usize]) -> TensorResult<TensorId> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: sa,
                reason: format!("invalid permutation {perm:?}"),
            });
        }
        let shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let out = permute_copy(self.value(a), &sa, perm);
        let rg = self.requires_grad(a);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Transpose {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Sum over the last axis of a rank-2 tensor: [r, c] -> [r].
    pub fn row_sum(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "row_sum",
                shape: sa.to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let av = self.value(a);
        let out: Vec<f64> = (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(vec![r], out, rg, Op::RowSum { a }))
    }

    /// Sum of all entries -> scalar (shape `[]`).
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(vec![], vec![s], rg, Op::Sum { a })
    }

    /// Mean of `-log softmax(logits)[target]` over included positions.
    ///
    /// `include[t] == true` means position `t` participates in the loss;
    /// excluded positions contribute nothing, to the value or the gradient.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        include: &[bool],
    ) -> TensorResult<TensorId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape: sl,
                reason: "logits must be rank 2".into(),
            });
        }
        let (t, v) = (sl[0], sl[1]);
        if targets.len() != t || include.len() != t {
            return Err(TensorError::DimensionMismatch {
                op: "cross_entropy",
                lhs: sl,
                rhs: vec![targets.len(), include.len()],
            });
        }
        let n_included = include.iter().filter(|&&m| m).count();
        if n_included == 0 {
            return Err(TensorError::DegenerateBatch);
        }
        for (pos, (&tgt, &inc)) in targets.iter().zip(include).enumerate() {
            if inc && tgt >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: tgt,
                    size: v,
                });
            }
            let _ = pos;
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for row in 0..t {
            if !include[row] {
                continue;
            }
            let r = &lv[row * v..(row + 1) * v];
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..v {
                let e = (r[j] - m).exp();
                probs[row * v + j] = e;
                denom += e;
            }
            for j in 0..v {
                probs[row * v + j] /= denom;
            }
            loss += -(probs[row * v + targets[row]]).ln();
        }
        loss /= n_included as f64;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                include: include.to_vec(),
                probs,
                n_included,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; gradients land on every tracked
    /// node and accumulate additively across shared subexpressions.
    pub fn backward(&mut self, loss: TensorId) -> TensorResult<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(TensorError::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let g = self.nodes[idx].grad.take().unwrap();
            self.apply_backward(idx, &op, &g);
            // leaves keep their gradient for the caller
            if matches!(op, Op::Leaf) {
                self.nodes[idx].grad = Some(g);
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<f64> {
        let n = numel(&self.nodes[id.0].shape);
        self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n])
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let buf = self.grad_buf(id);
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }

    /// Accumulate with suffix-broadcast reduction: fold `delta` (shaped
    /// like the op output) down onto `id`'s (possibly smaller) shape.
    fn accumulate_broadcast(&mut self, id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let bn = numel(&self.nodes[id.0].shape);
        if bn == delta.len() {
            self.accumulate(id, delta);
            return;
        }
        let buf = self.grad_buf(id);
        for (i, d) in delta.iter().enumerate() {
            buf[i % bn] += d;
        }
    }

    fn apply_backward(&mut self, out_idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1])
                };
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g, self.value(*b), &mut da, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(self.value(*a), g, &mut db, m, k, n);
                    self.accumulate(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate_broadcast(*b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, g);
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                    self.accumulate_broadcast(*b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let bn = self.value(*b).len();
                    let bv = self.value(*b);
                    let da: Vec<f64> = g.iter().enumerate().map(|(i, &x)| x * bv[i % bn]).collect();
                    self.accumulate(*a, &da);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a);
                    let db: Vec<f64> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    self.accumulate_broadcast(*b, &db);
                }
            }
            Op::RowDiv { a, b } => {
                let c = self.shape(*a)[1];
                if self.requires_grad(*a) {
                    let bv = self.value(*b);
                    let da: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x / bv[i / c])
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.requires_grad(*b) {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let r = bv.len();
                    let mut db = vec![0.0; r];
                    for i in 0..r {
                        let d = bv[i];
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g[i * c + j] * av[i * c + j];
                        }
                        db[i] = -acc / (d * d);
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|&x| x * c).collect();
                self.accumulate(*a, &da);
            }
            Op::Exp { a } => {
                let out = self.nodes[out_idx].data.clone();
                let da: Vec<f64> = g.iter().zip(out.iter()).map(|(&x, &y)| x * y).collect();
                self.accumulate(*a, &da);
            }
            Op::Gelu { a } => {
                let av = self.value(*a);
                let da: Vec<f64> = g
                    .iter()
                    .zip(av)
                    .map(|(&gi, &x)| gi * gelu_grad(x))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Softmax { a, axis } => {
                let shape = self.nodes[out_idx].shape.clone();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let y = self.nodes[out_idx].data.clone();
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..n {
                            let p = base + j * inner;
                            da[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let d = *self.shape(*x).last().unwrap();
                let rows = mean.len();
                let xv = self.value(*x).to_vec();
                let gv = self.value(*gain).to_vec();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..rows {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let row = &xv[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        // dxhat = g * gain; then the two mean-removal terms
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mu) * rs;
                            let dxhat = grow[j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..d {
                            let xhat = (row[j] - mu) * rs;
                            let dxhat = grow[j] * gv[j];
                            dx[r * d + j] = rs
                                * (dxhat
                                    - sum_dxhat / d as f64
                                    - xhat * sum_dxhat_xhat / d as f64);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        let (mu, rs) = (mean[r], rstd[r]);
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mu) * rs;
                            dg[j] += g[r * d + j] * xhat;
                        }
                    }
                    self.accumulate(*gain, &dg);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let d = self.shape(*table)[1];
                    let v = self.shape(*table)[0];
                    let mut dt = vec![0.0; v * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[row * d + j];
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[out_idx].shape.clone();
                let (outer, total, inner) = axis_split(&shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let pn = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut dp = vec![0.0; numel(self.shape(p))];
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * pn * inner;
                            dp[dst..dst + pn * inner]
                                .copy_from_slice(&g[src..src + pn * inner]);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += pn;
                }
            }
            Op::Slice { a, axis, start } => {
                if self.requires_grad(*a) {
                    let sa = self.shape(*a).to_vec();
                    let (outer, n, inner) = axis_split(&sa, *axis);
                    let len = self.nodes[out_idx].shape[*axis];
                    let mut da = vec![0.0; numel(&sa)];
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        da[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::Transpose { a, perm } => {
                if self.requires_grad(*a) {
                    // gradient flows through the inverse permutation
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let out_shape = self.nodes[out_idx].shape.clone();
                    let da = permute_copy(g, &out_shape, &inv);
                    self.accumulate(*a, &da);
                }
            }
            Op::RowSum { a } => {
                if self.requires_grad(*a) {
                    let c = self.shape(*a)[1];
                    let da: Vec<f64> = (0..self.value(*a).len()).map(|i| g[i / c]).collect();
                    self.accumulate(*a, &da);
                }
            }
            Op::Sum { a } => {
                if self.requires_grad(*a) {
                    let da = vec![g[0]; self.value(*a).len()];
                    self.accumulate(*a, &da);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                include,
                probs,
                n_included,
            } => {
                if self.requires_grad(*logits) {
                    let v = self.shape(*logits)[1];
                    let scale = g[0] / *n_included as f64;
                    let mut dl = vec![0.0; probs.len()];
                    for (row, (&tgt, &inc)) in targets.iter().zip(include).enumerate() {
                        if !inc {
                            continue;
                        }
                        for j in 0..v {
                            let p = probs[row * v + j];
                            let y = if j == tgt { 1.0 } else { 0.0 };
                            dl[row * v + j] = (p - y) * scale;
                        }
                    }
                    self.accumulate(*logits, &dl);
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_copy(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (i, &p) in perm.iter().enumerate() {
            src += idx[i] * in_strides[p];
        }
        *slot = data[src];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

// tanh form of GELU; smooth everywhere so finite differences behave
const GELU_C0: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}
