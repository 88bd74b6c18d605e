//! Recorded-operation tape over a small, fixed vocabulary of tensor ops.
//!
//! Every op records its inputs by node index; [`Tape::backward`] walks the
//! nodes in reverse creation order and accumulates vector-Jacobian products.
//! Backward does not consume the tape, so it can be replayed with different
//! seeds.

use std::collections::HashMap;

use thiserror::Error;

use super::tensor::gemm;
use super::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("backward called on an empty tape (no forward pass recorded)")]
    EmptyTape,
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: Vec<usize>,
        output: Vec<usize>,
    },
    #[error("zero-norm row {row} cannot be normalized")]
    ZeroNorm { row: usize },
}

/// Index of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    ChannelBias {
        x: NodeId,
        bias: NodeId,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Reshape(NodeId),
    TemporalConv {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    ChannelNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        attn: Vec<f64>,
    },
    Gather {
        x: NodeId,
        indices: Vec<usize>,
    },
    MeanChannels(NodeId),
    Concat(Vec<NodeId>),
    BlockScale {
        x: NodeId,
        alpha: NodeId,
    },
    RowSoftmax(NodeId),
    MeanRows(NodeId),
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Result of a backward pass: parameter gradients plus gradients for every
/// input that was registered with [`Tape::input_with_grad`].
#[derive(Debug, Clone)]
pub struct TapeGrads {
    pub params: Gradients,
    inputs: HashMap<NodeId, Tensor>,
}

impl TapeGrads {
    pub fn input(&self, id: NodeId) -> Option<&Tensor> {
        self.inputs.get(&id)
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(pid) => self.params.get(pid),
            _ => node.value.as_ref().expect("non-param node carries a value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape: value.shape().to_vec(),
            value: Some(value),
            op,
            requires_grad,
        });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// An input whose gradient is reported in [`TapeGrads::input`].
    pub fn input_with_grad(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, pid: ParamId) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&pid) {
            return id;
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: None,
            shape: self.params.get(pid).shape().to_vec(),
            op: Op::Param(pid),
            requires_grad: true,
        });
        self.param_nodes.insert(pid, id);
        id
    }

    /// `op(a) · op(b)` for 2-d operands; `ta` / `tb` transpose.
    pub fn matmul(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), ta, self.value(b).data(), tb, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, ta, tb }, rg)
    }

    /// Adds `bias[c]` to every entry of channel `c` (the leading axis).
    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.shape()[0];
        assert_eq!(self.value(bias).len(), c, "bias length must match channels");
        let n = xv.len() / c.max(1);
        let mut out = xv.clone();
        let b = self.value(bias).data();
        for (ci, chunk) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
            for v in chunk {
                *v += b[ci];
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::ChannelBias { x, bias }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v * factor).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| sigmoid(v)).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let out = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// 1-d convolution along the time axis of `x: [Ci, T, V]` with
    /// `w: [Co, Ci, k]`, zero padding `pad` on both ends.
    pub fn temporal_conv(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        assert!(stride >= 1);
        let (ci, t, v) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 3, "temporal kernel must be [Co, Ci, k]");
        let (co, wci, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(wci, ci, "temporal kernel input channels mismatch");
        assert!(t + 2 * pad >= k, "sequence shorter than temporal kernel");
        let to = (t + 2 * pad - k) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; co * to * v];
        for o in 0..co {
            for i in 0..ci {
                for j in 0..k {
                    let wv = wd[(o * ci + i) * k + j];
                    if wv == 0.0 {
                        continue;
                    }
                    for tt in 0..to {
                        let src = (tt * stride + j) as isize - pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let src = src as usize;
                        let orow = &mut out[(o * to + tt) * v..(o * to + tt + 1) * v];
                        let xrow = &xd[(i * t + src) * v..(i * t + src + 1) * v];
                        for (ov, xv) in orow.iter_mut().zip(xrow) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(
            Tensor::new(vec![co, to, v], out),
            Op::TemporalConv { x, w, stride, pad },
            rg,
        )
    }

    /// Per-channel normalization over all non-leading axes, followed by a
    /// per-channel affine map.
    pub fn channel_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let n = xv.len() / c;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), c);
        assert_eq!(b.len(), c);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; xv.len()];
        for ch in 0..c {
            let row = &xv.data()[ch * n..(ch + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[ch] = inv;
            for (j, &val) in row.iter().enumerate() {
                let h = (val - mean) * inv;
                xhat[ch * n + j] = h;
                out[ch * n + j] = g[ch] * h + b[ch];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(shape, out),
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Per-frame scaled dot-product self-attention over the joint axis.
    ///
    /// `q`, `k`: `[H*dq, T, V]`; `v`: `[H*dv, T, V]`. Joint `i` of head `h`
    /// at frame `t` receives `Σ_j A[h,t,i,j] · v[:, t, j]`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (cq, t, nv) = self.value(q).dims3();
        let (ck, tk, vk) = self.value(k).dims3();
        let (cv, tv, vv) = self.value(v).dims3();
        assert_eq!((cq, t, nv), (ck, tk, vk), "query/key shape mismatch");
        assert_eq!((t, nv), (tv, vv), "value shape mismatch");
        assert!(heads >= 1 && cq % heads == 0 && cv % heads == 0);
        let dq = cq / heads;
        let dv = cv / heads;
        let scale = 1.0 / (dq as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let idx = |c: usize, tt: usize, j: usize| (c * t + tt) * nv + j;
        let mut attn = vec![0.0; heads * t * nv * nv];
        let mut out = vec![0.0; cv * t * nv];
        for h in 0..heads {
            for tt in 0..t {
                let a = &mut attn[((h * t + tt) * nv) * nv..((h * t + tt + 1) * nv) * nv];
                for i in 0..nv {
                    for j in 0..nv {
                        let mut s = 0.0;
                        for c in h * dq..(h + 1) * dq {
                            s += qd[idx(c, tt, i)] * kd[idx(c, tt, j)];
                        }
                        a[i * nv + j] = s * scale;
                    }
                    softmax_in_place(&mut a[i * nv..(i + 1) * nv]);
                }
                for c in h * dv..(h + 1) * dv {
                    for i in 0..nv {
                        let mut s = 0.0;
                        for j in 0..nv {
                            s += a[i * nv + j] * vd[idx(c, tt, j)];
                        }
                        out[idx(c, tt, i)] = s;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::new(vec![cv, t, nv], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                attn,
            },
            rg,
        )
    }

    /// Attention weights recorded by an [`attention`](Self::attention) node,
    /// laid out `[heads, T, V, V]`.
    pub fn attention_weights(&self, id: NodeId) -> Option<(usize, &[f64])> {
        match &self.nodes[id.0].op {
            Op::Attention { heads, attn, .. } => Some((*heads, attn)),
            _ => None,
        }
    }

    /// Selects joints (last axis) of `x: [C, T, V]`.
    pub fn gather_joints(&mut self, x: NodeId, indices: &[usize]) -> NodeId {
        let (c, t, v) = self.value(x).dims3();
        assert!(indices.iter().all(|&i| i < v), "joint index out of range");
        let xd = self.value(x).data();
        let vi = indices.len();
        let mut out = Vec::with_capacity(c * t * vi);
        for row in xd.chunks(v) {
            out.extend(indices.iter().map(|&j| row[j]));
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![c, t, vi], out),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Mean over every non-leading axis: `[C, ...] -> [C]`.
    pub fn mean_channels(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let n = xv.len() / c;
        let out: Vec<f64> = xv
            .data()
            .chunks(n)
            .map(|row| row.iter().sum::<f64>() / n as f64)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(out), Op::MeanChannels(x), rg)
    }

    /// Flat concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(out), Op::Concat(parts.to_vec()), rg)
    }

    /// `y[i*d + j] = alpha[i] * x[i*d + j]` for `x` of length `K*d`.
    pub fn block_scale(&mut self, x: NodeId, alpha: NodeId) -> NodeId {
        let xv = self.value(x);
        let kk = self.value(alpha).len();
        assert!(kk > 0 && xv.len().is_multiple_of(kk), "block_scale length mismatch");
        let d = xv.len() / kk;
        let a = self.value(alpha).data();
        let out: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * a[i / d])
            .collect();
        let rg = self.rg(x) || self.rg(alpha);
        self.push(Tensor::from_vec(out), Op::BlockScale { x, alpha }, rg)
    }

    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        let (_, n) = self.value(x).dims2();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(out, Op::RowSoftmax(x), rg)
    }

    /// `[R, N] -> [N]` mean over rows.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (r, n) = self.value(x).dims2();
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(out), Op::MeanRows(x), rg)
    }

    /// Scales every row of `x: [R, N]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let (_, n) = self.value(x).dims2();
        let mut out = self.value(x).clone();
        let mut norms = Vec::new();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TapeError::ZeroNorm { row: r });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [R, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let (r, c) = self.value(logits).dims2();
        assert_eq!(targets.len(), r);
        assert!(targets.iter().all(|&t| t < c));
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / r as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar output seeded with `seed`.
    pub fn backward(&self, output: NodeId, seed: f64) -> Result<TapeGrads, TapeError> {
        if self.nodes.is_empty() {
            return Err(TapeError::EmptyTape);
        }
        let shape = self
            .nodes
            .get(output.0)
            .ok_or(TapeError::UnknownNode(output.0))?
            .shape
            .clone();
        if shape.iter().product::<usize>() != 1 {
            return Err(TapeError::SeedShape {
                seed: vec![],
                output: shape,
            });
        }
        self.backward_with(output, &Tensor::new(shape, vec![seed]))
    }

    /// Reverse pass from an arbitrary output with an explicit cotangent.
    pub fn backward_with(&self, output: NodeId, seed: &Tensor) -> Result<TapeGrads, TapeError> {
        if self.nodes.is_empty() {
            return Err(TapeError::EmptyTape);
        }
        let out_node = self
            .nodes
            .get(output.0)
            .ok_or(TapeError::UnknownNode(output.0))?;
        if out_node.shape != seed.shape() {
            return Err(TapeError::SeedShape {
                seed: seed.shape().to_vec(),
                output: out_node.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());
        let mut result = TapeGrads {
            params: Gradients::zeros_like(self.params),
            inputs: HashMap::new(),
        };

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {
                    result
                        .inputs
                        .insert(NodeId(i), Tensor::new(node.shape.clone(), g));
                }
                Op::Param(pid) => {
                    for (a, b) in result.params.get_mut(*pid).data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                op => self.backprop_op(op, &g, &mut grads, NodeId(i)),
            }
        }
        Ok(result)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let len = self.nodes[id.0].shape.iter().product();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_op(&self, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>], me: NodeId) {
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (ar, ac) = av.dims2();
                let (br, bc) = bv.dims2();
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                if let Some(da) = self.acc(grads, *a) {
                    match (ta, tb) {
                        (false, false) => gemm(g, false, bv.data(), true, da, m, n, k),
                        (false, true) => gemm(g, false, bv.data(), false, da, m, n, k),
                        (true, false) => gemm(bv.data(), false, g, true, da, k, n, m),
                        (true, true) => gemm(bv.data(), true, g, true, da, k, n, m),
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    match (ta, tb) {
                        (false, false) => gemm(av.data(), true, g, false, db, k, m, n),
                        (true, false) => gemm(av.data(), false, g, false, db, k, m, n),
                        (false, true) => gemm(g, true, av.data(), false, db, n, m, k),
                        (true, true) => gemm(g, true, av.data(), true, db, n, m, k),
                    }
                }
            }
            Op::ChannelBias { x, bias } => {
                let c = self.nodes[x.0].shape[0];
                let n = g.len() / c.max(1);
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for (ci, chunk) in g.chunks(n.max(1)).enumerate() {
                        db[ci] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv * f;
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yd = self.value(me).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(yd) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::TemporalConv { x, w, stride, pad } => {
                let (ci, t, v) = self.value(*x).dims3();
                let ws = self.value(*w).shape();
                let (co, k) = (ws[0], ws[2]);
                let to = self.nodes[me.0].shape[1];
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let taps = |j: usize| {
                    (0..to).filter_map(move |tt| {
                        let src = (tt * stride + j) as isize - *pad as isize;
                        (src >= 0 && (src as usize) < t).then_some((tt, src as usize))
                    })
                };
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..co {
                        for i in 0..ci {
                            for j in 0..k {
                                let wv = wd[(o * ci + i) * k + j];
                                if wv == 0.0 {
                                    continue;
                                }
                                for (tt, src) in taps(j) {
                                    let grow = &g[(o * to + tt) * v..(o * to + tt + 1) * v];
                                    let drow = &mut dx[(i * t + src) * v..(i * t + src + 1) * v];
                                    for (dv, gv) in drow.iter_mut().zip(grow) {
                                        *dv += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    for o in 0..co {
                        for i in 0..ci {
                            for j in 0..k {
                                let mut s = 0.0;
                                for (tt, src) in taps(j) {
                                    let grow = &g[(o * to + tt) * v..(o * to + tt + 1) * v];
                                    let xrow = &xd[(i * t + src) * v..(i * t + src + 1) * v];
                                    s += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                                }
                                dw[(o * ci + i) * k + j] += s;
                            }
                        }
                    }
                }
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let n = g.len() / c;
                let gm = self.value(*gamma).data();
                if let Some(dg) = self.acc(grads, *gamma) {
                    for ch in 0..c {
                        dg[ch] += (0..n).map(|j| g[ch * n + j] * xhat[ch * n + j]).sum::<f64>();
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for ch in 0..c {
                        db[ch] += g[ch * n..(ch + 1) * n].iter().sum::<f64>();
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let nf = n as f64;
                    for ch in 0..c {
                        let gr = &g[ch * n..(ch + 1) * n];
                        let hr = &xhat[ch * n..(ch + 1) * n];
                        let sum_g: f64 = gr.iter().sum::<f64>() * gm[ch];
                        let sum_gh: f64 =
                            gr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() * gm[ch];
                        let k = inv_std[ch] / nf;
                        for j in 0..n {
                            let dxh = gr[j] * gm[ch];
                            dx[ch * n + j] += k * (nf * dxh - sum_g - hr[j] * sum_gh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                attn,
            } => {
                let (cq, t, nv) = self.value(*q).dims3();
                let cv = self.value(*v).shape()[0];
                let dq = cq / heads;
                let dvh = cv / heads;
                let scale = 1.0 / (dq as f64).sqrt();
                let qd = self.value(*q).data();
                let kd = self.value(*k).data();
                let vd = self.value(*v).data();
                let idx = |c: usize, tt: usize, j: usize| (c * t + tt) * nv + j;
                let mut dq_buf = vec![0.0; qd.len()];
                let mut dk_buf = vec![0.0; kd.len()];
                let mut dv_buf = vec![0.0; vd.len()];
                let mut da = vec![0.0; nv * nv];
                for h in 0..*heads {
                    for tt in 0..t {
                        let a = &attn[((h * t + tt) * nv) * nv..((h * t + tt + 1) * nv) * nv];
                        da.iter_mut().for_each(|x| *x = 0.0);
                        for c in h * dvh..(h + 1) * dvh {
                            for i in 0..nv {
                                let go = g[idx(c, tt, i)];
                                for j in 0..nv {
                                    da[i * nv + j] += go * vd[idx(c, tt, j)];
                                    dv_buf[idx(c, tt, j)] += a[i * nv + j] * go;
                                }
                            }
                        }
                        // softmax Jacobian, row by row
                        for i in 0..nv {
                            let row_a = &a[i * nv..(i + 1) * nv];
                            let dot: f64 = row_a
                                .iter()
                                .zip(&da[i * nv..(i + 1) * nv])
                                .map(|(x, y)| x * y)
                                .sum();
                            for j in 0..nv {
                                let ds = row_a[j] * (da[i * nv + j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in h * dq..(h + 1) * dq {
                                    dq_buf[idx(c, tt, i)] += ds * kd[idx(c, tt, j)];
                                    dk_buf[idx(c, tt, j)] += ds * qd[idx(c, tt, i)];
                                }
                            }
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *q) {
                    add_into(d, &dq_buf);
                }
                if let Some(d) = self.acc(grads, *k) {
                    add_into(d, &dk_buf);
                }
                if let Some(d) = self.acc(grads, *v) {
                    add_into(d, &dv_buf);
                }
            }
            Op::Gather { x, indices } => {
                let v = self.nodes[x.0].shape[2];
                let vi = indices.len();
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, grow) in g.chunks(vi).enumerate() {
                        for (gv, &j) in grow.iter().zip(indices) {
                            dx[r * v + j] += gv;
                        }
                    }
                }
            }
            Op::MeanChannels(x) => {
                let len: usize = self.nodes[x.0].shape.iter().product();
                let c = g.len();
                let n = len / c;
                if let Some(dx) = self.acc(grads, *x) {
                    for (ch, &gv) in g.iter().enumerate() {
                        for d in &mut dx[ch * n..(ch + 1) * n] {
                            *d += gv / n as f64;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len: usize = self.nodes[p.0].shape.iter().product();
                    if let Some(dp) = self.acc(grads, p) {
                        add_into(dp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::BlockScale { x, alpha } => {
                let xd = self.value(*x).data();
                let ad = self.value(*alpha).data();
                let d = xd.len() / ad.len();
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, (dv, gv)) in dx.iter_mut().zip(g).enumerate() {
                        *dv += gv * ad[i / d];
                    }
                }
                if let Some(dal) = self.acc(grads, *alpha) {
                    for (i, (gv, xv)) in g.iter().zip(xd).enumerate() {
                        dal[i / d] += gv * xv;
                    }
                }
            }
            Op::RowSoftmax(x) => {
                let y = self.value(me);
                let (_, n) = y.dims2();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((drow, grow), yrow) in
                        dx.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let r = self.nodes[x.0].shape[0];
                let n = g.len();
                if let Some(dx) = self.acc(grads, *x) {
                    for drow in dx.chunks_mut(n) {
                        for (d, gv) in drow.iter_mut().zip(g) {
                            *d += gv / r as f64;
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = self.value(me);
                let (_, n) = y.dims2();
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, ((drow, grow), yrow)) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(y.data().chunks(n))
                        .enumerate()
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (gv - yv * dot) / norms[r];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = self.value(*logits).dims2();
                let gs = g[0] / r as f64;
                if let Some(dl) = self.acc(grads, *logits) {
                    for (row, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[row * c + j] += gs * (probs[row * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
