//! Reverse-mode automatic differentiation over a recording tape.
//!
//! Every operation appends one node; node ids are therefore already in
//! topological order and [`Tape::backward`] walks them in reverse exactly once.

use crate::error::TensorError;
use crate::tensor::{
    self, cross_entropy_parts, gelu_derivative, layer_norm_parts, matmul_a_bt_into,
    matmul_at_b_into, matmul_into, softmax_row, Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a fused multi-head self-attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddRowBias(NodeId, NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(NodeId),
    Attention {
        qkv: NodeId,
        shape: AttentionShape,
        probs: Vec<T>,
    },
    AssembleTokens {
        patches: NodeId,
        cls: NodeId,
        pos: NodeId,
        batch: usize,
    },
    SelectRows {
        x: NodeId,
        stride: usize,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `id`; zeros if the loss does not
    /// depend on it.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        let shape = &self.shapes[id.0];
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

#[cfg(test)]
thread_local! {
    pub(crate) static CORRUPT_GELU_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; gradients flow into it.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that receives no gradient (inputs, fixed data).
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[NodeId],
        name: &'static str,
    ) -> Result<NodeId, TensorError> {
        let value = value.finite(name)?;
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        self.record(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    fn binary(
        &mut self,
        kind: tensor::Elementwise,
        a: NodeId,
        b: NodeId,
    ) -> Result<NodeId, TensorError> {
        let v = tensor::elementwise(kind, self.value(a), tensor::Operand::Tensor(self.value(b)))?;
        let op = match kind {
            tensor::Elementwise::Add => Op::Add(a, b),
            tensor::Elementwise::Sub => Op::Sub(a, b),
            tensor::Elementwise::Mul => Op::Mul(a, b),
        };
        self.record(v, op, &[a, b], "elementwise")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(tensor::Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(tensor::Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(tensor::Elementwise::Mul, a, b)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId, TensorError> {
        let v = tensor::scale(self.value(a), s)?;
        self.record(v, Op::Scale(a, s), &[a], "scale")
    }

    /// Adds `bias[d]` to every row of `x[..×d]`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = xv.last_dim();
        if bv.len() != d {
            return Err(TensorError::Dimension(format!(
                "add_row_bias: row width {d}, bias length {}",
                bv.len()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        self.record(out, Op::AddRowBias(x, bias), &[x, bias], "add_row_bias")
    }

    /// `x · w + b` with `w[in×out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::softmax(self.value(x));
        self.record(v, Op::Softmax(x), &[x], "softmax")
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let eps = T::lit(tensor::LAYER_NORM_EPS);
        let (v, xhat, inv_std) =
            layer_norm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        self.record(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::gelu(self.value(x));
        self.record(v, Op::Gelu(x), &[x], "gelu")
    }

    /// Dense multi-head self-attention over `qkv[batch·seq × 3·d]`, laid out as
    /// `[q | k | v]` along columns with heads contiguous inside each block.
    /// Returns the concatenated head outputs, `[batch·seq × d]`.
    pub fn attention(&mut self, qkv: NodeId, shape: AttentionShape) -> Result<NodeId, TensorError> {
        let AttentionShape { batch, seq, heads } = shape;
        let v = self.value(qkv);
        let (rows, w3) = v.matrix_dims("attention")?;
        if rows != batch * seq || w3 % 3 != 0 || (w3 / 3) % heads != 0 {
            return Err(TensorError::Dimension(format!(
                "attention: qkv {rows}×{w3} incompatible with batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let d = w3 / 3;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let data = v.data();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut q = vec![T::zero(); seq * dh];
        let mut k = vec![T::zero(); seq * dh];
        let mut val = vec![T::zero(); seq * dh];
        let mut o = vec![T::zero(); seq * dh];
        for b in 0..batch {
            for h in 0..heads {
                gather_head(data, b, h, seq, d, dh, &mut q, &mut k, &mut val);
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                p.iter_mut().for_each(|x| *x = T::zero());
                matmul_a_bt_into(&q, &k, p, seq, dh, seq);
                for row in p.chunks_mut(seq) {
                    row.iter_mut().for_each(|x| *x = *x * scale);
                    softmax_row(row);
                }
                o.iter_mut().for_each(|x| *x = T::zero());
                matmul_into(p, &val, &mut o, seq, seq, dh);
                for t in 0..seq {
                    let dst = &mut out[(b * seq + t) * d + h * dh..][..dh];
                    dst.copy_from_slice(&o[t * dh..(t + 1) * dh]);
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        self.record(
            out,
            Op::Attention { qkv, shape, probs },
            &[qkv],
            "attention",
        )
    }

    /// Builds the token sequence: for each of `batch` images, the class token
    /// followed by its patch embeddings, plus positional embeddings.
    /// `patches[batch·np × d]`, `cls[1 × d]`, `pos[(np+1) × d]`.
    pub fn assemble_tokens(
        &mut self,
        patches: NodeId,
        cls: NodeId,
        pos: NodeId,
        batch: usize,
    ) -> Result<NodeId, TensorError> {
        let pv = self.value(patches);
        let (prow, d) = pv.matrix_dims("assemble_tokens patches")?;
        let cv = self.value(cls);
        let posv = self.value(pos);
        let (seq, pd) = posv.matrix_dims("assemble_tokens pos")?;
        if batch == 0 || prow % batch != 0 || prow / batch + 1 != seq || pd != d || cv.len() != d {
            return Err(TensorError::Dimension(format!(
                "assemble_tokens: patches {prow}×{d}, cls {}, pos {seq}×{pd}, batch {batch}",
                cv.len()
            )));
        }
        let np = seq - 1;
        let mut out = vec![T::zero(); batch * seq * d];
        for b in 0..batch {
            for t in 0..seq {
                let src = if t == 0 {
                    cv.data()
                } else {
                    &pv.data()[(b * np + t - 1) * d..][..d]
                };
                let dst = &mut out[(b * seq + t) * d..][..d];
                for ((o, &s), &p) in dst
                    .iter_mut()
                    .zip(src)
                    .zip(&posv.data()[t * d..(t + 1) * d])
                {
                    *o = s + p;
                }
            }
        }
        let out = Tensor::new(vec![batch * seq, d], out)?;
        self.record(
            out,
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            },
            &[patches, cls, pos],
            "assemble_tokens",
        )
    }

    /// Rows `0, stride, 2·stride, ...` of `x`.
    pub fn select_rows(&mut self, x: NodeId, stride: usize) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let (rows, d) = xv.matrix_dims("select_rows")?;
        if stride == 0 || rows % stride != 0 {
            return Err(TensorError::Dimension(format!(
                "select_rows: {rows} rows not divisible by stride {stride}"
            )));
        }
        let n = rows / stride;
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend_from_slice(&xv.data()[i * stride * d..][..d]);
        }
        let out = Tensor::new(vec![n, d], out)?;
        self.record(out, Op::SelectRows { x, stride }, &[x], "select_rows")
    }

    /// Mean cross-entropy over the batch; a scalar node.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let (loss, probs) = cross_entropy_parts(self.value(logits), labels)?;
        self.record(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(x).sum();
        self.record(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[id.0];
        if node.needs_grad {
            let len = node.value.len();
            f(grads[id.0].get_or_insert_with(|| vec![T::zero(); len]));
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                self.acc(grads, *a, |da| matmul_a_bt_into(g, bv.data(), da, m, n, k));
                self.acc(grads, *b, |db| matmul_at_b_into(av.data(), g, db, m, k, n));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |da| add_assign(da, g));
                self.acc(grads, *b, |db| add_assign(db, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |da| add_assign(da, g));
                self.acc(grads, *b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, &x)| *d = *d - x)
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + x * y;
                    }
                });
                self.acc(grads, *b, |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                        *d = *d + x * y;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *s)
                });
            }
            Op::AddRowBias(x, bias) => {
                let d = self.value(*bias).len();
                self.acc(grads, *x, |dx| add_assign(dx, g));
                self.acc(grads, *bias, |db| {
                    for row in g.chunks(d) {
                        add_assign(db, row);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                self.acc(grads, *x, |dx| {
                    for ((dxr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot = gr
                            .iter()
                            .zip(yr)
                            .fold(T::zero(), |a, (&gi, &yi)| a + gi * yi);
                        for ((o, &gi), &yi) in dxr.iter_mut().zip(gr).zip(yr) {
                            *o = *o + yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let dt = T::lit(d as f64);
                self.acc(grads, *gain, |dg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gi), &hi) in dg.iter_mut().zip(gr).zip(hr) {
                            *o = *o + gi * hi;
                        }
                    }
                });
                self.acc(grads, *bias, |db| {
                    for gr in g.chunks(d) {
                        add_assign(db, gr);
                    }
                });
                self.acc(grads, *x, |dx| {
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (dxr, gr)) in dx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let s1 = dxhat.iter().fold(T::zero(), |a, &v| a + v);
                        let s2 = dxhat
                            .iter()
                            .zip(hr)
                            .fold(T::zero(), |a, (&v, &h)| a + v * h);
                        let k = inv_std[r] / dt;
                        for j in 0..d {
                            dxr[j] = dxr[j] + k * (dt * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                #[cfg(test)]
                let corrupt = CORRUPT_GELU_BACKWARD.with(|c| c.get());
                #[cfg(not(test))]
                let corrupt = false;
                self.acc(grads, *x, |dx| {
                    for ((o, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        let mut dd = gelu_derivative(xi);
                        if corrupt {
                            dd = dd * T::lit(1.1);
                        }
                        *o = *o + gi * dd;
                    }
                });
            }
            Op::Attention { qkv, shape, probs } => {
                let qv = self.value(*qkv);
                self.acc(grads, *qkv, |dqkv| {
                    attention_backward(qv.data(), g, probs, *shape, dqkv)
                });
            }
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let (seq, d) = (self.value(*pos).shape()[0], self.value(*pos).shape()[1]);
                let np = seq - 1;
                let batch = *batch;
                self.acc(grads, *patches, |dp| {
                    for b in 0..batch {
                        for t in 1..seq {
                            add_assign(
                                &mut dp[(b * np + t - 1) * d..][..d],
                                &g[(b * seq + t) * d..][..d],
                            );
                        }
                    }
                });
                self.acc(grads, *cls, |dc| {
                    for b in 0..batch {
                        add_assign(dc, &g[b * seq * d..][..d]);
                    }
                });
                self.acc(grads, *pos, |dpos| {
                    for b in 0..batch {
                        add_assign(dpos, &g[b * seq * d..][..seq * d]);
                    }
                });
            }
            Op::SelectRows { x, stride } => {
                let d = node.value.last_dim();
                self.acc(grads, *x, |dx| {
                    for (i, gr) in g.chunks(d).enumerate() {
                        add_assign(&mut dx[i * stride * d..][..d], gr);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / T::lit(labels.len() as f64);
                self.acc(grads, *logits, |dl| {
                    for (r, (dr, pr)) in dl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for (j, (o, &p)) in dr.iter_mut().zip(pr).enumerate() {
                            let target = if j == labels[r] { T::one() } else { T::zero() };
                            *o = *o + scale * (p - target);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |dx| dx.iter_mut().for_each(|d| *d = *d + g[0]));
            }
        }
    }
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[allow(clippy::too_many_arguments)]
fn gather_head<T: Scalar>(
    qkv: &[T],
    b: usize,
    h: usize,
    seq: usize,
    d: usize,
    dh: usize,
    q: &mut [T],
    k: &mut [T],
    v: &mut [T],
) {
    for t in 0..seq {
        let row = &qkv[(b * seq + t) * 3 * d..][..3 * d];
        q[t * dh..(t + 1) * dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
        k[t * dh..(t + 1) * dh].copy_from_slice(&row[d + h * dh..][..dh]);
        v[t * dh..(t + 1) * dh].copy_from_slice(&row[2 * d + h * dh..][..dh]);
    }
}

fn attention_backward<T: Scalar>(
    qkv: &[T],
    g: &[T],
    probs: &[T],
    shape: AttentionShape,
    dqkv: &mut [T],
) {
    let AttentionShape { batch, seq, heads } = shape;
    let d = qkv.len() / (batch * seq * 3);
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut q = vec![T::zero(); seq * dh];
    let mut k = vec![T::zero(); seq * dh];
    let mut v = vec![T::zero(); seq * dh];
    let mut dout = vec![T::zero(); seq * dh];
    let mut dp = vec![T::zero(); seq * seq];
    let mut dq = vec![T::zero(); seq * dh];
    let mut dk = vec![T::zero(); seq * dh];
    let mut dv = vec![T::zero(); seq * dh];
    for b in 0..batch {
        for h in 0..heads {
            gather_head(qkv, b, h, seq, d, dh, &mut q, &mut k, &mut v);
            for t in 0..seq {
                dout[t * dh..(t + 1) * dh].copy_from_slice(&g[(b * seq + t) * d + h * dh..][..dh]);
            }
            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
            // dV = Pᵀ dO
            dv.iter_mut().for_each(|x| *x = T::zero());
            matmul_at_b_into(p, &dout, &mut dv, seq, seq, dh);
            // dP = dO Vᵀ, then through the row softmax and the score scale
            dp.iter_mut().for_each(|x| *x = T::zero());
            matmul_a_bt_into(&dout, &v, &mut dp, seq, dh, seq);
            for (dr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                let dot = dr.iter().zip(pr).fold(T::zero(), |a, (&x, &y)| a + x * y);
                for (x, &y) in dr.iter_mut().zip(pr) {
                    *x = y * (*x - dot) * scale;
                }
            }
            dq.iter_mut().for_each(|x| *x = T::zero());
            matmul_into(&dp, &k, &mut dq, seq, seq, dh);
            dk.iter_mut().for_each(|x| *x = T::zero());
            matmul_at_b_into(&dp, &q, &mut dk, seq, seq, dh);
            for t in 0..seq {
                let row = &mut dqkv[(b * seq + t) * 3 * d..][..3 * d];
                add_assign(&mut row[h * dh..][..dh], &dq[t * dh..][..dh]);
                add_assign(&mut row[d + h * dh..][..dh], &dk[t * dh..][..dh]);
                add_assign(&mut row[2 * d + h * dh..][..dh], &dv[t * dh..][..dh]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(leaf) for every coordinate of
    /// every param leaf. `build` records the graph from fresh leaves.
    fn check(leaves: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId) -> f64 {
        let eval = |ls: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let ids: Vec<_> = ls.iter().map(|t| tape.param(t.clone())).collect();
            let loss = build(&mut tape, &ids);
            (tape, ids, loss)
        };
        let (tape, ids, loss) = eval(&leaves);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(ids[li]);
            for j in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[j] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[j] -= h;
                let (tp, _, lp) = eval(&plus);
                let (tm, _, lm) = eval(&minus);
                let fd = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::from_fn(&[2, 3], |i| i as f64));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap().get(x);
        assert_eq!(g, Tensor::ones(&[2, 3]));
    }

    #[test]
    fn half_square_gradient_is_x() {
        let mut tape = Tape::new();
        let xv = Tensor::<f64>::new(vec![4], vec![1.5, -2.0, 0.25, 3.0]).unwrap();
        let x = tape.param(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let l = tape.scale(s, 0.5).unwrap();
        assert_eq!(tape.backward(l).unwrap().get(x), xv);
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::<f64>::ones(&[2, 2]));
        let w = tape.param(Tensor::<f64>::ones(&[2, 2]));
        let y = tape.matmul(c, w).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(c), Tensor::zeros(&[2, 2]));
        assert_eq!(g.get(w), Tensor::full(&[2, 2], 2.0));
    }

    #[test]
    fn each_rule_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let weights = rand_tensor(&mut rng, &[3, 4]);

        let a = rand_tensor(&mut rng, &[3, 5]);
        let b = rand_tensor(&mut rng, &[5, 4]);
        let w = weights.clone();
        let e = check(vec![a, b], move |t, ids| {
            let y = t.matmul(ids[0], ids[1]).unwrap();
            let wn = t.constant(w.clone());
            let z = t.mul(y, wn).unwrap();
            t.sum(z).unwrap()
        });
        assert!(e < 1e-6, "matmul {e}");

        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let w = weights.clone();
        let e = check(vec![a, b], move |t, ids| {
            let s = t.add(ids[0], ids[1]).unwrap();
            let d = t.sub(s, ids[1]).unwrap();
            let d = t.sub(d, ids[1]).unwrap();
            let m = t.mul(d, ids[0]).unwrap();
            let m = t.scale(m, 1.7).unwrap();
            let wn = t.constant(w.clone());
            let z = t.mul(m, wn).unwrap();
            t.sum(z).unwrap()
        });
        assert!(e < 1e-6, "elementwise {e}");

        let x = rand_tensor(&mut rng, &[3, 4]);
        let bias = rand_tensor(&mut rng, &[4]);
        let w = weights.clone();
        let e = check(vec![x, bias], move |t, ids| {
            let y = t.add_row_bias(ids[0], ids[1]).unwrap();
            let s = t.softmax(y).unwrap();
            let wn = t.constant(w.clone());
            let z = t.mul(s, wn).unwrap();
            t.sum(z).unwrap()
        });
        assert!(e < 1e-6, "softmax/bias {e}");

        let x = rand_tensor(&mut rng, &[3, 4]);
        let gain = rand_tensor(&mut rng, &[4]);
        let bias = rand_tensor(&mut rng, &[4]);
        let w = weights.clone();
        let e = check(vec![x, gain, bias], move |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2]).unwrap();
            let y = t.gelu(y).unwrap();
            let wn = t.constant(w.clone());
            let z = t.mul(y, wn).unwrap();
            t.sum(z).unwrap()
        });
        assert!(e < 1e-6, "layer_norm/gelu {e}");

        let logits = rand_tensor(&mut rng, &[3, 4]);
        let e = check(vec![logits], |t, ids| {
            t.cross_entropy(ids[0], &[1, 3, 0]).unwrap()
        });
        assert!(e < 1e-6, "cross_entropy {e}");
    }

    #[test]
    fn attention_and_token_assembly_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (batch, np, d, heads) = (2, 3, 4, 2);
        let seq = np + 1;
        let patches = rand_tensor(&mut rng, &[batch * np, d]);
        let cls = rand_tensor(&mut rng, &[1, d]);
        let pos = rand_tensor(&mut rng, &[seq, d]);
        let wqkv = rand_tensor(&mut rng, &[d, 3 * d]);
        let probe = rand_tensor(&mut rng, &[batch, d]);
        let probe2 = rand_tensor(&mut rng, &[batch * seq, d]);
        let e = check(vec![patches, cls, pos, wqkv], move |t, ids| {
            let x = t.assemble_tokens(ids[0], ids[1], ids[2], batch).unwrap();
            let qkv = t.matmul(x, ids[3]).unwrap();
            let a = t
                .attention(qkv, AttentionShape { batch, seq, heads })
                .unwrap();
            let p2 = t.constant(probe2.clone());
            let full = t.mul(a, p2).unwrap();
            let full = t.sum(full).unwrap();
            let c = t.select_rows(a, seq).unwrap();
            let p = t.constant(probe.clone());
            let z = t.mul(c, p).unwrap();
            let z = t.sum(z).unwrap();
            t.add(z, full).unwrap()
        });
        assert!(e < 1e-6, "attention {e}");
    }

    #[test]
    fn attention_rejects_bad_geometry() {
        let mut tape = Tape::new();
        let q = tape.param(Tensor::<f64>::zeros(&[6, 12]));
        let bad = AttentionShape {
            batch: 2,
            seq: 3,
            heads: 3,
        };
        assert!(tape.attention(q, bad).is_err());
        let good = AttentionShape {
            batch: 2,
            seq: 3,
            heads: 2,
        };
        assert!(tape.attention(q, good).is_ok());
    }
}
