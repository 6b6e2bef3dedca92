//! Reverse-mode autodiff on a linear tape.
//!
//! Forward calls append nodes; `backward` replays the tape in reverse and
//! accumulates vector-Jacobian products. Nodes whose inputs are all constants
//! are skipped during the backward sweep, so frozen-weight subgraphs cost
//! nothing beyond their forward pass.

use crate::tensor::{
    bilinear_taps, bilinear_upsample, gelu, gelu_grad, layer_norm_rows, log_softmax_rows, sigmoid,
    softmax_rows, Tensor,
};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Relu,
    Gelu,
    Tanh,
    Neg,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    DivElem { a: NodeId, b: NodeId },
    /// out[i,j] = a[i,j] + b[j]
    AddRowBroadcast { a: NodeId, b: NodeId },
    /// out[i,j] = a[i,j] * s[i]
    ScaleRows { a: NodeId, s: NodeId },
    /// out[i] = sum_j a[i,j] * b[i,j]
    RowDot { a: NodeId, b: NodeId },
    /// out = a / s where s has shape [1]
    DivByScalar { a: NodeId, s: NodeId },
    Scale { a: NodeId, c: f64 },
    AddConst { a: NodeId },
    Unary { a: NodeId, kind: UnaryKind },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    MeanAxis0 { a: NodeId },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    Reshape { a: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, pad: usize },
    BilinearUpsample { a: NodeId, oh: usize, ow: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros if the node never received one.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Leaf that participates in gradients (parameters, probed inputs).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from gradients (frozen weights, data).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    // ── binary / broadcast ops ───────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b }, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transposed();
        let rg = self.rg(a);
        self.push(value, Op::Transpose { a }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).mul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul { a, b }, rg)
    }

    pub fn div_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape());
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x / y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::DivElem { a, b }, rg)
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(b).numel(), n, "row-broadcast bias length");
        let mut value = self.value(a).clone();
        for i in 0..m {
            for j in 0..n {
                value.data_mut()[i * n + j] += self.value(b).data()[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::AddRowBroadcast { a, b }, rg)
    }

    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(s).numel(), m, "scale_rows scale length");
        let mut value = self.value(a).clone();
        for i in 0..m {
            let f = self.value(s).data()[i];
            for j in 0..n {
                value.data_mut()[i * n + j] *= f;
            }
        }
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::ScaleRows { a, s }, rg)
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut value = Tensor::zeros(&[m, 1]);
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.value(a).data()[i * n + j] * self.value(b).data()[i * n + j];
            }
            value.data_mut()[i] = acc;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::RowDot { a, b }, rg)
    }

    pub fn div_by_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).numel(), 1);
        let f = self.value(s).item();
        let value = self.value(a).scale(1.0 / f);
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::DivByScalar { a, s }, rg)
    }

    // ── unary / constant ops ─────────────────────────────────────────────

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(value, Op::AddConst { a }, rg)
    }

    pub fn unary(&mut self, a: NodeId, kind: UnaryKind) -> NodeId {
        let value = self.value(a).map(|v| match kind {
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Ln => v.ln(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Gelu => gelu(v),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Neg => -v,
        });
        let rg = self.rg(a);
        self.push(value, Op::Unary { a, kind }, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryKind::Gelu)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryKind::Abs)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryKind::Sqrt)
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let value = Tensor::scalar(self.value(a).sum() / n);
        let rg = self.rg(a);
        self.push(value, Op::MeanAll { a }, rg)
    }

    pub fn mean_axis0(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        let mut value = Tensor::zeros(&[1, n]);
        for i in 0..m {
            for j in 0..n {
                value.data_mut()[j] += self.value(a).data()[i * n + j];
            }
        }
        for v in value.data_mut() {
            *v /= m as f64;
        }
        let rg = self.rg(a);
        self.push(value, Op::MeanAxis0 { a }, rg)
    }

    // ── normalized maps ──────────────────────────────────────────────────

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows { a }, rg)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows { a }, rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let value = layer_norm_rows(self.value(x), self.value(gain), self.value(bias), eps);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, eps }, rg)
    }

    // ── shape ops ────────────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, pn) = self.value(p).dims2();
            assert_eq!(pn, n, "concat_rows column mismatch");
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![rows, n], data), Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.value(a).dims2();
        assert!(start + len <= m, "slice_rows out of range");
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(vec![len, n], data), Op::SliceRows { a, start, len }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.value(p).dims2();
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..m {
                data[i * n + off..i * n + off + w]
                    .copy_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![m, n], data), Op::ConcatCols { parts: parts.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.value(a).dims2();
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.value(a).data()[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![m, len], data), Op::SliceCols { a, start, len }, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let value = self.value(a).reshaped(shape);
        let rg = self.rg(a);
        self.push(value, Op::Reshape { a }, rg)
    }

    // ── spatial ops ──────────────────────────────────────────────────────

    /// 2-D convolution, NCHW without the batch axis: x is [C, H, W],
    /// w is [O, C, kh, kw], b is [O], zero padding `pad` on both axes.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> NodeId {
        let value = conv2d_forward(self.value(x), self.value(w), self.value(b), pad);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(value, Op::Conv2d { x, w, b, pad }, rg)
    }

    pub fn bilinear_upsample(&mut self, a: NodeId, oh: usize, ow: usize) -> NodeId {
        let value = bilinear_upsample(self.value(a), oh, ow);
        let rg = self.rg(a);
        self.push(value, Op::BilinearUpsample { a, oh, ow }, rg)
    }

    // ── composite helpers ────────────────────────────────────────────────

    /// x @ w + b for a [m, in] input, [in, out] weight, [out] bias.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_row_broadcast(y, b)
    }

    /// Row-wise L2 normalization of a [1, n] vector, eps-guarded.
    pub fn l2_normalize_vec(&mut self, a: NodeId) -> NodeId {
        let sq = self.mul(a, a);
        let ss = self.sum_all(sq);
        let ss = self.add_const(ss, 1e-12);
        let norm = self.sqrt(ss);
        self.div_by_scalar(a, norm)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Returns per-node gradients.
    pub fn backward(&self, output: NodeId) -> Gradients {
        assert_eq!(self.nodes[output].value.numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(Tensor::scalar(1.0));

        for id in (0..=output).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => *g = g.add(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let g2 = g.reshaped(vec![va.dims2().0, vb.dims2().1]);
                if self.rg(*a) {
                    let da = g2.matmul(&vb.transposed()).reshaped(va.shape().to_vec());
                    self.add_grad(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = va.transposed().matmul(&g2).reshaped(vb.shape().to_vec());
                    self.add_grad(grads, *b, db);
                }
            }
            Op::Transpose { a } => {
                let da = g.transposed().reshaped(self.value(*a).shape().to_vec());
                self.add_grad(grads, *a, da);
            }
            Op::Add { a, b } => {
                self.add_grad(grads, *a, g.reshaped(self.value(*a).shape().to_vec()));
                self.add_grad(grads, *b, g.reshaped(self.value(*b).shape().to_vec()));
            }
            Op::Sub { a, b } => {
                self.add_grad(grads, *a, g.reshaped(self.value(*a).shape().to_vec()));
                self.add_grad(grads, *b, g.scale(-1.0).reshaped(self.value(*b).shape().to_vec()));
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    self.add_grad(grads, *a, g.mul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, g.mul(self.value(*a)));
                }
            }
            Op::DivElem { a, b } => {
                let vb = self.value(*b);
                if self.rg(*a) {
                    let da = Tensor::new(
                        vb.shape().to_vec(),
                        g.data().iter().zip(vb.data()).map(|(gv, bv)| gv / bv).collect(),
                    );
                    self.add_grad(grads, *a, da);
                }
                if self.rg(*b) {
                    let va = self.value(*a);
                    let db = Tensor::new(
                        vb.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data())
                            .zip(vb.data())
                            .map(|((gv, av), bv)| -gv * av / (bv * bv))
                            .collect(),
                    );
                    self.add_grad(grads, *b, db);
                }
            }
            Op::AddRowBroadcast { a, b } => {
                let (m, n) = self.value(*a).dims2();
                self.add_grad(grads, *a, g.reshaped(self.value(*a).shape().to_vec()));
                if self.rg(*b) {
                    let mut db = Tensor::zeros(&[n]);
                    for i in 0..m {
                        for j in 0..n {
                            db.data_mut()[j] += g.data()[i * n + j];
                        }
                    }
                    self.add_grad(grads, *b, db.reshaped(self.value(*b).shape().to_vec()));
                }
            }
            Op::ScaleRows { a, s } => {
                let (m, n) = self.value(*a).dims2();
                let vs = self.value(*s);
                if self.rg(*a) {
                    let mut da = g.reshaped(self.value(*a).shape().to_vec());
                    for i in 0..m {
                        for j in 0..n {
                            da.data_mut()[i * n + j] *= vs.data()[i];
                        }
                    }
                    self.add_grad(grads, *a, da);
                }
                if self.rg(*s) {
                    let va = self.value(*a);
                    let mut ds = Tensor::zeros(&[m, 1]);
                    for i in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g.data()[i * n + j] * va.data()[i * n + j];
                        }
                        ds.data_mut()[i] = acc;
                    }
                    self.add_grad(grads, *s, ds.reshaped(vs.shape().to_vec()));
                }
            }
            Op::RowDot { a, b } => {
                let (m, n) = self.value(*a).dims2();
                for (src, other) in [(*a, *b), (*b, *a)] {
                    if !self.rg(src) {
                        continue;
                    }
                    let vo = self.value(other);
                    let mut d = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        for j in 0..n {
                            d.data_mut()[i * n + j] = g.data()[i] * vo.data()[i * n + j];
                        }
                    }
                    self.add_grad(grads, src, d.reshaped(self.value(src).shape().to_vec()));
                }
            }
            Op::DivByScalar { a, s } => {
                let f = self.value(*s).item();
                if self.rg(*a) {
                    self.add_grad(grads, *a, g.scale(1.0 / f));
                }
                if self.rg(*s) {
                    let va = self.value(*a);
                    let acc: f64 =
                        g.data().iter().zip(va.data()).map(|(gv, av)| gv * av).sum();
                    self.add_grad(grads, *s, Tensor::scalar(-acc / (f * f)));
                }
            }
            Op::Scale { a, c } => {
                self.add_grad(grads, *a, g.scale(*c));
            }
            Op::AddConst { a } => {
                self.add_grad(grads, *a, g.clone());
            }
            Op::Unary { a, kind } => {
                let va = self.value(*a);
                let vy = &self.nodes[id].value;
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(vy.data())
                    .map(|((gv, x), y)| {
                        gv * match kind {
                            UnaryKind::Sigmoid => y * (1.0 - y),
                            UnaryKind::Exp => *y,
                            UnaryKind::Ln => 1.0 / x,
                            UnaryKind::Sqrt => 0.5 / y,
                            UnaryKind::Abs => x.signum(),
                            UnaryKind::Relu => {
                                if *x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Gelu => gelu_grad(*x),
                            UnaryKind::Tanh => 1.0 - y * y,
                            UnaryKind::Neg => -1.0,
                        }
                    })
                    .collect();
                self.add_grad(grads, *a, Tensor::new(va.shape().to_vec(), data));
            }
            Op::SumAll { a } => {
                let va = self.value(*a);
                self.add_grad(grads, *a, Tensor::filled(va.shape(), g.item()));
            }
            Op::MeanAll { a } => {
                let va = self.value(*a);
                self.add_grad(grads, *a, Tensor::filled(va.shape(), g.item() / va.numel() as f64));
            }
            Op::MeanAxis0 { a } => {
                let (m, n) = self.value(*a).dims2();
                let mut da = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..n {
                        da.data_mut()[i * n + j] = g.data()[j] / m as f64;
                    }
                }
                self.add_grad(grads, *a, da.reshaped(self.value(*a).shape().to_vec()));
            }
            Op::SoftmaxRows { a } => {
                let y = &self.nodes[id].value;
                let (m, n) = y.dims2();
                let mut da = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..n {
                        da.data_mut()[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(grads, *a, da.reshaped(self.value(*a).shape().to_vec()));
            }
            Op::LogSoftmaxRows { a } => {
                let y = &self.nodes[id].value;
                let (m, n) = y.dims2();
                let mut da = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        da.data_mut()[i * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.add_grad(grads, *a, da.reshaped(self.value(*a).shape().to_vec()));
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = self.value(*x);
                let (m, n) = vx.dims2();
                let vg = self.value(*gain);
                let nf = n as f64;
                let mut dx = Tensor::zeros(&[m, n]);
                let mut dgain = Tensor::zeros(&[n]);
                let mut dbias = Tensor::zeros(&[n]);
                for i in 0..m {
                    let row = &vx.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gg: Vec<f64> =
                        gr.iter().zip(vg.data()).map(|(gv, gav)| gv * gav).collect();
                    let mean_gg = gg.iter().sum::<f64>() / nf;
                    let mean_ggx = gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        dx.data_mut()[i * n + j] =
                            inv * (gg[j] - mean_gg - xhat[j] * mean_ggx);
                        dgain.data_mut()[j] += gr[j] * xhat[j];
                        dbias.data_mut()[j] += gr[j];
                    }
                }
                if self.rg(*x) {
                    self.add_grad(grads, *x, dx.reshaped(vx.shape().to_vec()));
                }
                if self.rg(*gain) {
                    self.add_grad(grads, *gain, dgain.reshaped(vg.shape().to_vec()));
                }
                if self.rg(*bias) {
                    self.add_grad(
                        grads,
                        *bias,
                        dbias.reshaped(self.value(*bias).shape().to_vec()),
                    );
                }
            }
            Op::ConcatRows { parts } => {
                let n = self.value(parts[0]).dims2().1;
                let mut start = 0;
                for &p in parts {
                    let m = self.value(p).dims2().0;
                    if self.rg(p) {
                        let d = g.data()[start * n..(start + m) * n].to_vec();
                        self.add_grad(
                            grads,
                            p,
                            Tensor::new(vec![m, n], d).reshaped(self.value(p).shape().to_vec()),
                        );
                    }
                    start += m;
                }
            }
            Op::SliceRows { a, start, len } => {
                let (m, n) = self.value(*a).dims2();
                let mut da = Tensor::zeros(&[m, n]);
                da.data_mut()[start * n..(start + len) * n].copy_from_slice(g.data());
                self.add_grad(grads, *a, da.reshaped(self.value(*a).shape().to_vec()));
            }
            Op::ConcatCols { parts } => {
                let m = self.value(parts[0]).dims2().0;
                let total: usize = parts.iter().map(|&p| self.value(p).dims2().1).sum();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if self.rg(p) {
                        let mut d = Tensor::zeros(&[m, w]);
                        for i in 0..m {
                            d.data_mut()[i * w..(i + 1) * w]
                                .copy_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        self.add_grad(grads, p, d.reshaped(self.value(p).shape().to_vec()));
                    }
                    off += w;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = self.value(*a).dims2();
                let mut da = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    da.data_mut()[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.add_grad(grads, *a, da.reshaped(self.value(*a).shape().to_vec()));
            }
            Op::Reshape { a } => {
                self.add_grad(grads, *a, g.reshaped(self.value(*a).shape().to_vec()));
            }
            Op::Conv2d { x, w, b, pad } => {
                let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*w), g, *pad);
                if self.rg(*x) {
                    self.add_grad(grads, *x, dx);
                }
                if self.rg(*w) {
                    self.add_grad(grads, *w, dw);
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, db);
                }
            }
            Op::BilinearUpsample { a, oh, ow } => {
                let (h, w) = self.value(*a).dims2();
                let mut da = Tensor::zeros(&[h, w]);
                for oi in 0..*oh {
                    for oj in 0..*ow {
                        let gv = g.data()[oi * ow + oj];
                        for (si, sj, wt) in bilinear_taps(h, w, *oh, *ow, oi, oj) {
                            da.data_mut()[si * w + sj] += wt * gv;
                        }
                    }
                }
                self.add_grad(grads, *a, da.reshaped(self.value(*a).shape().to_vec()));
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, cw, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c_in, cw, "conv2d channel mismatch");
    assert_eq!(b.numel(), c_out);
    let mut out = Tensor::zeros(&[c_out, h, wd]);
    for o in 0..c_out {
        for i in 0..h {
            for j in 0..wd {
                let mut acc = b.data()[o];
                for c in 0..c_in {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let ii = i as isize + ki as isize - pad as isize;
                            let jj = j as isize + kj as isize - pad as isize;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                continue;
                            }
                            acc += x.data()[(c * h + ii as usize) * wd + jj as usize]
                                * w.data()[((o * c_in + c) * kh + ki) * kw + kj];
                        }
                    }
                }
                out.data_mut()[(o * h + i) * wd + j] = acc;
            }
        }
    }
    out
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, pad: usize) -> (Tensor, Tensor, Tensor) {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[c_out]);
    for o in 0..c_out {
        for i in 0..h {
            for j in 0..wd {
                let gv = g.data()[(o * h + i) * wd + j];
                db.data_mut()[o] += gv;
                for c in 0..c_in {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let ii = i as isize + ki as isize - pad as isize;
                            let jj = j as isize + kj as isize - pad as isize;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                continue;
                            }
                            let xi = (c * h + ii as usize) * wd + jj as usize;
                            let wi = ((o * c_in + c) * kh + ki) * kw + kj;
                            dx.data_mut()[xi] += gv * w.data()[wi];
                            dw.data_mut()[wi] += gv * x.data()[xi];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Central finite difference of a scalar function of one tensor.
    fn fd_grad(x: &Tensor, eps: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        out
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64, what: &str) {
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "{what}: elem {i} analytic {x} vs numeric {y}"
            );
        }
    }

    /// Grad-check a scalar-valued builder against central differences on
    /// every input tensor.
    fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids);
        let grads = tape.backward(out);
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(ids[k], input.shape());
            let numeric = fd_grad(input, 1e-6, |perturbed| {
                let mut t2 = Tape::new();
                let ids2: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| t2.leaf(if i == k { perturbed.clone() } else { t.clone() }))
                    .collect();
                let o = build(&mut t2, &ids2);
                t2.scalar_value(o)
            });
            assert_close(&analytic, &numeric, 1e-5, &format!("input {k}"));
        }
    }

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(42)
    }

    #[test]
    fn grad_matmul_chain() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        grad_check(&[a, b], |t, ids| {
            let c = t.matmul(ids[0], ids[1]);
            let s = t.mul(c, c);
            t.sum_all(s)
        });
    }

    #[test]
    fn grad_softmax_and_log_softmax() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 5], 1.5, &mut r);
        let w = Tensor::randn(&[3, 5], 1.0, &mut r);
        let wc = w.clone();
        grad_check(&[x.clone()], move |t, ids| {
            let s = t.softmax_rows(ids[0]);
            let k = t.constant(wc.clone());
            let p = t.mul(s, k);
            t.sum_all(p)
        });
        grad_check(&[x], move |t, ids| {
            let s = t.log_softmax_rows(ids[0]);
            let k = t.constant(w.clone());
            let p = t.mul(s, k);
            t.sum_all(p)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 6], 1.0, &mut r);
        let gain = Tensor::randn(&[6], 0.5, &mut r).map(|v| v + 1.0);
        let bias = Tensor::randn(&[6], 0.5, &mut r);
        grad_check(&[x, gain, bias], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            let s = t.mul(y, y);
            t.sum_all(s)
        });
    }

    #[test]
    fn grad_unary_suite() {
        let mut r = rng();
        for kind in [
            UnaryKind::Sigmoid,
            UnaryKind::Exp,
            UnaryKind::Relu,
            UnaryKind::Gelu,
            UnaryKind::Tanh,
            UnaryKind::Neg,
        ] {
            let x = Tensor::randn(&[2, 4], 1.0, &mut r).map(|v| v + 0.05);
            grad_check(&[x], move |t, ids| {
                let y = t.unary(ids[0], kind);
                let s = t.mul(y, y);
                t.sum_all(s)
            });
        }
        // Positive-domain unaries.
        for kind in [UnaryKind::Ln, UnaryKind::Sqrt] {
            let x = Tensor::randn(&[2, 4], 0.3, &mut r).map(|v| v.abs() + 0.5);
            grad_check(&[x], move |t, ids| {
                let y = t.unary(ids[0], kind);
                t.sum_all(y)
            });
        }
    }

    #[test]
    fn grad_broadcast_and_row_ops() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4], 1.0, &mut r);
        grad_check(&[a.clone(), b], |t, ids| {
            let y = t.add_row_broadcast(ids[0], ids[1]);
            let s = t.mul(y, y);
            t.sum_all(s)
        });
        let s = Tensor::randn(&[3, 1], 1.0, &mut r);
        grad_check(&[a.clone(), s], |t, ids| {
            let y = t.scale_rows(ids[0], ids[1]);
            let z = t.mul(y, y);
            t.sum_all(z)
        });
        let b2 = Tensor::randn(&[3, 4], 1.0, &mut r);
        grad_check(&[a, b2], |t, ids| {
            let y = t.row_dot(ids[0], ids[1]);
            let z = t.mul(y, y);
            t.sum_all(z)
        });
    }

    #[test]
    fn grad_scalar_division_and_normalize() {
        let mut r = rng();
        let a = Tensor::randn(&[1, 5], 1.0, &mut r);
        let s = Tensor::scalar(1.7);
        grad_check(&[a.clone(), s], |t, ids| {
            let y = t.div_by_scalar(ids[0], ids[1]);
            let z = t.mul(y, y);
            t.sum_all(z)
        });
        grad_check(&[a.clone()], |t, ids| {
            let y = t.l2_normalize_vec(ids[0]);
            let k = t.add_const(y, 0.3);
            let z = t.mul(k, k);
            t.sum_all(z)
        });
        let b = Tensor::randn(&[2, 3], 1.0, &mut r).map(|v| v + 3.0);
        grad_check(&[a.reshaped(vec![5]).reshaped(vec![1, 5]), b.clone()], |t, ids| {
            let _ = ids;
            t.sum_all(ids[0])
        });
        let num = Tensor::randn(&[2, 3], 1.0, &mut r);
        grad_check(&[num, b], |t, ids| {
            let y = t.div_elem(ids[0], ids[1]);
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_concat_slice_mean() {
        let mut r = rng();
        let a = Tensor::randn(&[2, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3, 3], 1.0, &mut r);
        grad_check(&[a.clone(), b.clone()], |t, ids| {
            let c = t.concat_rows(&[ids[0], ids[1]]);
            let s = t.slice_rows(c, 1, 3);
            let z = t.mul(s, s);
            t.sum_all(z)
        });
        let c = Tensor::randn(&[2, 4], 1.0, &mut r);
        grad_check(&[a, c], |t, ids| {
            let m = t.concat_cols(&[ids[0], ids[1]]);
            let s = t.slice_cols(m, 2, 4);
            let z = t.mul(s, s);
            t.sum_all(z)
        });
        let d = Tensor::randn(&[4, 3], 1.0, &mut r);
        grad_check(&[d], |t, ids| {
            let m = t.mean_axis0(ids[0]);
            let z = t.mul(m, m);
            t.sum_all(z)
        });
    }

    #[test]
    fn grad_conv2d_and_upsample() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        grad_check(&[x, w, b], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 1);
            let z = t.mul(y, y);
            t.sum_all(z)
        });
        let m = Tensor::randn(&[3, 3], 1.0, &mut r);
        grad_check(&[m], |t, ids| {
            let y = t.bilinear_upsample(ids[0], 7, 6);
            let z = t.mul(y, y);
            t.sum_all(z)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::filled(&[2, 2], 1.0));
        let c = tape.constant(Tensor::filled(&[2, 2], 3.0));
        let y = tape.mul(a, c);
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(a, a); // y = a^2, dy/da = 2a = 4
        let grads = tape.backward(y);
        assert!((grads.get(a).unwrap().item() - 4.0).abs() < 1e-12);
    }
}
