//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Operations are recorded in construction order (which is already a
//! topological order), values are computed eagerly, and [`Tape::backward`]
//! replays the tape in reverse accumulating vector-Jacobian products.
//!
//! Only the learnable path of the model runs on the tape: frozen vision
//! encoders produce plain tensors that enter as constants, so no gradient
//! can ever reach backbone weights.

use crate::scalar::Scalar;
use crate::tensor::{BilinearPlan, Tensor};
use std::rc::Rc;

pub type NodeId = usize;

enum Op<S: Scalar> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    /// out = A x B^T with A: [m, k], B: [n, k].
    MatmulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Neg { x: NodeId },
    Scale { x: NodeId, c: S },
    AddImm { x: NodeId, c: S },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    QuickGelu { x: NodeId },
    Sigmoid { x: NodeId },
    Softplus { x: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    PowImm { x: NodeId, p: S },
    Clamp { x: NodeId, lo: S, hi: S },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    MeanAxis0 { x: NodeId },
    RowL2Norm { x: NodeId, eps: S },
    LayerNormRows { x: NodeId, eps: S },
    SoftmaxRows { x: NodeId },
    AddRowVec { x: NodeId, v: NodeId },
    MulRowVec { x: NodeId, v: NodeId },
    MulScalar { x: NodeId, s: NodeId },
    AddScalar { x: NodeId, s: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize, end: usize },
    Reshape { x: NodeId },
    Bilinear { x: NodeId, plan: Rc<BilinearPlan<S>> },
    /// Mean two-class cross-entropy of row-wise softmax against labels.
    SoftmaxXent2 { logits: NodeId, labels: Vec<u8> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients aligned with tape node ids; only grad-requiring nodes are filled.
pub struct Gradients<S: Scalar> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Constant leaf: gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf: gradient is accumulated for it.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let g = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul { a, b }, g)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        let g = self.rg(a) || self.rg(b);
        self.push(v, Op::MatmulNT { a, b }, g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        let g = self.rg(a) || self.rg(b);
        self.push(v, Op::Add { a, b }, g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        let g = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub { a, b }, g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let g = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul { a, b }, g)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        let g = self.rg(a) || self.rg(b);
        self.push(v, Op::Div { a, b }, g)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| -v);
        let g = self.rg(x);
        self.push(v, Op::Neg { x }, g)
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let v = self.value(x).map(|v| v * c);
        let g = self.rg(x);
        self.push(v, Op::Scale { x, c }, g)
    }

    pub fn add_imm(&mut self, x: NodeId, c: S) -> NodeId {
        let v = self.value(x).map(|v| v + c);
        let g = self.rg(x);
        self.push(v, Op::AddImm { x, c }, g)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let g = self.rg(x);
        self.push(v, Op::Relu { x }, g)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.tanh());
        let g = self.rg(x);
        self.push(v, Op::Tanh { x }, g)
    }

    pub fn quick_gelu(&mut self, x: NodeId) -> NodeId {
        let k = S::from_f64(1.702);
        let v = self.value(x).map(|v| v * sigmoid(k * v));
        let g = self.rg(x);
        self.push(v, Op::QuickGelu { x }, g)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        let g = self.rg(x);
        self.push(v, Op::Sigmoid { x }, g)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(softplus);
        let g = self.rg(x);
        self.push(v, Op::Softplus { x }, g)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.exp());
        let g = self.rg(x);
        self.push(v, Op::Exp { x }, g)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.ln());
        let g = self.rg(x);
        self.push(v, Op::Ln { x }, g)
    }

    pub fn pow_imm(&mut self, x: NodeId, p: S) -> NodeId {
        let v = self.value(x).map(|v| v.powf(p));
        let g = self.rg(x);
        self.push(v, Op::PowImm { x, p }, g)
    }

    pub fn clamp(&mut self, x: NodeId, lo: S, hi: S) -> NodeId {
        let v = self.value(x).map(|v| if v < lo { lo } else if v > hi { hi } else { v });
        let g = self.rg(x);
        self.push(v, Op::Clamp { x, lo, hi }, g)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let g = self.rg(x);
        self.push(v, Op::SumAll { x }, g)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = S::from_f64(self.value(x).len() as f64);
        let v = Tensor::scalar(self.value(x).sum() / n);
        let g = self.rg(x);
        self.push(v, Op::MeanAll { x }, g)
    }

    /// Mean over rows: [r, c] -> [c].
    pub fn mean_axis0(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let rn = S::from_f64(r as f64);
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += t.data[i * c + j];
            }
        }
        for o in &mut out {
            *o /= rn;
        }
        let g = self.rg(x);
        self.push(Tensor::new(out, vec![c]), Op::MeanAxis0 { x }, g)
    }

    /// Normalize each row to (approximately) unit L2 norm:
    /// `y = x / sqrt(|x|^2 + eps^2)`. The epsilon keeps the all-zero row at
    /// zero instead of dividing by zero.
    pub fn row_l2_normalize(&mut self, x: NodeId, eps: S) -> NodeId {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &t.data[i * c..(i + 1) * c];
            let m = row_norm_eps(row, eps);
            for j in 0..c {
                out[i * c + j] = row[j] / m;
            }
        }
        let g = self.rg(x);
        self.push(
            Tensor::new(out, t.shape.clone()),
            Op::RowL2Norm { x, eps },
            g,
        )
    }

    /// Per-row standardization without affine parameters.
    pub fn layernorm_rows(&mut self, x: NodeId, eps: S) -> NodeId {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let cn = S::from_f64(c as f64);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &t.data[i * c..(i + 1) * c];
            let mean = row.iter().fold(S::zero(), |a, &b| a + b) / cn;
            let var = row
                .iter()
                .fold(S::zero(), |a, &b| a + (b - mean) * (b - mean))
                / cn;
            let inv = (var + eps).sqrt().recip();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv;
            }
        }
        let g = self.rg(x);
        self.push(
            Tensor::new(out, t.shape.clone()),
            Op::LayerNormRows { x, eps },
            g,
        )
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &t.data[i * c..(i + 1) * c];
            let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let mut denom = S::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                out[i * c + j] /= denom;
            }
        }
        let g = self.rg(x);
        self.push(Tensor::new(out, t.shape.clone()), Op::SoftmaxRows { x }, g)
    }

    /// Broadcast-add a [c] vector to every row of a [r, c] tensor.
    pub fn add_rowvec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let vd = &self.value(v).data;
        debug_assert_eq!(vd.len(), c);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(t.data[i * c + j] + vd[j]);
            }
        }
        let g = self.rg(x) || self.rg(v);
        self.push(Tensor::new(out, t.shape.clone()), Op::AddRowVec { x, v }, g)
    }

    pub fn mul_rowvec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let vd = &self.value(v).data;
        debug_assert_eq!(vd.len(), c);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(t.data[i * c + j] * vd[j]);
            }
        }
        let g = self.rg(x) || self.rg(v);
        self.push(Tensor::new(out, t.shape.clone()), Op::MulRowVec { x, v }, g)
    }

    /// Multiply a tensor by a scalar node (shape [1]).
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).item();
        let v = self.value(x).map(|v| v * sv);
        let g = self.rg(x) || self.rg(s);
        self.push(v, Op::MulScalar { x, s }, g)
    }

    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).item();
        let v = self.value(x).map(|v| v + sv);
        let g = self.rg(x) || self.rg(s);
        self.push(v, Op::AddScalar { x, s }, g)
    }

    /// Stack parts vertically; all parts must share column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows column mismatch");
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let g = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(data, vec![rows, c]),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            g,
        )
    }

    /// Stack parts horizontally; all parts must share row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let t = self.value(p);
                assert_eq!(t.rows(), r, "concat_cols row mismatch");
                data.extend_from_slice(&t.data[i * w..(i + 1) * w]);
            }
        }
        let g = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(data, vec![r, total]),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            g,
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let t = self.value(x);
        let c = t.cols();
        let data = t.data[start * c..end * c].to_vec();
        let g = self.rg(x);
        self.push(
            Tensor::new(data, vec![end - start, c]),
            Op::SliceRows { x, start, end },
            g,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.len(), shape.iter().product::<usize>(), "reshape numel");
        let v = Tensor::new(t.data.clone(), shape.to_vec());
        let g = self.rg(x);
        self.push(v, Op::Reshape { x }, g)
    }

    /// Bilinear resampling of a flat row-major grid through a shared plan.
    pub fn bilinear(&mut self, x: NodeId, plan: Rc<BilinearPlan<S>>) -> NodeId {
        let v = plan.apply(&self.value(x).data);
        let g = self.rg(x);
        let shape = vec![plan.dst_h * plan.dst_w];
        self.push(Tensor::new(v, shape), Op::Bilinear { x, plan }, g)
    }

    /// Mean cross-entropy of a row-wise two-class softmax against labels.
    pub fn softmax_xent2(&mut self, logits: NodeId, labels: &[u8]) -> NodeId {
        let t = self.value(logits);
        let b = t.rows();
        assert_eq!(t.cols(), 2, "softmax_xent2 expects [B, 2]");
        assert_eq!(labels.len(), b);
        let mut total = S::zero();
        for (i, &lab) in labels.iter().enumerate() {
            let (l0, l1) = (t.data[i * 2], t.data[i * 2 + 1]);
            let (lc, lw) = if lab == 1 { (l1, l0) } else { (l0, l1) };
            total += softplus(lw - lc);
        }
        let v = Tensor::scalar(total / S::from_f64(b as f64));
        let g = self.rg(logits);
        self.push(
            v,
            Op::SoftmaxXent2 {
                logits,
                labels: labels.to_vec(),
            },
            g,
        )
    }

    /// Reverse sweep from a scalar root node.
    pub fn backward(&self, root: NodeId) -> Gradients<S> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut slots: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        slots[root] = Some(Tensor::scalar(S::one()));
        for id in (0..=root).rev() {
            if !self.nodes[id].requires_grad {
                slots[id] = None;
                continue;
            }
            let Some(grad) = slots[id].take() else {
                continue;
            };
            self.apply_vjp(id, &grad, &mut slots);
            // Keep the slot for callers that read intermediate grads.
            slots[id] = Some(grad);
        }
        Gradients { slots }
    }

    fn apply_vjp(&self, id: NodeId, g: &Tensor<S>, slots: &mut [Option<Tensor<S>>]) {
        let acc = |slots: &mut [Option<Tensor<S>>], target: NodeId, contrib: Tensor<S>| {
            match &mut slots[target] {
                Some(existing) => {
                    for (e, c) in existing.data.iter_mut().zip(&contrib.data) {
                        *e += *c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                if self.rg(*a) {
                    acc(slots, *a, g.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(slots, *b, self.value(*a).transpose().matmul(g));
                }
            }
            Op::MatmulNT { a, b } => {
                if self.rg(*a) {
                    acc(slots, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(slots, *b, g.transpose().matmul(self.value(*a)));
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    acc(slots, *a, g.clone());
                }
                if self.rg(*b) {
                    acc(slots, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    acc(slots, *a, g.clone());
                }
                if self.rg(*b) {
                    acc(slots, *b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    acc(slots, *a, g.zip(self.value(*b), |gv, bv| gv * bv));
                }
                if self.rg(*b) {
                    acc(slots, *b, g.zip(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Div { a, b } => {
                let bt = self.value(*b);
                if self.rg(*a) {
                    acc(slots, *a, g.zip(bt, |gv, bv| gv / bv));
                }
                if self.rg(*b) {
                    let at = self.value(*a);
                    let mut contrib = g.clone();
                    for i in 0..contrib.data.len() {
                        contrib.data[i] =
                            -g.data[i] * at.data[i] / (bt.data[i] * bt.data[i]);
                    }
                    acc(slots, *b, contrib);
                }
            }
            Op::Neg { x } => acc(slots, *x, g.map(|v| -v)),
            Op::Scale { x, c } => acc(slots, *x, g.map(|v| v * *c)),
            Op::AddImm { x, .. } => acc(slots, *x, g.clone()),
            Op::Relu { x } => {
                let xt = self.value(*x);
                acc(
                    slots,
                    *x,
                    g.zip(xt, |gv, xv| if xv > S::zero() { gv } else { S::zero() }),
                );
            }
            Op::Tanh { x } => {
                let y = &self.nodes[id].value;
                acc(slots, *x, g.zip(y, |gv, yv| gv * (S::one() - yv * yv)));
            }
            Op::QuickGelu { x } => {
                let k = S::from_f64(1.702);
                let xt = self.value(*x);
                acc(
                    slots,
                    *x,
                    g.zip(xt, |gv, xv| {
                        let s = sigmoid(k * xv);
                        gv * (s + xv * k * s * (S::one() - s))
                    }),
                );
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[id].value;
                acc(slots, *x, g.zip(y, |gv, yv| gv * yv * (S::one() - yv)));
            }
            Op::Softplus { x } => {
                let xt = self.value(*x);
                acc(slots, *x, g.zip(xt, |gv, xv| gv * sigmoid(xv)));
            }
            Op::Exp { x } => {
                let y = &self.nodes[id].value;
                acc(slots, *x, g.zip(y, |gv, yv| gv * yv));
            }
            Op::Ln { x } => {
                let xt = self.value(*x);
                acc(slots, *x, g.zip(xt, |gv, xv| gv / xv));
            }
            Op::PowImm { x, p } => {
                let xt = self.value(*x);
                acc(
                    slots,
                    *x,
                    g.zip(xt, |gv, xv| gv * *p * xv.powf(*p - S::one())),
                );
            }
            Op::Clamp { x, lo, hi } => {
                let xt = self.value(*x);
                acc(
                    slots,
                    *x,
                    g.zip(xt, |gv, xv| {
                        if xv >= *lo && xv <= *hi {
                            gv
                        } else {
                            S::zero()
                        }
                    }),
                );
            }
            Op::SumAll { x } => {
                let xt = self.value(*x);
                let gv = g.item();
                acc(slots, *x, Tensor::new(vec![gv; xt.len()], xt.shape.clone()));
            }
            Op::MeanAll { x } => {
                let xt = self.value(*x);
                let gv = g.item() / S::from_f64(xt.len() as f64);
                acc(slots, *x, Tensor::new(vec![gv; xt.len()], xt.shape.clone()));
            }
            Op::MeanAxis0 { x } => {
                let xt = self.value(*x);
                let (r, c) = (xt.rows(), xt.cols());
                let inv = S::from_f64(r as f64).recip();
                let mut contrib = Tensor::zeros(&xt.shape);
                for i in 0..r {
                    for j in 0..c {
                        contrib.data[i * c + j] = g.data[j] * inv;
                    }
                }
                acc(slots, *x, contrib);
            }
            Op::RowL2Norm { x, eps } => {
                let xt = self.value(*x);
                let (r, c) = (xt.rows(), xt.cols());
                let mut contrib = Tensor::zeros(&xt.shape);
                for i in 0..r {
                    let row = &xt.data[i * c..(i + 1) * c];
                    let gr = &g.data[i * c..(i + 1) * c];
                    let m = row_norm_eps(row, *eps);
                    let m3 = m * m * m;
                    let dot = row
                        .iter()
                        .zip(gr)
                        .fold(S::zero(), |a, (&xv, &gv)| a + xv * gv);
                    for j in 0..c {
                        contrib.data[i * c + j] = gr[j] / m - row[j] * dot / m3;
                    }
                }
                acc(slots, *x, contrib);
            }
            Op::LayerNormRows { x, eps } => {
                let xt = self.value(*x);
                let y = &self.nodes[id].value;
                let (r, c) = (xt.rows(), xt.cols());
                let cn = S::from_f64(c as f64);
                let mut contrib = Tensor::zeros(&xt.shape);
                for i in 0..r {
                    let row = &xt.data[i * c..(i + 1) * c];
                    let yr = &y.data[i * c..(i + 1) * c];
                    let gr = &g.data[i * c..(i + 1) * c];
                    let mean = row.iter().fold(S::zero(), |a, &b| a + b) / cn;
                    let var = row
                        .iter()
                        .fold(S::zero(), |a, &b| a + (b - mean) * (b - mean))
                        / cn;
                    let inv = (var + *eps).sqrt().recip();
                    let g_mean = gr.iter().fold(S::zero(), |a, &b| a + b) / cn;
                    let gy_mean = gr
                        .iter()
                        .zip(yr)
                        .fold(S::zero(), |a, (&gv, &yv)| a + gv * yv)
                        / cn;
                    for j in 0..c {
                        contrib.data[i * c + j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                acc(slots, *x, contrib);
            }
            Op::SoftmaxRows { x } => {
                let y = &self.nodes[id].value;
                let (r, c) = (y.rows(), y.cols());
                let mut contrib = Tensor::zeros(&y.shape);
                for i in 0..r {
                    let yr = &y.data[i * c..(i + 1) * c];
                    let gr = &g.data[i * c..(i + 1) * c];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(S::zero(), |a, (&yv, &gv)| a + yv * gv);
                    for j in 0..c {
                        contrib.data[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(slots, *x, contrib);
            }
            Op::AddRowVec { x, v } => {
                if self.rg(*x) {
                    acc(slots, *x, g.clone());
                }
                if self.rg(*v) {
                    let (r, c) = (g.rows(), g.cols());
                    let mut contrib = Tensor::zeros(&[c]);
                    for i in 0..r {
                        for j in 0..c {
                            contrib.data[j] += g.data[i * c + j];
                        }
                    }
                    acc(slots, *v, contrib);
                }
            }
            Op::MulRowVec { x, v } => {
                let (r, c) = (g.rows(), g.cols());
                if self.rg(*x) {
                    let vd = &self.value(*v).data;
                    let mut contrib = g.clone();
                    for i in 0..r {
                        for j in 0..c {
                            contrib.data[i * c + j] = g.data[i * c + j] * vd[j];
                        }
                    }
                    acc(slots, *x, contrib);
                }
                if self.rg(*v) {
                    let xd = &self.value(*x).data;
                    let mut contrib = Tensor::zeros(&[c]);
                    for i in 0..r {
                        for j in 0..c {
                            contrib.data[j] += g.data[i * c + j] * xd[i * c + j];
                        }
                    }
                    acc(slots, *v, contrib);
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).item();
                if self.rg(*x) {
                    acc(slots, *x, g.map(|v| v * sv));
                }
                if self.rg(*s) {
                    let xt = self.value(*x);
                    let dot = g
                        .data
                        .iter()
                        .zip(&xt.data)
                        .fold(S::zero(), |a, (&gv, &xv)| a + gv * xv);
                    acc(slots, *s, Tensor::scalar(dot));
                }
            }
            Op::AddScalar { x, s } => {
                if self.rg(*x) {
                    acc(slots, *x, g.clone());
                }
                if self.rg(*s) {
                    acc(slots, *s, Tensor::scalar(g.sum()));
                }
            }
            Op::ConcatRows { parts } => {
                let c = g.cols();
                let mut row = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.rg(p) {
                        let data = g.data[row * c..(row + pr) * c].to_vec();
                        let shape = self.value(p).shape.clone();
                        acc(slots, p, Tensor::new(data, shape));
                    }
                    row += pr;
                }
            }
            Op::ConcatCols { parts } => {
                let r = g.rows();
                let total = g.cols();
                let mut col = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            data.extend_from_slice(&g.data[i * total + col..i * total + col + pc]);
                        }
                        let shape = self.value(p).shape.clone();
                        acc(slots, p, Tensor::new(data, shape));
                    }
                    col += pc;
                }
            }
            Op::SliceRows { x, start, end } => {
                let xt = self.value(*x);
                let c = xt.cols();
                let mut contrib = Tensor::zeros(&xt.shape);
                contrib.data[start * c..end * c].copy_from_slice(&g.data);
                acc(slots, *x, contrib);
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape.clone();
                acc(slots, *x, Tensor::new(g.data.clone(), shape));
            }
            Op::Bilinear { x, plan } => {
                let xt = self.value(*x);
                let mut contrib = Tensor::zeros(&xt.shape);
                for (out_idx, taps) in plan.taps.iter().enumerate() {
                    let gv = g.data[out_idx];
                    for &(src, w) in taps {
                        contrib.data[src] += gv * w;
                    }
                }
                acc(slots, *x, contrib);
            }
            Op::SoftmaxXent2 { logits, labels } => {
                let lt = self.value(*logits);
                let b = lt.rows();
                let inv_b = S::from_f64(b as f64).recip();
                let gv = g.item();
                let mut contrib = Tensor::zeros(&lt.shape);
                for (i, &lab) in labels.iter().enumerate() {
                    let (l0, l1) = (lt.data[i * 2], lt.data[i * 2 + 1]);
                    let max = l0.max(l1);
                    let e0 = (l0 - max).exp();
                    let e1 = (l1 - max).exp();
                    let p1 = e1 / (e0 + e1);
                    let p0 = S::one() - p1;
                    let (t0, t1) = if lab == 1 {
                        (S::zero(), S::one())
                    } else {
                        (S::one(), S::zero())
                    };
                    contrib.data[i * 2] = gv * (p0 - t0) * inv_b;
                    contrib.data[i * 2 + 1] = gv * (p1 - t1) * inv_b;
                }
                acc(slots, *logits, contrib);
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable log(1 + exp(x)).
fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn row_norm_eps<S: Scalar>(row: &[S], eps: S) -> S {
    (row.iter().fold(S::zero(), |a, &b| a + b * b) + eps * eps).sqrt()
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Central finite-difference check of the gradient of a scalar-valued tape
/// program with respect to every element of every input.
///
/// `build` receives the tape and one param node per input tensor and must
/// return the scalar output node. Relative error uses `max(|analytic|, |fd|)`
/// as the denominator; elements where both magnitudes are below `1e-6` are
/// skipped as being under finite-difference resolution.
pub fn finite_diff_check<S: Scalar>(
    inputs: &[Tensor<S>],
    step: f64,
    build: impl Fn(&mut Tape<S>, &[NodeId]) -> NodeId,
) -> FdReport {
    let run = |tensors: &[Tensor<S>]| -> (f64, Vec<Tensor<S>>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);
        let gs = ids
            .iter()
            .map(|&id| {
                grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&tape.value(id).shape))
            })
            .collect();
        (tape.value(root).item().to_f64(), gs)
    };

    let (_, analytic) = run(inputs);
    let eval = |tensors: &[Tensor<S>]| -> f64 { run(tensors).0 };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let orig = t.data[ei].to_f64();
            let mut plus = inputs.to_vec();
            plus[ti].data[ei] = S::from_f64(orig + step);
            let mut minus = inputs.to_vec();
            minus[ti].data[ei] = S::from_f64(orig - step);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let an = analytic[ti].data[ei].to_f64();
            let denom = an.abs().max(fd.abs());
            checked += 1;
            if denom < 1e-6 {
                continue;
            }
            max_rel = max_rel.max((an - fd).abs() / denom);
        }
    }
    FdReport {
        max_rel_err: max_rel,
        checked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(
            (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
            shape.to_vec(),
        )
    }

    #[test]
    fn matmul_chain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let rep = finite_diff_check(&[a, b], 1e-5, |tape, ids| {
            let m = tape.matmul(ids[0], ids[1]);
            let r = tape.relu(m);
            tape.mean_all(r)
        });
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 3], 0.2, 0.9);
        let y = rand_tensor(&mut rng, &[2, 3], 0.2, 0.9);
        let rep = finite_diff_check(&[x, y], 1e-5, |tape, ids| {
            let p = tape.mul(ids[0], ids[1]);
            let q = tape.div(ids[0], ids[1]);
            let s = tape.sigmoid(p);
            let t = tape.tanh(q);
            let e = tape.exp(t);
            let l = tape.ln(e);
            let g = tape.quick_gelu(l);
            let sp = tape.softplus(g);
            let pw = tape.pow_imm(sp, 1.7);
            let su = tape.add(s, pw);
            tape.mean_all(su)
        });
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn normalize_softmax_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
        let rep = finite_diff_check(&[x], 1e-5, |tape, ids| {
            let n = tape.row_l2_normalize(ids[0], 1e-8);
            let ln = tape.layernorm_rows(n, 1e-5);
            let sm = tape.softmax_rows(ln);
            let m0 = tape.mean_axis0(sm);
            let r = tape.reshape(m0, &[1, 5]);
            let sl = tape.slice_rows(r, 0, 1);
            tape.sum_all(sl)
        });
        assert!(rep.max_rel_err < 1e-5, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn broadcast_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let s = rand_tensor(&mut rng, &[1], 0.5, 1.5);
        let rep = finite_diff_check(&[x, v, s], 1e-5, |tape, ids| {
            let a = tape.add_rowvec(ids[0], ids[1]);
            let m = tape.mul_rowvec(a, ids[1]);
            let ms = tape.mul_scalar(m, ids[2]);
            let asn = tape.add_scalar(ms, ids[2]);
            let cat = tape.concat_rows(&[asn, ids[0]]);
            let catc = tape.concat_cols(&[cat, cat]);
            tape.mean_all(catc)
        });
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn bilinear_and_xent_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = rand_tensor(&mut rng, &[16], -1.0, 1.0);
        let logits = rand_tensor(&mut rng, &[3, 2], -1.5, 1.5);
        let plan = Rc::new(BilinearPlan::<f64>::new(4, 4, 7, 7));
        let labels = vec![0u8, 1, 1];
        let rep = finite_diff_check(&[grid, logits], 1e-5, |tape, ids| {
            let up = tape.bilinear(ids[0], plan.clone());
            let um = tape.mean_all(up);
            let ce = tape.softmax_xent2(ids[1], &labels);
            tape.add(um, ce)
        });
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_f64_slice(&[1.0, 2.0], &[2]));
        let p = tape.param(Tensor::from_f64_slice(&[3.0, 4.0], &[2]));
        let m = tape.mul(c, p);
        let root = tape.sum_all(m);
        let grads = tape.backward(root);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data, vec![1.0, 2.0]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!(softplus(1000.0f64).is_finite());
        assert_eq!(softplus(-1000.0f64), 0.0);
        assert!((softplus(0.0f64) - 2.0f64.ln()).abs() < 1e-15);
    }
}
