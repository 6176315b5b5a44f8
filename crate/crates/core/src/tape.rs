//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward operation appends a node; `backward` walks the tape in
//! reverse and accumulates gradients into the leaf nodes. The op set is
//! exactly what the gaze model needs: matrix products, convolutions,
//! softmax, per-channel statistics, slicing/concatenation, and a
//! differentiable DFT amplitude used by the frequency backbone. Gradients
//! of every op are exercised against central finite differences in the
//! tests below.

use crate::tensor::{mm, mm_nt, mm_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    /// x * s with s a scalar node.
    MulScalar(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// a @ b^T
    MatmulNT(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    /// [L,C] -> [C]
    MeanOverRows(NodeId),
    BroadcastAddRow(NodeId, NodeId),
    BroadcastSubRow(NodeId, NodeId),
    BroadcastMulRow(NodeId, NodeId),
    BroadcastDivRow(NodeId, NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    ClampMin(NodeId, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    RowSlice(NodeId, usize, usize),
    ColSlice(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// Zero rows appended up to the given length.
    PadRows(NodeId),
    Reshape(NodeId),
    /// x [T,Cin], w [K,Cin,Cout], odd K, zero 'same' padding.
    Conv1dSame(NodeId, NodeId),
    /// x [R,P,Cin], w [K,K,Cin,Cout], odd K, zero 'same' padding.
    Conv2dSame(NodeId, NodeId),
    /// x [..,C] + b [C]
    AddBias(NodeId, NodeId),
    /// Channel-averaged DFT amplitudes at fixed frequencies.
    DftAmps { x: NodeId, freqs: Vec<usize> },
    /// sum_i w[i] * xs[i]
    WeightedSum { xs: Vec<NodeId>, w: NodeId },
    /// x[1:] - x[:-1]
    RowDiff(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softmax_rows_value(x: &Tensor) -> Tensor {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![m, n], out)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_value(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + GELU_A * v * v * v);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * v * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
}

fn conv1d_same(x: &Tensor, w: &Tensor) -> Tensor {
    let (t_len, cin) = (x.shape()[0], x.shape()[1]);
    let (k, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(cin, wcin, "conv1d: {:?} vs {:?}", x.shape(), w.shape());
    assert_eq!(k % 2, 1, "conv1d kernel must be odd");
    let pad = k / 2;
    let mut out = vec![0.0; t_len * cout];
    for t in 0..t_len {
        let orow = &mut out[t * cout..(t + 1) * cout];
        for kk in 0..k {
            let u = t + kk;
            if u < pad || u - pad >= t_len {
                continue;
            }
            let xrow = &x.data()[(u - pad) * cin..(u - pad + 1) * cin];
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &w.data()[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    Tensor::new(vec![t_len, cout], out)
}

fn conv2d_same(x: &Tensor, w: &Tensor) -> Tensor {
    let (r_len, p_len, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, wcin, cout) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    assert_eq!(w.shape()[1], k, "conv2d kernel must be square");
    assert_eq!(cin, wcin, "conv2d: {:?} vs {:?}", x.shape(), w.shape());
    assert_eq!(k % 2, 1, "conv2d kernel must be odd");
    let pad = k / 2;
    let mut out = vec![0.0; r_len * p_len * cout];
    for r in 0..r_len {
        for p in 0..p_len {
            let orow = &mut out[(r * p_len + p) * cout..(r * p_len + p + 1) * cout];
            for ky in 0..k {
                let ry = r + ky;
                if ry < pad || ry - pad >= r_len {
                    continue;
                }
                let ry = ry - pad;
                for kx in 0..k {
                    let px = p + kx;
                    if px < pad || px - pad >= p_len {
                        continue;
                    }
                    let px = px - pad;
                    let xrow = &x.data()[(ry * p_len + px) * cin..(ry * p_len + px + 1) * cin];
                    let wbase = ((ky * k + kx) * cin) * cout;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &w.data()[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![r_len, p_len, cout], out)
}

/// Channel-averaged DFT amplitude at frequency `f` on a [L,C] signal, plus
/// the per-channel (re, im) pairs needed by the backward pass.
fn dft_amp(x: &Tensor, f: usize) -> (f64, Vec<(f64, f64)>) {
    let (l, c) = (x.shape()[0], x.shape()[1]);
    let w = -2.0 * std::f64::consts::PI * f as f64 / l as f64;
    let mut parts = vec![(0.0, 0.0); c];
    for t in 0..l {
        let (s, co) = (w * t as f64).sin_cos();
        let row = &x.data()[t * c..(t + 1) * c];
        for (ci, &v) in row.iter().enumerate() {
            parts[ci].0 += v * co;
            parts[ci].1 += v * s;
        }
    }
    let amp = parts.iter().map(|(re, im)| (re * re + im * im).sqrt()).sum::<f64>() / c as f64;
    (amp, parts)
}

/// Channel-averaged amplitude spectrum over frequencies `1..=L/2`, used to
/// pick dominant periods. Plain (non-tape) helper.
pub fn amplitude_spectrum(x: &Tensor) -> Vec<f64> {
    let l = x.shape()[0];
    (1..=l / 2).map(|f| dft_amp(x, f).0).collect()
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf { requires_grad })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.push(out, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * k).collect());
        self.push(out, Op::Scale(a, k))
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).len(), 1, "mul_scalar needs scalar node");
        let sv = self.value(s).item();
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * sv).collect());
        self.push(out, Op::MulScalar(x, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = mm(self.value(a), self.value(b));
        self.push(out, Op::Matmul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = mm_nt(self.value(a), self.value(b));
        self.push(out, Op::MatmulNT(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], data), Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = softmax_rows_value(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn mean_over_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (l, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; c];
        for row in t.data().chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= l as f64;
        }
        self.push(Tensor::new(vec![c], out), Op::MeanOverRows(a))
    }

    fn broadcast_row(&mut self, x: NodeId, r: NodeId, op: fn(f64, f64) -> f64, kind: Op) -> NodeId {
        let (tx, tr) = (self.value(x), self.value(r));
        let c = tx.shape()[tx.shape().len() - 1];
        assert_eq!(tr.shape(), &[c], "broadcast row shape mismatch");
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data().chunks_exact(c) {
            for (v, &rv) in row.iter().zip(tr.data()) {
                data.push(op(*v, rv));
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data);
        self.push(out, kind)
    }

    pub fn broadcast_add_row(&mut self, x: NodeId, r: NodeId) -> NodeId {
        self.broadcast_row(x, r, |a, b| a + b, Op::BroadcastAddRow(x, r))
    }

    pub fn broadcast_sub_row(&mut self, x: NodeId, r: NodeId) -> NodeId {
        self.broadcast_row(x, r, |a, b| a - b, Op::BroadcastSubRow(x, r))
    }

    pub fn broadcast_mul_row(&mut self, x: NodeId, r: NodeId) -> NodeId {
        self.broadcast_row(x, r, |a, b| a * b, Op::BroadcastMulRow(x, r))
    }

    pub fn broadcast_div_row(&mut self, x: NodeId, r: NodeId) -> NodeId {
        self.broadcast_row(x, r, |a, b| a / b, Op::BroadcastDivRow(x, r))
    }

    fn unary(&mut self, a: NodeId, f: fn(f64) -> f64, kind: Op) -> NodeId {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(out, kind)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.max(c)).collect());
        self.push(out, Op::ClampMin(a, c))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu_value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(v), Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = t.data().iter().sum::<f64>();
        self.push(Tensor::scalar(v), Op::SumAll(a))
    }

    pub fn row_slice(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let t = self.value(a);
        let c: usize = t.shape()[1..].iter().product();
        assert!(from <= to && to <= t.shape()[0], "row_slice out of range");
        let mut shape = t.shape().to_vec();
        shape[0] = to - from;
        let data = t.data()[from * c..to * c].to_vec();
        self.push(Tensor::new(shape, data), Op::RowSlice(a, from, to))
    }

    pub fn col_slice(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let t = self.value(a);
        let (m, n) = (t.shape()[0], t.shape()[1]);
        assert!(from <= to && to <= n, "col_slice out of range");
        let w = to - from;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + from..i * n + to]);
        }
        self.push(Tensor::new(vec![m, w], data), Op::ColSlice(a, from, to))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let tail: Vec<usize> = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], tail.as_slice(), "concat_rows shape mismatch");
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.push(Tensor::new(shape, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).shape()[0];
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[1]).collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.shape()[0], m, "concat_cols row mismatch");
            for i in 0..m {
                data[i * n + offset..i * n + offset + w]
                    .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push(Tensor::new(vec![m, n], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn pad_rows(&mut self, a: NodeId, new_len: usize) -> NodeId {
        let t = self.value(a);
        let c: usize = t.shape()[1..].iter().product();
        assert!(new_len >= t.shape()[0], "pad_rows shrinks");
        let mut shape = t.shape().to_vec();
        shape[0] = new_len;
        let mut data = t.data().to_vec();
        data.resize(new_len * c, 0.0);
        self.push(Tensor::new(shape, data), Op::PadRows(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let out = self.value(a).reshaped(shape);
        self.push(out, Op::Reshape(a))
    }

    pub fn conv1d_same(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let out = conv1d_same(self.value(x), self.value(w));
        self.push(out, Op::Conv1dSame(x, w))
    }

    pub fn conv2d_same(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let out = conv2d_same(self.value(x), self.value(w));
        self.push(out, Op::Conv2dSame(x, w))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.shape()[tx.shape().len() - 1];
        assert_eq!(tb.shape(), &[c], "add_bias shape mismatch");
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data().chunks_exact(c) {
            for (v, &bv) in row.iter().zip(tb.data()) {
                data.push(v + bv);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data);
        self.push(out, Op::AddBias(x, b))
    }

    pub fn dft_amps(&mut self, x: NodeId, freqs: &[usize]) -> NodeId {
        let t = self.value(x);
        let amps: Vec<f64> = freqs.iter().map(|&f| dft_amp(t, f).0).collect();
        self.push(
            Tensor::new(vec![freqs.len()], amps),
            Op::DftAmps { x, freqs: freqs.to_vec() },
        )
    }

    pub fn weighted_sum(&mut self, xs: &[NodeId], w: NodeId) -> NodeId {
        assert_eq!(self.value(w).len(), xs.len(), "weighted_sum arity mismatch");
        let shape = self.value(xs[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(xs[0]).len()];
        for (i, &x) in xs.iter().enumerate() {
            let wv = self.value(w).data()[i];
            let t = self.value(x);
            assert_eq!(t.shape(), shape.as_slice(), "weighted_sum shape mismatch");
            for (o, &v) in data.iter_mut().zip(t.data()) {
                *o += wv * v;
            }
        }
        self.push(Tensor::new(shape, data), Op::WeightedSum { xs: xs.to_vec(), w })
    }

    pub fn row_diff(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (m, c) = (t.shape()[0], t.shape()[1]);
        assert!(m >= 2, "row_diff needs at least 2 rows");
        let mut data = Vec::with_capacity((m - 1) * c);
        for i in 1..m {
            for j in 0..c {
                data.push(t.data()[i * c + j] - t.data()[(i - 1) * c + j]);
            }
        }
        self.push(Tensor::new(vec![m - 1, c], data), Op::RowDiff(a))
    }

    /// Accumulates d`loss`/d`leaf` for every grad-requiring leaf. `loss`
    /// must be a scalar node. Returns one gradient slot per node; only leaf
    /// slots survive.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[i] = Some(g);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect());
                    accumulate(&mut grads, *b, neg);
                }
                Op::Scale(a, k) => {
                    let d = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * k).collect());
                    accumulate(&mut grads, *a, d);
                }
                Op::MulScalar(x, s) => {
                    let sv = self.value(*s).item();
                    let tx = self.value(*x);
                    let dx = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * sv).collect());
                    let ds = g.data().iter().zip(tx.data()).map(|(gv, xv)| gv * xv).sum();
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *s, Tensor::scalar(ds));
                }
                Op::Matmul(a, b) => {
                    let da = mm_nt(&g, self.value(*b));
                    let db = mm_tn(self.value(*a), &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatmulNT(a, b) => {
                    let da = mm(&g, self.value(*b));
                    let db = mm_tn(&g, self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => {
                    let (m, n) = (g.shape()[0], g.shape()[1]);
                    let mut data = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            data[c * m + r] = g.data()[r * n + c];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![n, m], data));
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let (m, n) = (s.shape()[0], s.shape()[1]);
                    let mut data = vec![0.0; m * n];
                    for r in 0..m {
                        let srow = &s.data()[r * n..(r + 1) * n];
                        let grow = &g.data()[r * n..(r + 1) * n];
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            data[r * n + c] = srow[c] * (grow[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![m, n], data));
                }
                Op::MeanOverRows(a) => {
                    let t = self.value(*a);
                    let (l, c) = (t.shape()[0], t.shape()[1]);
                    let mut data = Vec::with_capacity(l * c);
                    for _ in 0..l {
                        data.extend(g.data().iter().map(|v| v / l as f64));
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![l, c], data));
                }
                Op::BroadcastAddRow(x, r) => {
                    accumulate(&mut grads, *x, g.clone());
                    accumulate(&mut grads, *r, col_sums(&g));
                }
                Op::BroadcastSubRow(x, r) => {
                    accumulate(&mut grads, *x, g.clone());
                    let mut s = col_sums(&g);
                    for v in s.data_mut() {
                        *v = -*v;
                    }
                    accumulate(&mut grads, *r, s);
                }
                Op::BroadcastMulRow(x, r) => {
                    let (tx, tr) = (self.value(*x), self.value(*r));
                    let c = tr.len();
                    let mut dx = Vec::with_capacity(tx.len());
                    let mut dr = vec![0.0; c];
                    for (grow, xrow) in g.data().chunks_exact(c).zip(tx.data().chunks_exact(c)) {
                        for j in 0..c {
                            dx.push(grow[j] * tr.data()[j]);
                            dr[j] += grow[j] * xrow[j];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(tx.shape().to_vec(), dx));
                    accumulate(&mut grads, *r, Tensor::new(vec![c], dr));
                }
                Op::BroadcastDivRow(x, r) => {
                    let (tx, tr) = (self.value(*x), self.value(*r));
                    let c = tr.len();
                    let mut dx = Vec::with_capacity(tx.len());
                    let mut dr = vec![0.0; c];
                    for (grow, xrow) in g.data().chunks_exact(c).zip(tx.data().chunks_exact(c)) {
                        for j in 0..c {
                            let rv = tr.data()[j];
                            dx.push(grow[j] / rv);
                            dr[j] -= grow[j] * xrow[j] / (rv * rv);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(tx.shape().to_vec(), dx));
                    accumulate(&mut grads, *r, Tensor::new(vec![c], dr));
                }
                Op::Square(a) => {
                    let t = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(gv, xv)| 2.0 * xv * gv)
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(t.shape().to_vec(), data));
                }
                Op::Sqrt(a) => {
                    let out = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, ov)| if *ov > 0.0 { gv / (2.0 * ov) } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(out.shape().to_vec(), data));
                }
                Op::Abs(a) => {
                    let t = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(gv, xv)| gv * xv.signum() * ((*xv != 0.0) as i32 as f64))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(t.shape().to_vec(), data));
                }
                Op::ClampMin(a, c) => {
                    let t = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(gv, xv)| if xv > c { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(t.shape().to_vec(), data));
                }
                Op::Gelu(a) => {
                    let t = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(gv, xv)| gv * gelu_grad(*xv))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(t.shape().to_vec(), data));
                }
                Op::Sigmoid(a) => {
                    let out = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, ov)| gv * ov * (1.0 - ov))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(out.shape().to_vec(), data));
                }
                Op::MeanAll(a) => {
                    let t = self.value(*a);
                    let gv = g.item() / t.len() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(t.shape().to_vec(), gv));
                }
                Op::SumAll(a) => {
                    let t = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::filled(t.shape().to_vec(), g.item()));
                }
                Op::RowSlice(a, from, _to) => {
                    let t = self.value(*a);
                    let c: usize = t.shape()[1..].iter().product();
                    let mut data = vec![0.0; t.len()];
                    data[from * c..from * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, Tensor::new(t.shape().to_vec(), data));
                }
                Op::ColSlice(a, from, to) => {
                    let t = self.value(*a);
                    let (m, n) = (t.shape()[0], t.shape()[1]);
                    let w = to - from;
                    let mut data = vec![0.0; m * n];
                    for r in 0..m {
                        data[r * n + from..r * n + to].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![m, n], data));
                }
                Op::ConcatRows(parts) => {
                    let c: usize = g.shape()[1..].iter().product();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).shape()[0];
                        let shape = self.value(p).shape().to_vec();
                        let data = g.data()[offset * c..(offset + rows) * c].to_vec();
                        accumulate(&mut grads, p, Tensor::new(shape, data));
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, n) = (g.shape()[0], g.shape()[1]);
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        let mut data = Vec::with_capacity(m * w);
                        for r in 0..m {
                            data.extend_from_slice(&g.data()[r * n + offset..r * n + offset + w]);
                        }
                        accumulate(&mut grads, p, Tensor::new(vec![m, w], data));
                        offset += w;
                    }
                }
                Op::PadRows(a) => {
                    let t = self.value(*a);
                    let c: usize = t.shape()[1..].iter().product();
                    let rows = t.shape()[0];
                    let data = g.data()[..rows * c].to_vec();
                    accumulate(&mut grads, *a, Tensor::new(t.shape().to_vec(), data));
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshaped(shape));
                }
                Op::Conv1dSame(x, w) => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (t_len, cin) = (tx.shape()[0], tx.shape()[1]);
                    let (k, cout) = (tw.shape()[0], tw.shape()[2]);
                    let pad = k / 2;
                    let mut dx = vec![0.0; tx.len()];
                    let mut dw = vec![0.0; tw.len()];
                    for t in 0..t_len {
                        let grow = &g.data()[t * cout..(t + 1) * cout];
                        for kk in 0..k {
                            let u = t + kk;
                            if u < pad || u - pad >= t_len {
                                continue;
                            }
                            let u = u - pad;
                            let xrow = &tx.data()[u * cin..(u + 1) * cin];
                            for ci in 0..cin {
                                let wrow =
                                    &tw.data()[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    acc += grow[co] * wrow[co];
                                    dw[(kk * cin + ci) * cout + co] += xrow[ci] * grow[co];
                                }
                                dx[u * cin + ci] += acc;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(tx.shape().to_vec(), dx));
                    accumulate(&mut grads, *w, Tensor::new(tw.shape().to_vec(), dw));
                }
                Op::Conv2dSame(x, w) => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (r_len, p_len, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let (k, cout) = (tw.shape()[0], tw.shape()[3]);
                    let pad = k / 2;
                    let mut dx = vec![0.0; tx.len()];
                    let mut dw = vec![0.0; tw.len()];
                    for r in 0..r_len {
                        for p in 0..p_len {
                            let grow = &g.data()[(r * p_len + p) * cout..(r * p_len + p + 1) * cout];
                            for ky in 0..k {
                                let ry = r + ky;
                                if ry < pad || ry - pad >= r_len {
                                    continue;
                                }
                                let ry = ry - pad;
                                for kx in 0..k {
                                    let px = p + kx;
                                    if px < pad || px - pad >= p_len {
                                        continue;
                                    }
                                    let px = px - pad;
                                    let xrow =
                                        &tx.data()[(ry * p_len + px) * cin..(ry * p_len + px + 1) * cin];
                                    let wbase = ((ky * k + kx) * cin) * cout;
                                    for ci in 0..cin {
                                        let wrow = &tw.data()[wbase + ci * cout..wbase + (ci + 1) * cout];
                                        let mut acc = 0.0;
                                        for co in 0..cout {
                                            acc += grow[co] * wrow[co];
                                            dw[wbase + ci * cout + co] += xrow[ci] * grow[co];
                                        }
                                        dx[(ry * p_len + px) * cin + ci] += acc;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(tx.shape().to_vec(), dx));
                    accumulate(&mut grads, *w, Tensor::new(tw.shape().to_vec(), dw));
                }
                Op::AddBias(x, b) => {
                    accumulate(&mut grads, *x, g.clone());
                    accumulate(&mut grads, *b, col_sums(&g));
                }
                Op::DftAmps { x, freqs } => {
                    let t = self.value(*x);
                    let (l, c) = (t.shape()[0], t.shape()[1]);
                    let mut dx = vec![0.0; t.len()];
                    for (fi, &f) in freqs.iter().enumerate() {
                        let gv = g.data()[fi];
                        if gv == 0.0 {
                            continue;
                        }
                        let (_, parts) = dft_amp(t, f);
                        let w = -2.0 * std::f64::consts::PI * f as f64 / l as f64;
                        for tt in 0..l {
                            let (s, co) = (w * tt as f64).sin_cos();
                            for (ci, &(re, im)) in parts.iter().enumerate() {
                                let norm = (re * re + im * im).sqrt();
                                if norm > 0.0 {
                                    dx[tt * c + ci] += gv * (re * co + im * s) / (norm * c as f64);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(t.shape().to_vec(), dx));
                }
                Op::WeightedSum { xs, w } => {
                    let wt = self.value(*w);
                    let mut dw = vec![0.0; xs.len()];
                    for (i, &x) in xs.iter().enumerate() {
                        let wv = wt.data()[i];
                        let tx = self.value(x);
                        let dx = Tensor::new(
                            g.shape().to_vec(),
                            g.data().iter().map(|v| v * wv).collect(),
                        );
                        dw[i] = g.data().iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                        accumulate(&mut grads, x, dx);
                    }
                    accumulate(&mut grads, *w, Tensor::new(vec![xs.len()], dw));
                }
                Op::RowDiff(a) => {
                    let t = self.value(*a);
                    let (m, c) = (t.shape()[0], t.shape()[1]);
                    let mut data = vec![0.0; m * c];
                    for i in 0..m - 1 {
                        for j in 0..c {
                            let gv = g.data()[i * c + j];
                            data[(i + 1) * c + j] += gv;
                            data[i * c + j] -= gv;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![m, c], data));
                }
            }
        }
        grads
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let c = g.shape()[g.shape().len() - 1];
    let mut out = vec![0.0; c];
    for row in g.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(vec![c], out)
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
