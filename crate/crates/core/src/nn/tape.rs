//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! Operations are coarse (a whole linear layer, a whole attention block)
//! so the tape stays short and the per-node bookkeeping is negligible next
//! to the arithmetic. Tensors are treated as row-major matrices whose last
//! dimension is the column count.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        match self.cols() {
            0 => 0,
            c => self.data.len() / c,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
pub trait CustomOp: Send + Sync {
    /// Gradient for each input given the upstream gradient. Return `None`
    /// for inputs that do not need one.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ScaledTanh(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Arc<[usize]>,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanPool {
        x: Var,
        segments: Arc<[usize]>,
    },
    Reshape(Var),
    StopGradient,
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order; [`Tape::backward`] replays them
/// in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by {}", op_name(&op))));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// y = x W + b for x of shape [*, in], W [in, out], b [out].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.shape().len() != 2 || xt.cols() != wt.shape()[0] {
            return Err(Error::Dimension(format!(
                "linear: input {:?} against weight {:?}",
                xt.shape(),
                wt.shape()
            )));
        }
        let (n, din, dout) = (xt.rows(), wt.shape()[0], wt.shape()[1]);
        let mut y = vec![0.0; n * dout];
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != dout {
                return Err(Error::Dimension(format!(
                    "linear: bias of length {} for {dout} outputs",
                    bt.len()
                )));
            }
            for row in y.chunks_exact_mut(dout) {
                row.copy_from_slice(bt.data());
            }
        }
        matmul_acc(xt.data(), wt.data(), &mut y, n, din, dout);
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor { shape, data: y }, &inputs, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::Dimension(format!("add: {:?} vs {:?}", at.shape(), bt.shape())));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let shape = at.shape().to_vec();
        self.push(Tensor { shape, data }, &[a, b], Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, &[x], Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, &[x], Op::Relu(x))
    }

    /// s · tanh(x), elementwise.
    pub fn scaled_tanh(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| s * v.tanh()).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, &[x], Op::ScaledTanh(x, s))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of length d).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gain), self.value(bias));
        let d = xt.cols();
        if gt.len() != d || bt.len() != d {
            return Err(Error::Dimension(format!(
                "layer_norm: gain/bias of length {}/{} for width {d}",
                gt.len(),
                bt.len()
            )));
        }
        let n = xt.rows();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut y = vec![0.0; n * d];
        for i in 0..n {
            let row = xt.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                y[i * d + j] = h * gt.data()[j] + bt.data()[j];
            }
        }
        let shape = xt.shape().to_vec();
        self.push(
            Tensor { shape, data: y },
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(t.cols().max(1)) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, &[x], Op::Softmax(x))
    }

    /// Scaled dot-product self-attention over independent segments.
    ///
    /// `q`, `k`, `v` are [N, d] with N = Σ segments; each segment attends
    /// only within itself. Head `h` uses columns `h*d/heads..(h+1)*d/heads`,
    /// scores are scaled by 1/√(d/heads), and head outputs are written back
    /// to the same columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: Arc<[usize]>, heads: usize) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if kt.shape() != qt.shape() || vt.shape() != qt.shape() {
            return Err(Error::Dimension("attention: q, k, v shapes differ".into()));
        }
        let n: usize = segments.iter().sum();
        if n != qt.rows() {
            return Err(Error::Dimension(format!(
                "attention: segments cover {n} rows, input has {}",
                qt.rows()
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let probs_len: usize = segments.iter().map(|l| l * l).sum::<usize>() * heads;
        let mut probs = vec![0.0; probs_len];
        let mut out = vec![0.0; n * d];
        let mut offset = 0;
        let mut p_off = 0;
        for &len in segments.iter() {
            for h in 0..heads {
                let base = offset * d + h * dh;
                let p = &mut probs[p_off..p_off + len * len];
                // S = Q_h K_hᵀ / √dh
                gemm(
                    (len, dh, len),
                    scale,
                    View::new(qt.data(), base, d, 1),
                    View::new(kt.data(), base, d, 1).t(),
                    0.0,
                    ViewMut::new(p, 0, len, 1),
                );
                for prow in p.chunks_exact_mut(len) {
                    softmax_in_place(prow);
                }
                // O_h = P V_h
                gemm(
                    (len, len, dh),
                    1.0,
                    View::new(p, 0, len, 1),
                    View::new(vt.data(), base, d, 1),
                    0.0,
                    ViewMut::new(&mut out, base, d, 1),
                );
                p_off += len * len;
            }
            offset += len;
        }
        let shape = qt.shape().to_vec();
        self.push(
            Tensor { shape, data: out },
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            },
        )
    }

    /// Mean over the rows of each segment: [N, d] -> [segments, d].
    pub fn mean_pool(&mut self, x: Var, segments: Arc<[usize]>) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if segments.iter().sum::<usize>() != t.rows() || segments.contains(&0) {
            return Err(Error::Dimension(format!(
                "mean_pool: segments {segments:?} do not tile {} rows",
                t.rows()
            )));
        }
        let mut out = vec![0.0; segments.len() * d];
        let mut r = 0;
        for (s, &len) in segments.iter().enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for i in r..r + len {
                for (a, b) in o.iter_mut().zip(t.row(i)) {
                    *a += b;
                }
            }
            o.iter_mut().for_each(|a| *a /= len as f64);
            r += len;
        }
        self.push(
            Tensor {
                shape: vec![segments.len(), d],
                data: out,
            },
            &[x],
            Op::MeanPool { x, segments },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().to_vec();
        let value = Tensor::new(shape, data)?;
        self.push(value, &[x], Op::Reshape(x))
    }

    /// Identity in the forward pass; no gradient flows back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::StopGradient,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(
            output,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Accumulates d`loss`/d(node) for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, gi) in self.local_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at node {i}")));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xt.rows(), wt.shape()[0], wt.shape()[1]);
                let mut out = Vec::with_capacity(3);
                if needs(*x) {
                    let mut dx = vec![0.0; n * din];
                    // dX = G Wᵀ
                    gemm(
                        (n, dout, din),
                        1.0,
                        View::new(g, 0, dout, 1),
                        View::new(wt.data(), 0, dout, 1).t(),
                        0.0,
                        ViewMut::new(&mut dx, 0, din, 1),
                    );
                    out.push((*x, dx));
                }
                if needs(*w) {
                    let mut dw = vec![0.0; din * dout];
                    // dW = Xᵀ G
                    gemm(
                        (din, n, dout),
                        1.0,
                        View::new(xt.data(), 0, din, 1).t(),
                        View::new(g, 0, dout, 1),
                        0.0,
                        ViewMut::new(&mut dw, 0, dout, 1),
                    );
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut db = vec![0.0; dout];
                        for gr in g.chunks_exact(dout) {
                            db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                        }
                        out.push((*b, db));
                    }
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
            Op::Relu(x) => {
                let xt = self.value(*x);
                let dx = xt
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::ScaledTanh(x, s) => {
                let y = node.value.data();
                let dx = y
                    .iter()
                    .zip(g)
                    .map(|(&yv, &gv)| {
                        let t = yv / s;
                        gv * s * (1.0 - t * t)
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gt = self.value(*gain).data();
                let d = gt.len();
                let n = inv_std.len();
                let mut out = Vec::with_capacity(3);
                if needs(*x) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let gr = &g[i * d..(i + 1) * d];
                        let hr = &xhat[i * d..(i + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gt[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[i * d + j] = inv_std[i] * (gr[j] * gt[j] - m1 - hr[j] * m2);
                        }
                    }
                    out.push((*x, dx));
                }
                if needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if needs(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, db));
                }
                out
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols().max(1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks_exact(c)
                    .zip(g.chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                {
                    let s = dot(yr, gr);
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_grads(*q, *k, *v, segments, *heads, probs, g),
            Op::MeanPool { x, segments } => {
                let d = node.value.cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                let mut r = 0;
                for (s, &len) in segments.iter().enumerate() {
                    let gs = &g[s * d..(s + 1) * d];
                    for i in r..r + len {
                        for (a, b) in dx[i * d..(i + 1) * d].iter_mut().zip(gs) {
                            *a = b / len as f64;
                        }
                    }
                    r += len;
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let flags: Vec<bool> = inputs.iter().map(|v| needs(*v)).collect();
                let gs = op.backward(&ins, &node.value, g, &flags);
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(v, gi)| gi.map(|gi| (*v, gi)))
                    .collect()
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_grads(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[usize],
        heads: usize,
        probs: &[f64],
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = qt.rows();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut ds = Vec::new();
        let mut offset = 0;
        let mut p_off = 0;
        for &len in segments {
            for h in 0..heads {
                let base = offset * d + h * dh;
                let p = &probs[p_off..p_off + len * len];
                // dV_h = Pᵀ G_h
                gemm(
                    (len, len, dh),
                    1.0,
                    View::new(p, 0, len, 1).t(),
                    View::new(g, base, d, 1),
                    0.0,
                    ViewMut::new(&mut dv, base, d, 1),
                );
                // dP = G_h V_hᵀ
                ds.clear();
                ds.resize(len * len, 0.0);
                gemm(
                    (len, dh, len),
                    1.0,
                    View::new(g, base, d, 1),
                    View::new(vt.data(), base, d, 1).t(),
                    0.0,
                    ViewMut::new(&mut ds, 0, len, 1),
                );
                // dS = P ⊙ (dP − rowsum(P ⊙ dP)) / √dh
                for (dsrow, prow) in ds.chunks_exact_mut(len).zip(p.chunks_exact(len)) {
                    let acc = dot(dsrow, prow);
                    for (x, &pj) in dsrow.iter_mut().zip(prow) {
                        *x = pj * (*x - acc) * scale;
                    }
                }
                // dQ_h = dS K_h, dK_h = dSᵀ Q_h
                gemm(
                    (len, len, dh),
                    1.0,
                    View::new(&ds, 0, len, 1),
                    View::new(kt.data(), base, d, 1),
                    0.0,
                    ViewMut::new(&mut dq, base, d, 1),
                );
                gemm(
                    (len, len, dh),
                    1.0,
                    View::new(&ds, 0, len, 1).t(),
                    View::new(qt.data(), base, d, 1),
                    0.0,
                    ViewMut::new(&mut dk, base, d, 1),
                );
                p_off += len * len;
            }
            offset += len;
        }
        vec![(q, dq), (k, dk), (v, dv)]
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Linear { .. } => "linear",
        Op::Add(..) => "add",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::ScaledTanh(..) => "tanh",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(_) => "softmax",
        Op::Attention { .. } => "attention",
        Op::MeanPool { .. } => "mean_pool",
        Op::Reshape(_) => "reshape",
        Op::StopGradient => "stop_gradient",
        Op::Sum(_) => "sum",
        Op::Custom { .. } => "custom op",
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// c[n×m] += a[n×k] · b[k×m], all row-major.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    gemm(
        (n, k, m),
        1.0,
        View::new(a, 0, k, 1),
        View::new(b, 0, m, 1),
        1.0,
        ViewMut::new(c, 0, m, 1),
    );
}

/// Strided read-only matrix view: element (i, j) is `data[off + i*rs + j*cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f64],
    off: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    pub(crate) fn new(data: &'a [f64], off: usize, rs: usize, cs: usize) -> Self {
        Self { data, off, rs, cs }
    }

    /// The same storage read as its transpose.
    pub(crate) fn t(self) -> Self {
        Self {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

pub(crate) struct ViewMut<'a> {
    data: &'a mut [f64],
    off: usize,
    rs: usize,
    cs: usize,
}

impl<'a> ViewMut<'a> {
    pub(crate) fn new(data: &'a mut [f64], off: usize, rs: usize, cs: usize) -> Self {
        Self { data, off, rs, cs }
    }
}

/// C ← α·A·B + β·C for A [m×k], B [k×n], C [m×n] given as strided views.
pub(crate) fn gemm((m, k, n): (usize, usize, usize), alpha: f64, a: View, b: View, beta: f64, c: ViewMut) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    if n > 0 && m > 0 {
        let last = c.off + (m - 1) * c.rs + (n - 1) * c.cs;
        assert!(last < c.data.len(), "matrix view out of bounds");
    }
    // SAFETY: every element the kernel touches was bounds-checked above,
    // and `c` is an exclusive borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}
