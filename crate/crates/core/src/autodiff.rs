//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! Only the operations the perception network needs are provided. Values and
//! gradients are `f64`; nodes are appended in evaluation order, so the tape
//! index order is already a topological order.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any trainable tensor")]
    DetachedGraph,
    #[error("backward was already run on this tape; reset it first")]
    AlreadyBackpropagated,
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, g: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Upsample2x(Var),
    Concat(Var, Var),
    Bce { p: Var, target: Vec<f64> },
    L2 { a: Var, target: Vec<f64> },
    Sum(Var),
    SumRows(Var),
    Abs(Var),
    NormalizeRows(Var),
    SliceCols { x: Var, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Clamp applied to probabilities inside [`Tape::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all nodes so the tape can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// 2D convolution. `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if bs != [ws[0]] {
            return Err(mismatch("conv2d bias", &bs, &ws));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d kernel", &xs, &ws));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let g = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        };
        let out = conv_forward(&self.value(x).data, &self.value(w).data, &self.value(b).data, &g);
        Ok(self.push(Tensor { shape: vec![n, o, oh, ow], data: out }, Op::Conv2d { x, w, b, g }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| sigmoid(a)).collect(),
        };
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch("global_avg_pool", &s, &[]));
        }
        let plane = s[2] * s[3];
        let data = self.value(x).data.chunks_exact(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        Ok(self.push(Tensor { shape: vec![s[0], s[1]], data }, Op::GlobalAvgPool(x), &[x]))
    }

    /// `[N, K] x [K, M] -> [N, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let x = av[i * k + p];
                for j in 0..m {
                    out[i * m + j] += x * bv[p * m + j];
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::Matmul(a, b), &[a, b]))
    }

    /// `b` must equal `a`'s shape or a suffix of it (broadcast over leading dims).
    fn broadcast_len(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(self.value(b).numel())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bl = self.broadcast_len("add", a, b)?;
        let bv = &self.value(b).data;
        let av = self.value(a);
        let data = av.data.iter().enumerate().map(|(i, &x)| x + bv[i % bl]).collect();
        let out = Tensor { shape: av.shape.clone(), data };
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bl = self.broadcast_len("mul", a, b)?;
        let bv = &self.value(b).data;
        let av = self.value(a);
        let data = av.data.iter().enumerate().map(|(i, &x)| x * bv[i % bl]).collect();
        let out = Tensor { shape: av.shape.clone(), data };
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("sub", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x - y).collect();
        let out = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| scale * a + shift).collect(),
        };
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch("upsample2x", &s, &[]));
        }
        let (h, w) = (s[2], s[3]);
        let src = &self.value(x).data;
        let mut out = vec![0.0; src.len() * 4];
        for (pi, plane) in src.chunks_exact(h * w).enumerate() {
            let dst = &mut out[pi * 4 * h * w..(pi + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![s[0], s[1], 2 * h, 2 * w], data: out }, Op::Upsample2x(x), &[x]))
    }

    /// Concatenation along the channel axis of two `[N, C, H, W]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(mismatch("concat", &sa, &sb));
        }
        let (ca, cb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..sa[0] {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let shape = vec![sa[0], sa[1] + sb[1], sa[2], sa[3]];
        Ok(self.push(Tensor { shape, data: out }, Op::Concat(a, b), &[a, b]))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`.
    pub fn bce_loss(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        if self.shape(p) != target.shape.as_slice() {
            return Err(mismatch("bce_loss", self.shape(p), &target.shape));
        }
        let pv = &self.value(p).data;
        let n = pv.len() as f64;
        let total: f64 = pv
            .iter()
            .zip(&target.data)
            .map(|(&q, &y)| {
                let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum();
        Ok(self.push(Tensor::scalar(total / n), Op::Bce { p, target: target.data.clone() }, &[p]))
    }

    /// Sum of squared differences `Σ (a - target)²`.
    pub fn l2_loss(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        if self.shape(a) != target.shape.as_slice() {
            return Err(mismatch("l2_loss", self.shape(a), &target.shape));
        }
        let total = self.value(a).data.iter().zip(&target.data).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar(total), Op::L2 { a, target: target.data.clone() }, &[a]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// `[N, K] -> [N, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(mismatch("sum_rows", &s, &[]));
        }
        let data = self.value(x).data.chunks_exact(s[1]).map(|r| r.iter().sum()).collect();
        Ok(self.push(Tensor { shape: vec![s[0], 1], data }, Op::SumRows(x), &[x]))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a.abs()).collect(),
        };
        self.push(out, Op::Abs(x), &[x])
    }

    /// Scales each row of `[N, K]` to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(mismatch("normalize_rows", &s, &[]));
        }
        let data = self
            .value(x)
            .data
            .chunks_exact(s[1])
            .flat_map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                r.iter().map(move |v| v / norm)
            })
            .collect();
        Ok(self.push(Tensor { shape: s, data }, Op::NormalizeRows(x), &[x]))
    }

    /// Columns `start..start+len` of `[N, K]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(mismatch("slice_cols", &s, &[start, len]));
        }
        let data = self.value(x).data.chunks_exact(s[1]).flat_map(|r| r[start..start + len].iter().copied()).collect();
        Ok(self.push(Tensor { shape: vec![s[0], len], data }, Op::SliceCols { x, start }, &[x]))
    }

    /// Reverse pass from a scalar `loss`. Allowed once per recorded pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownVar(loss.0));
        }
        if self.consumed {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(AutodiffError::NotScalar(self.nodes[loss.0].value.shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(AutodiffError::DetachedGraph);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only trainable nodes report gradients.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, g: geom } => {
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                if self.needs(*x) {
                    self.accumulate(grads, *x, conv_backward_input(g, wv, geom));
                }
                if self.needs(*w) {
                    self.accumulate(grads, *w, conv_backward_weight(g, xv, geom));
                }
                if self.needs(*b) {
                    let plane = geom.oh * geom.ow;
                    let mut gb = vec![0.0; geom.o];
                    for (k, chunk) in g.chunks_exact(plane).enumerate() {
                        gb[k % geom.o] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                let d = g.iter().zip(xv).map(|(g, &a)| if a > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(&out.data).map(|(g, &s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                let d = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, plane)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if self.needs(*a) {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            da[i * k + p] = (0..m).map(|j| g[i * m + j] * bv[p * m + j]).sum();
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for j in 0..m {
                                db[p * m + j] += x * g[i * m + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.needs(*b) {
                    let bl = self.value(*b).numel();
                    let mut db = vec![0.0; bl];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % bl] += gv;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let bl = bv.len();
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.iter().enumerate().map(|(i, gv)| gv * bv[i % bl]).collect());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bl];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % bl] += gv * av[i];
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * scale).collect());
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let mut d = vec![0.0; self.value(*x).numel()];
                for (pi, plane) in g.chunks_exact(4 * h * w).enumerate() {
                    let dst = &mut d[pi * h * w..(pi + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += plane[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ca, cb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                let mut da = Vec::with_capacity(sa[0] * ca);
                let mut db = Vec::with_capacity(sa[0] * cb);
                for chunk in g.chunks_exact(ca + cb) {
                    da.extend_from_slice(&chunk[..ca]);
                    db.extend_from_slice(&chunk[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Bce { p, target } => {
                let pv = &self.value(*p).data;
                let n = pv.len() as f64;
                let d = pv
                    .iter()
                    .zip(target)
                    .map(|(&q, &y)| {
                        if q <= BCE_EPS || q >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            g[0] * (q - y) / (q * (1.0 - q)) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, d);
            }
            Op::L2 { a, target } => {
                let av = &self.value(*a).data;
                let d = av.iter().zip(target).map(|(x, y)| g[0] * 2.0 * (x - y)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::SumRows(x) => {
                let k = self.shape(*x)[1];
                let d = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, k)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let xv = &self.value(*x).data;
                let d = g.iter().zip(xv).map(|(g, &a)| if a >= 0.0 { *g } else { -g }).collect();
                self.accumulate(grads, *x, d);
            }
            Op::NormalizeRows(x) => {
                let k = self.shape(*x)[1];
                let xv = &self.value(*x).data;
                let mut d = vec![0.0; xv.len()];
                for (r, ((xr, yr), gr)) in xv.chunks_exact(k).zip(out.data.chunks_exact(k)).zip(g.chunks_exact(k)).enumerate() {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..k {
                        d[r * k + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let len = out.shape[1];
                let mut d = vec![0.0; s[0] * s[1]];
                for (r, gr) in g.chunks_exact(len).enumerate() {
                    d[r * s[1] + start..r * s[1] + start + len].copy_from_slice(gr);
                }
                self.accumulate(grads, *x, d);
            }
        }
    }
}

/// Output indices `lo..hi` whose input tap `o * stride + k - pad` lies in `0..len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { (len + pad - k).div_ceil(stride).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.oh * g.ow;
    let mut out = vec![0.0; g.n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(n, dst)| {
        let xs = &x[n * in_sz..(n + 1) * in_sz];
        for o in 0..g.o {
            let plane = &mut dst[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
            plane.fill(b[o]);
            for c in 0..g.c {
                let xp = &xs[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (y0, y1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = w[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 * g.stride + kx - g.pad;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &xp[iy * g.w + ix0..(iy + 1) * g.w];
                            let orow = &mut plane[oy * g.ow + x0..oy * g.ow + x1];
                            for (ov, xv) in orow.iter_mut().zip(row.iter().step_by(g.stride)) {
                                *ov += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input(gout: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.oh * g.ow;
    let mut dx = vec![0.0; g.n * in_sz];
    dx.par_chunks_mut(in_sz).enumerate().for_each(|(n, dst)| {
        let gs = &gout[n * out_sz..(n + 1) * out_sz];
        for o in 0..g.o {
            let gp = &gs[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
            for c in 0..g.c {
                let dp = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (y0, y1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = w[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 * g.stride + kx - g.pad;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let drow = &mut dp[iy * g.w + ix0..(iy + 1) * g.w];
                            let grow = &gp[oy * g.ow + x0..oy * g.ow + x1];
                            for (dv, gv) in drow.iter_mut().step_by(g.stride).zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

fn conv_backward_weight(gout: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.oh * g.ow;
    let wsz = g.o * g.c * g.kh * g.kw;
    // per-sample partials, reduced in sample order for bit-stable results
    let partials: Vec<Vec<f64>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let xs = &x[n * in_sz..(n + 1) * in_sz];
            let gs = &gout[n * out_sz..(n + 1) * out_sz];
            let mut dw = vec![0.0; wsz];
            for o in 0..g.o {
                let gp = &gs[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
                for c in 0..g.c {
                    let xp = &xs[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let (y0, y1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                        for kx in 0..g.kw {
                            let (x0, x1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                            if x0 >= x1 {
                                continue;
                            }
                            let ix0 = x0 * g.stride + kx - g.pad;
                            let mut acc = 0.0;
                            for oy in y0..y1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let row = &xp[iy * g.w + ix0..(iy + 1) * g.w];
                                let grow = &gp[oy * g.ow + x0..oy * g.ow + x1];
                                for (gv, xv) in grow.iter().zip(row.iter().step_by(g.stride)) {
                                    acc += gv * xv;
                                }
                            }
                            dw[((o * g.c + c) * g.kh + ky) * g.kw + kx] = acc;
                        }
                    }
                }
            }
            dw
        })
        .collect();
    let mut dw = vec![0.0; wsz];
    for p in partials {
        dw.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
    }
    dw
}

/// Worst relative disagreement between backward gradients and central finite
/// differences of `build` for every input entry.
///
/// `build` records a scalar loss from leaves created for `inputs`. The relative
/// error of each entry is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck<F>(inputs: &[Tensor], eps: f64, floor: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone(), true)).collect();
        let loss = build(&mut t, &vars)?;
        Ok(t.value(loss).item())
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone(), true)).collect();
    let loss = build(&mut t, &vars)?;
    let grads = t.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.data(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data[j];
            probe[i].data[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut r = rng::rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(&mut r, lo, hi)).collect()).unwrap()
    }

    #[test]
    fn relu_forward_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), true);
        let y = t.relu(x);
        assert_eq!(t.value(y).data, vec![0.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.data(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t.constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let a = rand_tensor(&[3, 4], 1, -1.0, 1.0);
        let av = t.constant(a.clone());
        let out = t.matmul(eye, av).unwrap();
        assert_eq!(t.value(out), &a);
    }

    #[test]
    fn sum_and_square_gradients() {
        let w = rand_tensor(&[2, 3], 2, -1.0, 1.0);
        let mut t = Tape::new();
        let wv = t.leaf(w.clone(), true);
        let s = t.sum(wv);
        assert!(t.backward(s).unwrap().data(wv).unwrap().iter().all(|&g| g == 1.0));

        let mut t = Tape::new();
        let wv = t.leaf(w.clone(), true);
        let l = t.l2_loss(wv, &Tensor::zeros(&[2, 3])).unwrap();
        let g = t.backward(l).unwrap();
        for (gi, wi) in g.data(wv).unwrap().iter().zip(&w.data) {
            assert_eq!(*gi, 2.0 * wi);
        }
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]), true);
        let y = t.relu(x);
        assert_eq!(t.backward(y).unwrap_err(), AutodiffError::NotScalar(vec![2]));
        let c = t.constant(Tensor::zeros(&[2]));
        let s = t.sum(c);
        assert_eq!(t.backward(s).unwrap_err(), AutodiffError::DetachedGraph);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.backward(s).unwrap_err(), AutodiffError::AlreadyBackpropagated);
        t.reset();
        assert!(t.is_empty());
    }

    #[test]
    fn shape_errors_name_the_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(AutodiffError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
        let c = t.constant(Tensor::zeros(&[2]));
        assert!(t.add(a, c).is_err());
        let d = t.constant(Tensor::zeros(&[3]));
        assert!(t.add(a, d).is_ok());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = rand_tensor(&[1, 2, 5, 4], 3, -1.0, 1.0);
        let w = rand_tensor(&[3, 2, 3, 3], 4, -1.0, 1.0);
        let b = rand_tensor(&[3], 5, -1.0, 1.0);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 3, 3, 2]);
        // output (o=1, oy=1, ox=1) by hand from the definition
        let (o, oy, ox) = (1, 1, 1);
        let mut expect = b.data[o];
        for c in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    let ix = (ox * 2 + kx) as isize - 1;
                    if (0..5).contains(&iy) && (0..4).contains(&ix) {
                        expect += w.data[((o * 2 + c) * 3 + ky) * 3 + kx] * x.data[(c * 5 + iy as usize) * 4 + ix as usize];
                    }
                }
            }
        }
        let got = t.value(y).data[(o * 3 + oy) * 2 + ox];
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn upsample_and_concat_layout() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let u = t.upsample2x(a).unwrap();
        assert_eq!(t.value(u).data, vec![1., 1., 2., 2., 1., 1., 2., 2.]);
        let b = t.constant(Tensor::new(vec![1, 1, 2, 4], vec![9.0; 8]).unwrap());
        let c = t.concat(u, b).unwrap();
        assert_eq!(t.shape(c), &[1, 2, 2, 4]);
        assert_eq!(t.value(c).data[8], 9.0);
    }

    #[test]
    fn gradients_are_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(rand_tensor(&[4, 3, 8, 8], 9, -1.0, 1.0), false);
            let w = t.leaf(rand_tensor(&[5, 3, 3, 3], 10, -0.5, 0.5), true);
            let b = t.leaf(rand_tensor(&[5], 11, -0.5, 0.5), true);
            let y = t.conv2d(x, w, b, 2, 1).unwrap();
            let y = t.relu(y);
            let p = t.global_avg_pool(y).unwrap();
            let s = t.sum(p);
            let g = t.backward(s).unwrap();
            (g.data(w).unwrap().to_vec(), g.data(b).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    // Inputs are kept away from relu/abs kinks and bce clamps so the
    // finite differences see smooth functions.
    fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
        let mut t = rand_tensor(shape, seed, 0.2, 1.0);
        let mut r = rng::rng(seed ^ 77);
        for v in &mut t.data {
            if rng::uniform(&mut r, 0.0, 1.0) < 0.5 {
                *v = -*v;
            }
        }
        t
    }

    fn check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let err = gradcheck(inputs, 1e-4, 1e-6, build).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    // weighted sum so every output entry carries a distinct upstream gradient
    fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let w = rand_tensor(t.shape(y), seed, -1.0, 1.0);
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }

    #[test]
    fn gradcheck_conv2d() {
        let ins = [rand_tensor(&[2, 3, 5, 4], 1, -1.0, 1.0), rand_tensor(&[4, 3, 3, 3], 2, -1.0, 1.0), rand_tensor(&[4], 3, -1.0, 1.0)];
        check(&ins, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            project(t, y, 4)
        });
        check(&ins, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 0)?;
            project(t, y, 5)
        });
    }

    #[test]
    fn gradcheck_pointwise() {
        let x = [away_from_zero(&[2, 3, 4], 6)];
        check(&x, |t, v| {
            let y = t.relu(v[0]);
            project(t, y, 7)
        });
        check(&x, |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, 8)
        });
        check(&x, |t, v| {
            let y = t.abs(v[0]);
            project(t, y, 9)
        });
        check(&x, |t, v| {
            let y = t.affine(v[0], -0.7, 0.3);
            project(t, y, 10)
        });
    }

    #[test]
    fn gradcheck_pool_upsample_concat() {
        let x = [rand_tensor(&[2, 3, 3, 4], 11, -1.0, 1.0), rand_tensor(&[2, 2, 6, 8], 12, -1.0, 1.0)];
        check(&x, |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, 13)
        });
        check(&x, |t, v| {
            let u = t.upsample2x(v[0])?;
            let c = t.concat(u, v[1])?;
            project(t, c, 14)
        });
    }

    #[test]
    fn gradcheck_matmul_and_broadcast() {
        let x = [rand_tensor(&[3, 4], 15, -1.0, 1.0), rand_tensor(&[4, 5], 16, -1.0, 1.0), rand_tensor(&[5], 17, -1.0, 1.0)];
        check(&x, |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let a = t.add(m, v[2])?;
            let b = t.mul(a, v[2])?;
            project(t, b, 18)
        });
        let y = [rand_tensor(&[2, 3, 4, 5], 19, -1.0, 1.0), rand_tensor(&[2, 3, 4, 5], 20, -1.0, 1.0)];
        check(&y, |t, v| {
            let m = t.mul(v[0], v[1])?;
            let d = t.sub(m, v[1])?;
            project(t, d, 21)
        });
    }

    #[test]
    fn gradcheck_losses_and_rows() {
        let p = [rand_tensor(&[2, 1, 3, 3], 22, 0.1, 0.9)];
        let target = rand_tensor(&[2, 1, 3, 3], 23, 0.0, 1.0);
        check(&p, |t, v| t.bce_loss(v[0], &target));
        let a = [rand_tensor(&[3, 7], 24, -1.0, 1.0)];
        let zero = rand_tensor(&[3, 4], 25, -1.0, 1.0);
        check(&a, |t, v| {
            let q = t.slice_cols(v[0], 0, 4)?;
            let n = t.normalize_rows(q)?;
            t.l2_loss(n, &zero)
        });
        check(&a, |t, v| {
            let r = t.sum_rows(v[0])?;
            project(t, r, 26)
        });
    }

    #[test]
    fn gradcheck_small_network() {
        let ins = [
            rand_tensor(&[2, 3, 8, 8], 30, -1.0, 1.0),
            rand_tensor(&[4, 3, 3, 3], 31, -0.5, 0.5),
            rand_tensor(&[4], 32, -0.1, 0.1),
            rand_tensor(&[4, 5], 33, -0.5, 0.5),
        ];
        check(&ins, |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            let r = t.relu(c);
            let p = t.global_avg_pool(r)?;
            let m = t.matmul(p, v[3])?;
            project(t, m, 34)
        });
    }
}
