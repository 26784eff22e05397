//! Wengert-list reverse-mode autodiff.
//!
//! Every op appends a node holding its output value. [`Tape::backward`]
//! walks the list in reverse and leaves gradients on the leaf nodes; callers
//! copy them into parameter tensors (`+=` semantics) with
//! [`Tape::accumulate_into`].
//!
//! An inference tape ([`Tape::inference`]) keeps values only, skips the
//! im2col caches and refuses to run backward.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::conv::{self, ConvShape, ConvSpec};
use crate::tensor::linalg::{gemm, Layout};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-sample reduction over all non-batch axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduction {
    Mean,
    Min,
    Max,
    /// Mean of the two middle order statistics for even counts.
    Median,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Log,
    Exp,
    Square,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        shape: ConvShape,
        cols: Option<Vec<f64>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SoftmaxFlat(Var),
    Sum(Var),
    Mean(Var),
    /// Per-sample reduction recorded as (flat index, weight) picks.
    PerSample {
        x: Var,
        picks: Vec<Vec<(usize, f64)>>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

const LINEAR_ROWS: usize = 16;

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn batch_of(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::shape(op, format!("needs a non-empty batch axis, got {shape:?}")));
    }
    let n = shape[0];
    let per = numel(shape) / n;
    if per == 0 {
        return Err(Error::shape(op, format!("empty sample in {shape:?}")));
    }
    Ok((n, per))
}

impl Tape {
    /// A recording tape that supports [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
        }
    }

    /// A forward-only tape.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad: needs_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf holding `data`; gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("leaf", format!("{shape:?} with {} values", data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    /// Leaf copied from a tensor, tracking gradients if the tensor does.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Leaf copied from a tensor that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Gradient left on a leaf by the last backward pass(es).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds this tape's gradient for `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    // ---- layers ---------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let shape = ConvShape::resolve(self.shape(x), self.shape(w), self.shape(b), spec)?;
        let (out, cols) = conv::forward(
            self.value(x),
            self.value(w),
            self.value(b),
            &shape,
            self.record,
        );
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            shape.out_shape(),
            out,
            Op::Conv {
                x,
                w,
                b,
                shape,
                cols,
            },
            needs,
        ))
    }

    /// `x·wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            parallel::for_each_chunk(&mut out, LINEAR_ROWS * dout, |ci, o| {
                let rows = o.len() / dout;
                for r in o.chunks_mut(dout) {
                    r.copy_from_slice(bv);
                }
                let xs = &xv[ci * LINEAR_ROWS * din..(ci * LINEAR_ROWS + rows) * din];
                gemm(rows, din, dout, 1.0, xs, Layout::row(din), wv, Layout::trans(din), 1.0, o, Layout::row(dout));
            });
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(vec![n, dout], out, Op::Linear { x, w, b }, needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {xs:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (n, d) = (xs[0], xs[1]);
        let xv = self.value(x);
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + bt[j];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            xs,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Relu => Box::new(|v: f64| v.max(0.0)),
            Unary::LeakyRelu(a) => Box::new(move |v: f64| if v > 0.0 { v } else { a * v }),
            Unary::Tanh => Box::new(f64::tanh),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Log => Box::new(f64::ln),
            Unary::Exp => Box::new(f64::exp),
            Unary::Square => Box::new(|v: f64| v * v),
            Unary::Scale(c) => Box::new(move |v: f64| c * v),
            Unary::AddScalar(c) => Box::new(move |v: f64| v + c),
            Unary::Clamp(lo, hi) => Box::new(move |v: f64| v.clamp(lo, hi)),
        };
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Unary { x, kind }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    /// Natural log; every input must be strictly positive (clamp first).
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, Unary::Log))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Scale(-1.0))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::AddScalar(c))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(&[a, b]);
        let node = match op {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(self.shape(a).to_vec(), out, node, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    // ---- reductions and reshaping ---------------------------------------

    /// Softmax over all entries of each sample (axis 0 is the batch).
    pub fn softmax_flat(&mut self, x: Var) -> Result<Var> {
        let (_, per) = batch_of("softmax_flat", self.shape(x))?;
        let mut out = self.value(x).to_vec();
        for s in out.chunks_mut(per) {
            softmax_in_place(s);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::SoftmaxFlat(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let needs = self.needs(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let needs = self.needs(&[x]);
        self.push(vec![], vec![s], Op::Mean(x), needs)
    }

    /// Reduces each sample to one value; output shape `[N]`.
    pub fn reduce_per_sample(&mut self, x: Var, kind: Reduction) -> Result<Var> {
        let (n, per) = batch_of("reduce_per_sample", self.shape(x))?;
        let v = self.value(x);
        let mut out = Vec::with_capacity(n);
        let mut picks = Vec::with_capacity(n);
        for i in 0..n {
            let s = &v[i * per..(i + 1) * per];
            let p = reduction_picks(s, kind);
            out.push(p.iter().map(|&(j, w)| w * s[j]).sum());
            picks.push(p.into_iter().map(|(j, w)| (i * per + j, w)).collect());
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![n], out, Op::PerSample { x, picks }, needs))
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat", format!("rank < 2: {s0:?}")));
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut width = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len() || s[0] != n || s[2..] != s0[2..] {
                return Err(Error::shape("concat", format!("{s0:?} vs {s:?}")));
            }
            width += s[1];
        }
        let mut out = Vec::with_capacity(n * width * inner);
        for i in 0..n {
            for p in parts {
                let s = self.shape(*p);
                let per = s[1] * inner;
                out.extend_from_slice(&self.value(*p)[i * per..(i + 1) * per]);
            }
        }
        let mut shape = s0;
        shape[1] = width;
        let needs = self.needs(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let v = self.value(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(shape, v, Op::Reshape(x), needs))
    }

    /// `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (n, per) = batch_of("flatten", self.shape(x))?;
        self.reshape(x, vec![n, per])
    }

    // ---- backward -------------------------------------------------------

    /// Backpropagates from a one-element node with seed 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check_root(root)?;
        if self.node(root).value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must hold one value, has shape {:?}", self.node(root).shape),
            ));
        }
        self.backward_with(root, vec![1.0])
    }

    /// Backpropagates an arbitrary upstream gradient from `root`.
    pub fn backward_with(&mut self, root: Var, seed: Vec<f64>) -> Result<()> {
        self.check_root(root)?;
        if seed.len() != self.node(root).value.len() {
            return Err(Error::shape(
                "backward",
                format!("seed of length {} for {:?}", seed.len(), self.node(root).shape),
            ));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, g, &mut pending)?;
        }
        Ok(())
    }

    fn check_root(&self, root: Var) -> Result<()> {
        if !self.record {
            return Err(Error::NoRecordedForward("tape is in inference mode".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::NoRecordedForward(format!("unknown node {}", root.0)));
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Vec<f64>, pending: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let mut send = |v: Var, delta: Vec<f64>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut pending[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {
                let slot = &mut self.grads[i];
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    None => *slot = Some(g),
                }
            }
            Op::Conv {
                x,
                w,
                b,
                shape,
                cols,
            } => {
                let cols = cols
                    .as_ref()
                    .ok_or_else(|| Error::NoRecordedForward("conv cache missing".into()))?;
                let grads = conv::backward(cols, &nodes[w.0].value, &g, shape, nodes[x.0].needs_grad);
                if let Some(dx) = grads.dx {
                    send(*x, dx);
                }
                send(*w, grads.dw);
                send(*b, grads.db);
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let dout = nodes[w.0].shape[0];
                if nodes[x.0].needs_grad {
                    let wv = &nodes[w.0].value;
                    let mut dx = vec![0.0; n * din];
                    parallel::for_each_chunk(&mut dx, LINEAR_ROWS * din, |ci, d| {
                        let rows = d.len() / din;
                        let gs = &g[ci * LINEAR_ROWS * dout..(ci * LINEAR_ROWS + rows) * dout];
                        gemm(rows, dout, din, 1.0, gs, Layout::row(dout), wv, Layout::row(din), 0.0, d, Layout::row(din));
                    });
                    send(*x, dx);
                }
                if nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; dout * din];
                    gemm(
                        dout,
                        n,
                        din,
                        1.0,
                        &g,
                        Layout::trans(dout),
                        &nodes[x.0].value,
                        Layout::row(din),
                        0.0,
                        &mut dw,
                        Layout::row(din),
                    );
                    send(*w, dw);
                }
                let mut db = vec![0.0; dout];
                for r in g.chunks(dout) {
                    db.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                }
                send(*b, db);
            }
            Op::Unary { x, kind } => {
                let xv = &nodes[x.0].value;
                let y = &node.value;
                let d: Vec<f64> = match *kind {
                    Unary::Relu => zip_map(&g, xv, |g, x| if x > 0.0 { g } else { 0.0 }),
                    Unary::LeakyRelu(a) => zip_map(&g, xv, |g, x| if x > 0.0 { g } else { a * g }),
                    Unary::Tanh => zip_map(&g, y, |g, y| g * (1.0 - y * y)),
                    Unary::Sigmoid => zip_map(&g, y, |g, y| g * y * (1.0 - y)),
                    Unary::Log => zip_map(&g, xv, |g, x| g / x),
                    Unary::Exp => zip_map(&g, y, |g, y| g * y),
                    Unary::Square => zip_map(&g, xv, |g, x| 2.0 * g * x),
                    Unary::Scale(c) => g.iter().map(|v| c * v).collect(),
                    Unary::AddScalar(_) => g,
                    Unary::Clamp(lo, hi) => {
                        zip_map(&g, xv, |g, x| if (lo..=hi).contains(&x) { g } else { 0.0 })
                    }
                };
                send(*x, d);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.iter().map(|v| -v).collect());
                send(*a, g);
            }
            Op::Mul(a, b) => {
                send(*a, zip_map(&g, &nodes[b.0].value, |g, y| g * y));
                send(*b, zip_map(&g, &nodes[a.0].value, |g, x| g * x));
            }
            Op::SoftmaxFlat(x) => {
                let per = numel(&node.shape) / node.shape[0];
                let mut d = vec![0.0; g.len()];
                for ((dc, gc), yc) in d.chunks_mut(per).zip(g.chunks(per)).zip(node.value.chunks(per)) {
                    let dot: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                    for j in 0..per {
                        dc[j] = yc[j] * (gc[j] - dot);
                    }
                }
                send(*x, d);
            }
            Op::Sum(x) => send(*x, vec![g[0]; nodes[x.0].value.len()]),
            Op::Mean(x) => {
                let m = nodes[x.0].value.len();
                send(*x, vec![g[0] / m as f64; m]);
            }
            Op::PerSample { x, picks } => {
                let mut d = vec![0.0; nodes[x.0].value.len()];
                for (gi, p) in g.iter().zip(picks) {
                    for &(j, w) in p {
                        d[j] += gi * w;
                    }
                }
                send(*x, d);
            }
            Op::Concat(parts) => {
                let n = node.shape[0];
                let inner: usize = node.shape[2..].iter().product();
                let width = node.shape[1] * inner;
                let mut offset = 0;
                for p in parts {
                    let per = nodes[p.0].shape[1] * inner;
                    let mut d = Vec::with_capacity(n * per);
                    for i in 0..n {
                        d.extend_from_slice(&g[i * width + offset..i * width + offset + per]);
                    }
                    offset += per;
                    send(*p, d);
                }
            }
            Op::Reshape(x) => send(*x, g),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.shape[1];
                let gm = &nodes[gamma.0].value;
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (i, gr) in g.chunks(d).enumerate() {
                    let xh = &xhat[i * d..(i + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        s1 += dxh;
                        s2 += dxh * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        dx[i * d + j] = inv_std[i] * (dxh - s1 / d as f64 - xh[j] * s2 / d as f64);
                    }
                }
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax over the whole slice.
pub fn softmax_in_place(s: &mut [f64]) {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in s.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in s.iter_mut() {
        *v /= z;
    }
}

/// Indices and weights whose weighted sum gives the reduction of `s`.
pub(crate) fn reduction_picks(s: &[f64], kind: Reduction) -> Vec<(usize, f64)> {
    let m = s.len();
    match kind {
        Reduction::Mean => (0..m).map(|j| (j, 1.0 / m as f64)).collect(),
        Reduction::Min | Reduction::Max => {
            let mut best = 0;
            for j in 1..m {
                let better = match kind {
                    Reduction::Min => s[j] < s[best],
                    _ => s[j] > s[best],
                };
                if better {
                    best = j;
                }
            }
            vec![(best, 1.0)]
        }
        Reduction::Median => {
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
            if m % 2 == 1 {
                vec![(idx[m / 2], 1.0)]
            } else {
                vec![(idx[m / 2 - 1], 0.5), (idx[m / 2], 0.5)]
            }
        }
    }
}

/// Reduction of a plain slice.
pub fn reduce(s: &[f64], kind: Reduction) -> f64 {
    reduction_picks(s, kind).iter().map(|&(j, w)| w * s[j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn softmax_of_constant_grid_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 39, 39], vec![3.7; 1521], false).unwrap();
        let y = t.softmax_flat(x).unwrap();
        for &v in t.value(y) {
            assert!((v - 1.0 / 1521.0).abs() < 1e-15);
        }
    }

    #[test]
    fn median_even_count_averages_middle_pair() {
        assert_eq!(reduce(&[1.0, 2.0, 3.0, 4.0], Reduction::Median), 2.5);
        assert_eq!(reduce(&[4.0, 1.0, 3.0], Reduction::Median), 3.0);
        assert_eq!(reduce(&[4.0, 1.0, 3.0, 2.0], Reduction::Min), 1.0);
        assert_eq!(reduce(&[4.0, 1.0, 3.0, 2.0], Reduction::Max), 4.0);
        assert_eq!(reduce(&[4.0, 1.0, 3.0, 2.0], Reduction::Mean), 2.5);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.0, 0.0], false).unwrap();
        assert!(matches!(t.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_needs_a_recording_tape() {
        let mut t = Tape::inference();
        let x = t.leaf(vec![1], vec![1.0], true).unwrap();
        let y = t.square(x);
        assert!(matches!(t.backward(y), Err(Error::NoRecordedForward(_))));
        let mut t = Tape::new();
        assert!(matches!(t.backward(Var(3)), Err(Error::NoRecordedForward(_))));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![3.0], true).unwrap();
        let y = t.square(x);
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        let c = t.constant(&Tensor::new(vec![2], vec![5.0, 7.0]).unwrap());
        let p = t.mul(a, c).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[5.0, 7.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn single_pixel_conv_weight_gradient_is_input() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 1, 1, 1], vec![0.37], false).unwrap();
        let w = t.leaf(vec![1, 1, 1, 1], vec![2.0], true).unwrap();
        let b = t.leaf(vec![1], vec![0.0], true).unwrap();
        let y = t.conv2d(x, w, b, ConvSpec::new(1, 1, 1, 0).unwrap()).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[0.37]);
        assert_eq!(t.grad(b).unwrap(), &[1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_parameter_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 2, 4, 4], (0..32).map(|v| v as f64 * 0.1).collect(), false).unwrap();
        let w = t.leaf(vec![3, 2, 2, 2], vec![0.5; 24], true).unwrap();
        let b = t.leaf(vec![3], vec![0.1; 3], true).unwrap();
        let y = t.conv2d(x, w, b, ConvSpec::new(2, 3, 1, 0).unwrap()).unwrap();
        let n = t.value(y).len();
        t.backward_with(y, vec![0.0; n]).unwrap();
        assert!(t.grad(w).unwrap().iter().all(|&v| v == 0.0));
        assert!(t.grad(b).unwrap().iter().all(|&v| v == 0.0));
    }
}
