use super::kernels::{self, Frames, Padding};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded primitive application.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    /// `x·w + b`, bias broadcast over rows.
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Mean {
        x: Var,
        axes: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        padding: Padding,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    TemporalShift {
        x: Var,
        fold: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<F> {
    op: Op,
    shape: Vec<usize>,
    /// Empty on shape-only tapes.
    value: Vec<F>,
    requires_grad: bool,
}

/// Linear record of primitive applications in evaluation order.
///
/// A shape-only tape validates and propagates shapes without allocating or
/// computing values, which lets full-scale dimensions be checked cheaply.
#[derive(Debug, Clone)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    numeric: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `v`, or `None` if no gradient flowed into it.
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Borrowed gradient values for `v`.
    pub fn slice(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Gradient for `v`, zero-filled when nothing reached it.
    pub fn get_or_zero(&self, v: Var) -> Tensor<F> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn matrix_dims(op: &'static str, s: &[usize]) -> Result<(usize, usize)> {
    match *s {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn frames_of(op: &'static str, s: &[usize]) -> Result<Frames> {
    if s.len() != 4 {
        return Err(Error::invalid(op, format!("expected T×C×H×W, got shape {s:?}")));
    }
    Ok(Frames::of(s))
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            numeric: true,
        }
    }

    /// A tape that records shapes only. Reading values from it panics.
    pub fn shape_only() -> Self {
        Tape {
            nodes: Vec::new(),
            numeric: false,
        }
    }

    pub fn is_numeric(&self) -> bool {
        self.numeric
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn data(&self, v: Var) -> &[F] {
        assert!(self.numeric, "values are not recorded on a shape-only tape");
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.data(v).to_vec()).expect("recorded value matches its shape")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> F {
        self.data(v)[0]
    }

    pub fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> Var {
        let value = if self.numeric { t.data().to_vec() } else { Vec::new() };
        self.push_node(Op::Leaf, t.shape().to_vec(), value, requires_grad)
    }

    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf described only by its shape; valid on shape-only tapes.
    pub fn symbolic_leaf(&mut self, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if self.numeric {
            return Err(Error::invalid(
                "symbolic_leaf",
                "numeric tapes need concrete leaf values",
            ));
        }
        Ok(self.push_node(Op::Leaf, shape.to_vec(), Vec::new(), requires_grad))
    }

    fn push_node(&mut self, op: Op, shape: Vec<usize>, value: Vec<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> Result<Var> {
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        let value = if self.numeric {
            let value = compute(&op, &shape, |v| &self.nodes[v.0].shape, |v| &self.nodes[v.0].value)?;
            debug_assert_eq!(value.len(), numel(&shape));
            value
        } else {
            Vec::new()
        };
        Ok(self.push_node(op, shape, value, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(sa.to_vec())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        self.push(Op::MatMul(a, b), vec![m, n])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.shape(a))?;
        self.push(Op::Transpose(a), vec![n, m])
    }

    /// `x·w + b` for `x: n×d_in`, `w: d_in×d_out`, `b: d_out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = matrix_dims("affine", self.shape(x))?;
        let (din2, dout) = matrix_dims("affine", self.shape(w))?;
        if din != din2 {
            return Err(Error::shape("affine", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [dout] {
            return Err(Error::shape("affine", self.shape(w), self.shape(b)));
        }
        self.push(Op::Affine { x, w, b }, vec![n, dout])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        self.push(Op::Add(a, b), s)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        self.push(Op::Sub(a, b), s)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        self.push(Op::Mul(a, b), s)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), s)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.push(Op::Tanh(a), s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.push(Op::Relu(a), s)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix_dims("softmax_rows", self.shape(a))?;
        self.push(Op::SoftmaxRows(a), vec![r, c])
    }

    /// Arithmetic mean over `axes`; reducing every axis yields shape `[1]`.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.is_empty() {
            return Err(Error::invalid("mean_pool", "no axes to reduce"));
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() {
            return Err(Error::invalid("mean_pool", format!("repeated axis in {axes:?}")));
        }
        if let Some(&bad) = sorted.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::invalid(
                "mean_pool",
                format!("axis {bad} out of range for shape {shape:?}"),
            ));
        }
        let out = kernels::reduced_shape(&shape, &sorted);
        self.push(Op::Mean { x, axes: sorted }, out)
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        shape[axis] = len;
        self.push(Op::Narrow { x, axis, start }, shape)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
        let mut shape = self.shape(first).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        for &v in &xs[1..] {
            let s = self.shape(v);
            let compatible =
                s.len() == shape.len() && s.iter().zip(&shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &shape, s));
            }
            shape[axis] += s[axis];
        }
        self.push(Op::Concat { xs: xs.to_vec(), axis }, shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        self.push(Op::Reshape(x), shape.to_vec())
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x), vec![1])
    }

    /// Cross-entropy of a logit vector (`[C]` or `[1, C]`) against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let c = numel(self.shape(logits));
        let is_vector = matches!(self.shape(logits), [_] | [1, _]);
        if !is_vector {
            return Err(Error::invalid(
                "cross_entropy",
                format!("expected a logit vector, got {:?}", self.shape(logits)),
            ));
        }
        if label >= c {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {label} out of range for {c} classes"),
            ));
        }
        self.push(Op::CrossEntropy { logits, label }, vec![1])
    }

    /// Same-size convolution of every frame: `x: N×C×H×W`, `w: C'×C×k×k`, `b: C'`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        let f = frames_of("conv2d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        let ok = ws.len() == 4 && ws[1] == f.c && ws[2] == ws[3] && ws[2] % 2 == 1;
        if !ok {
            return Err(Error::shape("conv2d", self.shape(x), &ws));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::shape("conv2d", &ws, self.shape(b)));
        }
        self.push(Op::Conv2d { x, w, b, padding }, vec![f.n, ws[0], f.h, f.w])
    }

    /// Non-overlapping `k×k` average pooling of every frame.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let f = frames_of("avg_pool", self.shape(x))?;
        if k == 0 || f.h % k != 0 || f.w % k != 0 {
            return Err(Error::invalid(
                "avg_pool",
                format!("{}x{} frames are not divisible by window {k}", f.h, f.w),
            ));
        }
        self.push(Op::AvgPool { x, k }, vec![f.n, f.c, f.h / k, f.w / k])
    }

    /// Shifts `fold` channels one frame earlier and the next `fold` one frame later.
    pub fn temporal_shift(&mut self, x: Var, fold: usize) -> Result<Var> {
        let f = frames_of("temporal_shift", self.shape(x))?;
        if 2 * fold > f.c {
            return Err(Error::invalid(
                "temporal_shift",
                format!("cannot shift 2x{fold} of {} channels", f.c),
            ));
        }
        self.push(Op::TemporalShift { x, fold }, self.shape(x).to_vec())
    }

    /// Reverse-mode accumulation from a scalar `seed`.
    pub fn backward(&self, seed: Var) -> Result<Gradients<F>> {
        if !self.numeric {
            return Err(Error::invalid("backward", "shape-only tape has no values"));
        }
        if numel(self.shape(seed)) != 1 {
            return Err(Error::invalid(
                "backward",
                format!("seed must be scalar, got shape {:?}", self.shape(seed)),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(vec![F::one()]);
        for i in (0..=seed.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<F>>> {
        let mut values: Vec<Vec<F>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => compute(op, &node.shape, |v| &self.nodes[v.0].shape, |v| &values[v.0])?,
            };
            values.push(v);
        }
        values
            .into_iter()
            .zip(&self.nodes)
            .map(|(v, n)| Tensor::new(n.shape.clone(), v))
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, contribution: Vec<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => add_into(g, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce() -> Vec<F>) {
        if self.nodes[v.0].requires_grad {
            let c = f();
            self.accumulate(grads, v, c);
        }
    }

    fn backprop(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let shp = |v: Var| self.nodes[v.0].shape.as_slice();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[1];
                self.accumulate_with(grads, a, || {
                    let mut da = vec![F::zero(); m * k];
                    kernels::gemm(m, n, k, g, false, val(b), true, F::zero(), &mut da);
                    da
                });
                self.accumulate_with(grads, b, || {
                    let mut db = vec![F::zero(); k * n];
                    kernels::gemm(k, m, n, val(a), true, g, false, F::zero(), &mut db);
                    db
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (shp(a)[0], shp(a)[1]);
                self.accumulate_with(grads, a, || {
                    let mut da = vec![F::zero(); m * n];
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] = g[c * m + r];
                        }
                    }
                    da
                });
            }
            Op::Affine { x, w, b } => {
                let (n, din) = (shp(x)[0], shp(x)[1]);
                let dout = shp(w)[1];
                self.accumulate_with(grads, x, || {
                    let mut dx = vec![F::zero(); n * din];
                    kernels::gemm(n, dout, din, g, false, val(w), true, F::zero(), &mut dx);
                    dx
                });
                self.accumulate_with(grads, w, || {
                    let mut dw = vec![F::zero(); din * dout];
                    kernels::gemm(din, n, dout, val(x), true, g, false, F::zero(), &mut dw);
                    dw
                });
                self.accumulate_with(grads, b, || {
                    let mut db = vec![F::zero(); dout];
                    for row in g.chunks(dout) {
                        add_into(&mut db, row);
                    }
                    db
                });
            }
            Op::Add(a, b) => {
                self.accumulate_with(grads, a, || g.to_vec());
                self.accumulate_with(grads, b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, a, || g.to_vec());
                self.accumulate_with(grads, b, || g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                self.accumulate_with(grads, a, || g.iter().zip(val(b)).map(|(&g, &y)| g * y).collect());
                self.accumulate_with(grads, b, || g.iter().zip(val(a)).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(a, c) => {
                let c = F::of(c);
                self.accumulate_with(grads, a, || g.iter().map(|&v| v * c).collect());
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accumulate_with(grads, a, || {
                    g.iter().zip(y).map(|(&g, &s)| g * s * (F::one() - s)).collect()
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.accumulate_with(grads, a, || {
                    g.iter().zip(y).map(|(&g, &t)| g * (F::one() - t * t)).collect()
                });
            }
            Op::Relu(a) => {
                self.accumulate_with(grads, a, || {
                    g.iter()
                        .zip(val(a))
                        .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                        .collect()
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.shape[1];
                let y = &node.value;
                self.accumulate_with(grads, a, || {
                    let mut dx = vec![F::zero(); y.len()];
                    for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: F = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (g - dot);
                        }
                    }
                    dx
                });
            }
            Op::Mean { x, ref axes } => {
                self.accumulate_with(grads, x, || {
                    let mut dx = vec![F::zero(); numel(shp(x))];
                    kernels::mean_axes_backward(g, shp(x), axes, &mut dx);
                    dx
                });
            }
            Op::Narrow { x, axis, start } => {
                let len = node.shape[axis];
                self.accumulate_with(grads, x, || {
                    let mut dx = vec![F::zero(); numel(shp(x))];
                    kernels::narrow_backward(g, shp(x), axis, start, len, &mut dx);
                    dx
                });
            }
            Op::Concat { ref xs, axis } => {
                let mut offset = 0;
                for &v in xs {
                    let len = shp(v)[axis];
                    self.accumulate_with(grads, v, || kernels::narrow(g, &node.shape, axis, offset, len));
                    offset += len;
                }
            }
            Op::Reshape(a) => self.accumulate_with(grads, a, || g.to_vec()),
            Op::Sum(a) => self.accumulate_with(grads, a, || vec![g[0]; numel(shp(a))]),
            Op::CrossEntropy { logits, label } => {
                self.accumulate_with(grads, logits, || {
                    let mut p = kernels::softmax(val(logits));
                    p[label] = p[label] - F::one();
                    p.iter().map(|&v| v * g[0]).collect()
                });
            }
            Op::Conv2d { x, w, b, padding } => {
                let f = Frames::of(shp(x));
                let ws = shp(w);
                let want_dx = self.nodes[x.0].requires_grad;
                let want_params = self.nodes[w.0].requires_grad || self.nodes[b.0].requires_grad;
                if want_dx || want_params {
                    let (dx, dw, db) = kernels::conv2d_backward(g, val(x), f, val(w), ws[0], ws[2], padding, want_dx);
                    if let Some(dx) = dx {
                        self.accumulate(grads, x, dx);
                    }
                    self.accumulate(grads, w, dw);
                    self.accumulate(grads, b, db);
                }
            }
            Op::AvgPool { x, k } => {
                let f = Frames::of(shp(x));
                self.accumulate_with(grads, x, || kernels::avg_pool_backward(g, f, k));
            }
            Op::TemporalShift { x, fold } => {
                let f = Frames::of(shp(x));
                self.accumulate_with(grads, x, || kernels::temporal_shift(g, f, fold, true));
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::SoftmaxRows(a)
        | Op::Reshape(a)
        | Op::Sum(a) => vec![a],
        Op::Affine { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![x, w, b],
        Op::Mean { x, .. } | Op::Narrow { x, .. } | Op::AvgPool { x, .. } | Op::TemporalShift { x, .. } => vec![x],
        Op::CrossEntropy { logits, .. } => vec![logits],
        Op::Concat { ref xs, .. } => xs.clone(),
    }
}

fn map<F: Real>(x: &[F], f: impl Fn(F) -> F) -> Vec<F> {
    x.iter().map(|&v| f(v)).collect()
}

fn zip<F: Real>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Forward kernel for one op, reading inputs through the given accessors.
fn compute<'a, F: Real + 'a>(
    op: &Op,
    out_shape: &[usize],
    shp: impl Fn(Var) -> &'a [usize],
    val: impl Fn(Var) -> &'a [F],
) -> Result<Vec<F>> {
    Ok(match *op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => {
            let (m, k) = (shp(a)[0], shp(a)[1]);
            let n = shp(b)[1];
            let mut c = vec![F::zero(); m * n];
            kernels::gemm(m, k, n, val(a), false, val(b), false, F::zero(), &mut c);
            c
        }
        Op::Transpose(a) => {
            let (m, n) = (shp(a)[0], shp(a)[1]);
            let x = val(a);
            let mut out = vec![F::zero(); m * n];
            for r in 0..m {
                for c in 0..n {
                    out[c * m + r] = x[r * n + c];
                }
            }
            out
        }
        Op::Affine { x, w, b } => {
            let (n, din) = (shp(x)[0], shp(x)[1]);
            let dout = shp(w)[1];
            let mut out: Vec<F> = val(b).iter().copied().cycle().take(n * dout).collect();
            kernels::gemm(n, din, dout, val(x), false, val(w), false, F::one(), &mut out);
            out
        }
        Op::Add(a, b) => zip(val(a), val(b), |x, y| x + y),
        Op::Sub(a, b) => zip(val(a), val(b), |x, y| x - y),
        Op::Mul(a, b) => zip(val(a), val(b), |x, y| x * y),
        Op::Scale(a, c) => {
            let c = F::of(c);
            map(val(a), |x| x * c)
        }
        Op::Sigmoid(a) => map(val(a), |x| F::one() / (F::one() + (-x).exp())),
        Op::Tanh(a) => map(val(a), F::tanh),
        Op::Relu(a) => map(val(a), |x| x.max(F::zero())),
        Op::SoftmaxRows(a) => {
            let x = val(a);
            if x.iter().any(|v| v.is_nan()) {
                return Err(Error::numeric("softmax_rows", "NaN input"));
            }
            let c = out_shape[1];
            let mut out = vec![F::zero(); x.len()];
            for (o, r) in out.chunks_mut(c).zip(x.chunks(c)) {
                kernels::softmax_into(r, o);
            }
            out
        }
        Op::Mean { x, ref axes } => kernels::mean_axes(val(x), shp(x), axes),
        Op::Narrow { x, axis, start } => kernels::narrow(val(x), shp(x), axis, start, out_shape[axis]),
        Op::Concat { ref xs, axis } => {
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(numel(out_shape));
            for o in 0..outer {
                for &v in xs {
                    let chunk = shp(v)[axis] * inner;
                    out.extend_from_slice(&val(v)[o * chunk..(o + 1) * chunk]);
                }
            }
            out
        }
        Op::Reshape(a) => val(a).to_vec(),
        Op::Sum(a) => vec![val(a).iter().copied().sum()],
        Op::CrossEntropy { logits, label } => vec![kernels::cross_entropy(val(logits), label)?],
        Op::Conv2d { x, w, b, padding } => {
            let ws = shp(w);
            kernels::conv2d(val(x), Frames::of(shp(x)), val(w), val(b), ws[0], ws[2], padding)
        }
        Op::AvgPool { x, k } => kernels::avg_pool(val(x), Frames::of(shp(x)), k),
        Op::TemporalShift { x, fold } => kernels::temporal_shift(val(x), Frames::of(shp(x)), fold, false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(&t(&[2, 1], &[5., 6.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.data(c), tape.data(b));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[1], &[3.0]));
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[1], &[3.0]));
        let c = tape.constant(&t(&[1], &[5.0]));
        let y = tape.mul(x, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn backward_requires_scalar_seed() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 2], &[0.0, 0.0, 0.0, 3f64.ln()]));
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.data(s);
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 0.25).abs() < 1e-15 && (v[3] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[0.0, f64::NAN]));
        assert!(tape.softmax_rows(x).unwrap_err().is_numeric());
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2], &[0.0, 30.0]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.data(s)[0], 0.5);
        assert!((tape.data(s)[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mean_pool_full_shape_and_errors() {
        let mut tape = Tape::<f32>::shape_only();
        let m = tape.symbolic_leaf(&[16, 2048, 16, 16], false).unwrap();
        let g = tape.mean(m, &[2, 3]).unwrap();
        assert_eq!(tape.shape(g), &[16, 2048]);
        assert!(tape.mean(m, &[]).is_err());
        assert!(tape.mean(m, &[2, 2]).is_err());
        assert!(tape.mean(m, &[4]).is_err());
    }

    #[test]
    fn mean_pool_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::<f64>::full(&[2, 3, 4], 1.5));
        let m = tape.mean(x, &[1, 2]).unwrap();
        assert_eq!(tape.data(m), &[1.5, 1.5]);
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap().get(x).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0 / 12.0));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let mut tape = Tape::new();
        let x = tape.param(&t(&[4], &logits));
        let l = tape.cross_entropy(x, 2).unwrap();
        let g = tape.backward(l).unwrap().get(x).unwrap();
        let mut expected = kernels::softmax(&logits);
        expected[2] -= 1.0;
        assert_eq!(g.data(), expected.as_slice());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::new();
        let u = tape.constant(&t(&[4], &[0.0; 4]));
        let l = tape.cross_entropy(u, 1).unwrap();
        assert!((tape.item(l) - 4f64.ln()).abs() < 1e-12);
        let c = tape.constant(&t(&[3], &[0.0, 30.0, 0.0]));
        let l = tape.cross_entropy(c, 1).unwrap();
        assert!(tape.item(l) < 1e-12);
        assert!(tape.cross_entropy(c, 3).is_err());
    }

    #[test]
    fn affine_zero_weight_gives_bias_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let w = tape.constant(&Tensor::zeros(&[2, 2]));
        let b = tape.constant(&t(&[2], &[7., -1.]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.data(y), &[7., -1., 7., -1., 7., -1.]);
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[2, 3], &[0.1, -0.4, 2.0, 0.3, 0.7, -1.1]));
        let w = tape.param(&t(&[3, 2], &[0.5, -0.2, 0.1, 0.9, -0.3, 0.4]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.softmax_rows(y).unwrap();
        let m = tape.mean(s, &[0]).unwrap();
        let _ = tape.sum(m).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, r) in replayed.iter().enumerate() {
            let orig = tape.data(Var(i));
            assert!(r.data().iter().zip(orig).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn temporal_shift_index_arithmetic() {
        // T=2, C=4, 1x1 frames, fold = floor(4 * 0.25) = 1.
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 4, 1, 1], &[0., 1., 2., 3., 10., 11., 12., 13.]));
        let y = tape.temporal_shift(x, 1).unwrap();
        // channel 0: t=0 <- old t=1, t=1 <- 0; channel 1: t=0 <- 0, t=1 <- old t=0.
        assert_eq!(tape.data(y), &[10., 0., 2., 3., 0., 1., 12., 13.]);
    }
}
