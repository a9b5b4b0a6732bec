//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! context for its backward rule. Inputs are always recorded before the
//! node that consumes them, so a single reverse sweep over the node list
//! is a valid topological order.
//!
//! Broadcasting is limited to two cases: a scalar against anything, and
//! a tensor whose shape is a trailing suffix of the other operand's shape
//! (e.g. a bias `[n]` against activations `[batch, n]`).

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis(Var, usize, Vec<usize>),
    Broadcast(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    SoftmaxCe(Var, Vec<usize>, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of operations; rebuilt for every forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Result shape of an elementwise binary op, or `None` if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || (nb == 1 && b.len() <= a.len()) {
        Some(a.to_vec())
    } else if na == 1 && a.len() <= b.len() {
        Some(b.to_vec())
    } else if b.len() < a.len() && a.ends_with(b) {
        Some(a.to_vec())
    } else if a.len() < b.len() && b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

/// outer / axis / inner extents for a reduction along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Reduces `g` (laid out as `out_len` elements) into `n` slots by modulo.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut r = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        r[i % n] += v;
    }
    r
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. It participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Records a tensor that never receives gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(Op::Leaf, t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    /// Gradient accumulated on leaf `v` by [`Tape::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, inputs: &[Var], shape: Vec<usize>, data: Vec<f64>) -> Var {
        let rg = inputs.iter().any(|v| self.requires_grad(*v));
        let mut t = Tensor::new(shape, data).expect("op produced consistent shape");
        if rg {
            t = t.requiring_grad();
        }
        self.push(op, t)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb).ok_or_else(|| shape_err(name, sa, sb))?;
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| f(da[i % da.len()], db[i % db.len()]))
            .collect();
        Ok((shape, data))
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.record(op, &[x], shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.record(Op::Add(a, b), &[a, b], s, d))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.record(Op::Sub(a, b), &[a, b], s, d))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.record(Op::Mul(a, b), &[a, b], s, d))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let (s, d) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.record(Op::Div(a, b), &[a, b], s, d))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Op::Neg(x), x, |v| -v)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Op::Scale(x, c), x, |v| c * v)
    }

    /// Adds a constant.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(Op::Offset(x), x, |v| v + c)
    }

    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        Ok(self.record(Op::MatMul(a, b), &[a, b], shape, data))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp(x), x, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {bad} is not positive"),
            });
        }
        Ok(self.unary(Op::Log(x), x, f64::ln))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh(x), x, f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu(x), x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(Op::LeakyRelu(x, slope), x, |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Op::Softplus(x), x, softplus)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Op::Abs(x), x, f64::abs)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(x, lo, hi), x, |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.record(Op::Sum(x), &[x], vec![], vec![s])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.record(Op::Mean(x), &[x], vec![], vec![s])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Contract(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    fn reduce_axis(&self, x: Var, axis: usize) -> (Vec<usize>, Vec<f64>) {
        let shape = self.shape(x);
        let (outer, len, inner) = axis_split(shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut s = shape.to_vec();
        s.remove(axis);
        (s, out)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let (s, d) = self.reduce_axis(x, axis);
        Ok(self.record(Op::SumAxis(x, axis), &[x], s, d))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let len = self.shape(x)[axis] as f64;
        let (s, mut d) = self.reduce_axis(x, axis);
        d.iter_mut().for_each(|v| *v /= len);
        Ok(self.record(Op::MeanAxis(x, axis), &[x], s, d))
    }

    /// Maximum along `axis`; ties resolve to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        if len == 0 {
            return Err(Error::Contract("max_axis over empty axis".into()));
        }
        let d = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = d[(o * len + l) * inner + i];
                    let k = o * inner + i;
                    if v > out[k] || l == 0 {
                        out[k] = v;
                        arg[k] = l;
                    }
                }
            }
        }
        let mut s = shape;
        s.remove(axis);
        Ok(self.record(Op::MaxAxis(x, axis, arg), &[x], s, out))
    }

    /// Explicit broadcast to `shape` under the same rules as the binary ops.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        match broadcast_shape(shape, &sx) {
            Some(s) if s == shape => {}
            _ => return Err(shape_err("broadcast", &sx, shape)),
        }
        let d = self.data(x);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| d[i % d.len()]).collect();
        Ok(self.record(Op::Broadcast(x), &[x], shape.to_vec(), data))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let d = self.data(x).to_vec();
        Ok(self.record(Op::Reshape(x), &[x], shape.to_vec(), d))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        self.check_axis("concat", *first, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.data(v);
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(self.record(Op::Concat(xs.to_vec(), axis), xs, shape, data))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{} exceeds extent {} of axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * full + start) * inner;
            data.extend_from_slice(&d[b..b + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        Ok(self.record(Op::Slice(x, axis, start), &[x], s, data))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let d = self.data(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &d[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        let loss = loss / b as f64;
        Ok(self.record(
            Op::SoftmaxCe(logits, labels.to_vec(), probs),
            &[logits],
            vec![],
            vec![loss],
        ))
    }

    /// Clears gradients accumulated by previous backward passes.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Propagates d`loss`/d(node) back through the tape. Leaf gradients add
    /// onto whatever previous backward calls left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.accumulate_grad(&g);
            } else {
                self.propagate(idx, &g, &mut grads);
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, g: Vec<f64>) {
        if !self.requires_grad(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, reduce_to(g, self.value(*a).numel()));
                self.send(grads, *b, reduce_to(g, self.value(*b).numel()));
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, reduce_to(g, self.value(*a).numel()));
                let gb: Vec<f64> = g.iter().map(|v| -v).collect();
                self.send(grads, *b, reduce_to(&gb, self.value(*b).numel()));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * db[i % db.len()])
                        .collect();
                    self.send(grads, *a, reduce_to(&ga, da.len()));
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * da[i % da.len()])
                        .collect();
                    self.send(grads, *b, reduce_to(&gb, db.len()));
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v / db[i % db.len()])
                        .collect();
                    self.send(grads, *a, reduce_to(&ga, da.len()));
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            let y = db[i % db.len()];
                            -v * da[i % da.len()] / (y * y)
                        })
                        .collect();
                    self.send(grads, *b, reduce_to(&gb, db.len()));
                }
            }
            Op::Neg(x) => self.send(grads, *x, g.iter().map(|v| -v).collect()),
            Op::Scale(x, c) => self.send(grads, *x, g.iter().map(|v| c * v).collect()),
            Op::Offset(x) => self.send(grads, *x, g.to_vec()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if sb.len() == 2 { sb[1] } else { 1 };
                let (da, db) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = da[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Exp(x) => self.send(grads, *x, g.iter().zip(out).map(|(a, y)| a * y).collect()),
            Op::Log(x) => {
                let d = self.data(*x);
                self.send(grads, *x, g.iter().zip(d).map(|(a, v)| a / v).collect())
            }
            Op::Tanh(x) => self.send(
                grads,
                *x,
                g.iter().zip(out).map(|(a, y)| a * (1.0 - y * y)).collect(),
            ),
            Op::Relu(x) => {
                let d = self.data(*x);
                self.send(
                    grads,
                    *x,
                    g.iter()
                        .zip(d)
                        .map(|(a, v)| if *v > 0.0 { *a } else { 0.0 })
                        .collect(),
                )
            }
            Op::LeakyRelu(x, s) => {
                let d = self.data(*x);
                self.send(
                    grads,
                    *x,
                    g.iter()
                        .zip(d)
                        .map(|(a, v)| if *v > 0.0 { *a } else { s * a })
                        .collect(),
                )
            }
            Op::Softplus(x) => {
                let d = self.data(*x);
                self.send(grads, *x, g.iter().zip(d).map(|(a, v)| a * sigmoid(*v)).collect())
            }
            Op::Abs(x) => {
                let d = self.data(*x);
                self.send(
                    grads,
                    *x,
                    g.iter()
                        .zip(d)
                        .map(|(a, v)| {
                            if *v > 0.0 {
                                *a
                            } else if *v < 0.0 {
                                -a
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
            }
            Op::Clamp(x, lo, hi) => {
                let d = self.data(*x);
                self.send(
                    grads,
                    *x,
                    g.iter()
                        .zip(d)
                        .map(|(a, v)| if v >= lo && v <= hi { *a } else { 0.0 })
                        .collect(),
                )
            }
            Op::Sum(x) => self.send(grads, *x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![g[0] / n as f64; n])
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let div = if matches!(node.op, Op::MeanAxis(..)) {
                    len as f64
                } else {
                    1.0
                };
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] = g[o * inner + i] / div;
                        }
                    }
                }
                self.send(grads, *x, gx)
            }
            Op::MaxAxis(x, axis, arg) => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = o * inner + i;
                        gx[(o * len + arg[k]) * inner + i] = g[k];
                    }
                }
                self.send(grads, *x, gx)
            }
            Op::Broadcast(x) => self.send(grads, *x, reduce_to(g, self.value(*x).numel())),
            Op::Reshape(x) => self.send(grads, *x, g.to_vec()),
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let b = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[b..b + len * inner]);
                        }
                        self.send(grads, v, gv);
                    }
                    offset += len;
                }
            }
            Op::Slice(x, axis, start) => {
                let full = self.shape(*x);
                let (outer, flen, inner) = axis_split(full, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * flen * inner];
                for o in 0..outer {
                    let b = (o * flen + start) * inner;
                    gx[b..b + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.send(grads, *x, gx)
            }
            Op::SoftmaxCe(logits, labels, probs) => {
                let c = self.shape(*logits)[1];
                let b = labels.len() as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| g[0] * p / b).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gx[i * c + y] -= g[0] / b;
                }
                self.send(grads, *logits, gx)
            }
        }
    }
}
