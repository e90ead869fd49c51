use std::ops::Range;

use super::Tensor;
use crate::error::{Error, Result};

/// Norms below this are rejected by [`Tape::l2_normalize`]; above it the
/// same value is added to the denominator.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    /// Stores the per-row norm (without epsilon).
    L2Normalize(Var, Vec<f64>),
    Softmax(Var, Var),
    LogSoftmax(Var, Var),
    GatherRows(Var, Vec<usize>),
    Slice(Var, Vec<Range<usize>>),
    Concat(Vec<Var>),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order, so node order is already a
/// topological order. A tape is a single-threaded unit of work.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated gradients of `requires_grad` leaves.
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (outer, extent, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(src_flat, dst_flat)` for every element of the slice region.
fn for_each_slice_index(shape: &[usize], ranges: &[Range<usize>], mut f: impl FnMut(usize, usize)) {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
    let total = numel(&out_shape);
    let mut idx = vec![0usize; shape.len()];
    for dst in 0..total {
        let src: usize = idx
            .iter()
            .zip(ranges)
            .zip(&src_strides)
            .map(|((i, r), s)| (r.start + i) * s)
            .sum();
        f(src, dst);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn last_axis(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&c) if c > 0 => Ok((numel(shape) / c, c)),
        _ => Err(Error::shape(op, format!("needs a non-empty last axis, got {shape:?}"))),
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Copies a tensor onto the tape. Its `requires_grad` flag decides
    /// whether backward fills a gradient for it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape("constant", format!("shape {shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.push(Vec::new(), vec![x], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single value of a one-element tensor.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).expect("tape nodes are well-formed")
    }

    /// Gradient accumulated into a `requires_grad` leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn scalar_of(&self, op: &'static str, s: Var) -> Result<f64> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::shape(op, format!("expected a scalar, got {:?}", self.shape(s))));
        }
        Ok(self.item(s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, tag: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, tag, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies by a fixed real.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    /// Multiplies every element by a differentiable scalar tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of("mul_scalar", s)?;
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a, s]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulScalar(a, s), rg))
    }

    /// Adds a length-K vector to every row of an M×K matrix.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape("add_bias", format!("{sa:?} + {sb:?}")));
        }
        let k = sa[1];
        let bv = self.value(b);
        let out = self.value(a).iter().enumerate().map(|(i, x)| x + bv[i % k]).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBias(a, b), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, tag: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, tag, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(Error::domain("log", format!("non-positive argument {bad}")));
        }
        Ok(self.map(a, f64::ln, Op::Log(a)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    fn reduce(&mut self, op: &'static str, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (out_shape, out) = match axis {
            None => {
                let s: f64 = self.value(a).iter().sum();
                let n = self.value(a).len().max(1) as f64;
                (Vec::new(), vec![if mean { s / n } else { s }])
            }
            Some(ax) => {
                if ax >= shape.len() || shape[ax] == 0 {
                    return Err(Error::shape(op, format!("axis {ax} invalid for {shape:?}")));
                }
                let (outer, ext, inner) = split_axis(&shape, ax);
                let v = self.value(a);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for e in 0..ext {
                        for i in 0..inner {
                            out[o * inner + i] += v[(o * ext + e) * inner + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|x| *x /= ext as f64);
                }
                let mut s = shape.clone();
                s.remove(ax);
                (s, out)
            }
        };
        let rg = self.rg(&[a]);
        let tag = if mean { Op::Mean(a, axis) } else { Op::Sum(a, axis) };
        Ok(self.push(out_shape, out, tag, rg))
    }

    /// Sum over one axis, or over everything when `axis` is `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("sum", a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        if axis.is_none() && self.value(a).is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        self.reduce("mean", a, axis, true)
    }

    /// `x / (‖x‖ + 1e-12)` along the last axis. Rows with norm below
    /// 1e-12 are a domain error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (rows, c) = last_axis(self.shape(a), "l2_normalize")?;
        let v = self.value(a);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.len());
        for r in 0..rows {
            let row = &v[r * c..(r + 1) * c];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n >= NORM_EPS) {
                return Err(Error::domain("l2_normalize", format!("row {r} has norm {n:e}")));
            }
            out.extend(row.iter().map(|x| x / (n + NORM_EPS)));
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::L2Normalize(a, norms), rg))
    }

    fn softmax_impl(&mut self, op: &'static str, a: Var, tau: Var, log: bool) -> Result<Var> {
        let t = self.scalar_of(op, tau)?;
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::domain(op, format!("temperature must be positive, got {t}")));
        }
        let (rows, c) = last_axis(self.shape(a), op)?;
        let v = self.value(a);
        let mut out = Vec::with_capacity(v.len());
        for r in 0..rows {
            let row = &v[r * c..(r + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let shifted: Vec<f64> = row.iter().map(|x| (x - m) / t).collect();
            let z: f64 = shifted.iter().map(|s| s.exp()).sum();
            if log {
                let lz = z.ln();
                out.extend(shifted.iter().map(|s| s - lz));
            } else {
                out.extend(shifted.iter().map(|s| s.exp() / z));
            }
        }
        let rg = self.rg(&[a, tau]);
        let tag = if log { Op::LogSoftmax(a, tau) } else { Op::Softmax(a, tau) };
        Ok(self.push(self.shape(a).to_vec(), out, tag, rg))
    }

    /// Softmax of `x / τ` along the last axis, with max subtraction.
    pub fn softmax_with_temperature(&mut self, a: Var, tau: Var) -> Result<Var> {
        self.softmax_impl("softmax_with_temperature", a, tau, false)
    }

    /// Log of [`Tape::softmax_with_temperature`], computed without
    /// forming the probabilities.
    pub fn log_softmax_with_temperature(&mut self, a: Var, tau: Var) -> Result<Var> {
        self.softmax_impl("log_softmax_with_temperature", a, tau, true)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", format!("needs a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range {rows}")));
        }
        let v = self.value(a);
        let out = idx.iter().flat_map(|&i| v[i * cols..(i + 1) * cols].iter().copied()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![idx.len(), cols], out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Rectangular sub-block, one half-open range per axis.
    pub fn slice(&mut self, a: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if ranges.len() != s.len() || ranges.iter().zip(&s).any(|(r, &d)| r.start > r.end || r.end > d) {
            return Err(Error::shape("slice", format!("ranges {ranges:?} invalid for {s:?}")));
        }
        let v = self.value(a);
        let mut out = vec![0.0; ranges.iter().map(|r| r.len()).product()];
        for_each_slice_index(&s, ranges, |src, dst| out[dst] = v[src]);
        let rg = self.rg(&[a]);
        let out_shape = ranges.iter().map(|r| r.len()).collect();
        Ok(self.push(out_shape, out, Op::Slice(a, ranges.to_vec()), rg))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(*first).get(1..).map(<[usize]>::to_vec).unwrap_or_default();
        if self.shape(*first).is_empty() {
            return Err(Error::shape("concat", "scalars have no axis 0"));
        }
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{s:?} does not match trailing {tail:?}")));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    /// Reverse pass from a scalar. Gradients of `requires_grad` leaves
    /// accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if let Op::Leaf = node.op {
                let buf = self.grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
                buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x);
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = (0..n).map(|j| g[i * n + j] * bv[p * n + j]).sum();
                        }
                    }
                    send(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
            Op::MulScalar(a, s) => {
                let c = self.item(*s);
                let av = self.value(*a);
                send(*a, g.iter().map(|x| x * c).collect());
                send(*s, vec![g.iter().zip(av).map(|(g, x)| g * x).sum()]);
            }
            Op::AddBias(a, b) => {
                let k = self.shape(*b)[0];
                let mut db = vec![0.0; k];
                g.iter().enumerate().for_each(|(i, x)| db[i % k] += x);
                send(*a, g.to_vec());
                send(*b, db);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                send(*a, g.iter().zip(av).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Exp(a) => send(*a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(a) => {
                let av = self.value(*a);
                send(*a, g.iter().zip(av).map(|(g, x)| g / x).collect());
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                send(*a, g.iter().zip(av).map(|(g, x)| g * x.signum() * f64::from(*x != 0.0)).collect());
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let mean = matches!(node.op, Op::Mean(..));
                let shape = self.shape(*a);
                let total = numel(shape);
                let da = match axis {
                    None => {
                        let c = if mean { g[0] / total.max(1) as f64 } else { g[0] };
                        vec![c; total]
                    }
                    Some(ax) => {
                        let (outer, ext, inner) = split_axis(shape, *ax);
                        let c = if mean { 1.0 / ext as f64 } else { 1.0 };
                        let mut da = vec![0.0; total];
                        for o in 0..outer {
                            for e in 0..ext {
                                for i in 0..inner {
                                    da[(o * ext + e) * inner + i] = g[o * inner + i] * c;
                                }
                            }
                        }
                        da
                    }
                };
                send(*a, da);
            }
            Op::L2Normalize(a, norms) => {
                let av = self.value(*a);
                let c = *self.shape(*a).last().expect("checked in forward");
                let mut da = vec![0.0; av.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let s = n + NORM_EPS;
                    let (x, gr) = (&av[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let xg: f64 = x.iter().zip(gr).map(|(x, g)| x * g).sum();
                    for j in 0..c {
                        da[r * c + j] = gr[j] / s - x[j] * xg / (s * s * n);
                    }
                }
                send(*a, da);
            }
            Op::Softmax(a, tau) | Op::LogSoftmax(a, tau) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let t = self.item(*tau);
                let av = self.value(*a);
                let c = *self.shape(*a).last().expect("checked in forward");
                // dz: gradient with respect to the scaled logits x / τ.
                let mut dz = vec![0.0; av.len()];
                for r in 0..av.len() / c {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    if log {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..c {
                            dz[r * c + j] = gr[j] - yr[j].exp() * gs;
                        }
                    } else {
                        let gy: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for j in 0..c {
                            dz[r * c + j] = yr[j] * (gr[j] - gy);
                        }
                    }
                }
                let dtau = -dz.iter().zip(av).map(|(d, x)| d * x).sum::<f64>() / (t * t);
                send(*a, dz.iter().map(|d| d / t).collect());
                send(*tau, vec![dtau]);
            }
            Op::GatherRows(a, idx) => {
                let cols = self.shape(*a)[1];
                let mut da = vec![0.0; self.value(*a).len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        da[i * cols + j] += g[k * cols + j];
                    }
                }
                send(*a, da);
            }
            Op::Slice(a, ranges) => {
                let shape = self.shape(*a);
                let mut da = vec![0.0; numel(shape)];
                for_each_slice_index(shape, ranges, |src, dst| da[src] += g[dst]);
                send(*a, da);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    send(*p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn var(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf(&Tensor::new(shape, data.to_vec()).unwrap().with_grad())
    }

    #[test]
    fn softmax_hand_values() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![1.0, 0.0]).unwrap();
        let tau = t.scalar_constant(1.0);
        let y = t.softmax_with_temperature(x, tau).unwrap();
        assert_abs_diff_eq!(t.value(y)[0], 0.73105858, epsilon = 1e-8);
        assert_abs_diff_eq!(t.value(y)[1], 0.26894142, epsilon = 1e-8);
        let ly = t.log_softmax_with_temperature(x, tau).unwrap();
        assert_abs_diff_eq!(t.value(ly)[0], 0.73105858f64.ln(), epsilon = 1e-8);
    }

    #[test]
    fn temperature_must_be_positive() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![1.0, 0.0]).unwrap();
        let tau = t.scalar_constant(0.0);
        assert!(matches!(t.softmax_with_temperature(x, tau), Err(Error::Domain { .. })));
    }

    #[test]
    fn small_temperature_does_not_overflow() {
        let mut t = Tape::new();
        let x = t.constant(&[3], vec![1.0, -1.0, 0.5]).unwrap();
        let tau = t.scalar_constant(0.001);
        let y = t.softmax_with_temperature(x, tau).unwrap();
        assert!(t.value(y).iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(t.value(y).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn l2_normalize_345() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![3.0, 4.0]).unwrap();
        let y = t.l2_normalize(x).unwrap();
        assert_abs_diff_eq!(t.value(y)[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(t.value(y)[1], 0.8, epsilon = 1e-12);
        let z = t.constant(&[2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(t.l2_normalize(z), Err(Error::Domain { .. })));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(t.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        match t.matmul(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("{other:?}"),
        }
        let c = t.constant(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn annihilation_gives_zero_gradient() {
        let mut t = Tape::new();
        let x = var(&mut t, &[3], &[1.0, -2.0, 3.0]);
        let zero = t.constant(&[3], vec![0.0; 3]).unwrap();
        let p = t.mul(x, zero).unwrap();
        let s = t.sum(p, None).unwrap();
        assert_eq!(t.item(s), 0.0);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = var(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = t.sum(x, None).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 4]);

        let mut t = Tape::new();
        let x = var(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq, None).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        // a second call without reset accumulates
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());

        let mut t = Tape::new();
        let x = var(&mut t, &[4], &[1.0, 5.0, -2.0, 0.5]);
        let m = t.mean(x, None).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = var(&mut t, &[2], &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Shape { op: "backward", .. })));
    }

    #[test]
    fn axis_reductions() {
        let mut t = Tape::new();
        let x = t.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s0 = t.sum(x, Some(0)).unwrap();
        assert_eq!(t.value(s0), &[5.0, 7.0, 9.0]);
        let m1 = t.mean(x, Some(1)).unwrap();
        assert_eq!(t.value(m1), &[2.0, 5.0]);
        assert_eq!(t.shape(m1), &[2]);
    }

    #[test]
    fn slice_gather_concat_values() {
        let mut t = Tape::new();
        let x = t.constant(&[3, 3], (0..9).map(f64::from).collect()).unwrap();
        let s = t.slice(x, &[1..3, 0..2]).unwrap();
        assert_eq!(t.value(s), &[3.0, 4.0, 6.0, 7.0]);
        let g = t.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(g), &[6.0, 7.0, 8.0, 0.0, 1.0, 2.0, 6.0, 7.0, 8.0]);
        let c = t.concat(&[s, s]).unwrap();
        assert_eq!(t.shape(c), &[4, 2]);
        assert!(t.slice(x, &[0..4, 0..1]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            logits in prop::collection::vec(-50.0f64..50.0, 1..40),
            log_tau in -4.6f64..3.0,
        ) {
            let mut t = Tape::new();
            let n = logits.len();
            let x = t.constant(&[n], logits).unwrap();
            let tau = t.scalar_constant(log_tau.exp());
            let y = t.softmax_with_temperature(x, tau).unwrap();
            prop_assert!((t.value(y).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn softmax_argmax_shift_invariant(
            logits in prop::collection::vec(-10.0f64..10.0, 2..20),
            shift in -100.0f64..100.0,
        ) {
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            let mut t = Tape::new();
            let n = logits.len();
            let x = t.constant(&[n], logits.clone()).unwrap();
            let xs = t.constant(&[n], logits.iter().map(|v| v + shift).collect()).unwrap();
            let tau = t.scalar_constant(0.5);
            let y = t.softmax_with_temperature(x, tau).unwrap();
            let ys = t.softmax_with_temperature(xs, tau).unwrap();
            prop_assert_eq!(argmax(t.value(y)), argmax(t.value(ys)));
        }
    }
}
