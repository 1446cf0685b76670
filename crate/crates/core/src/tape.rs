//! Define-by-run reverse-mode differentiation.
//!
//! Every forward pass appends nodes to a fresh [`Tape`]; `backward` walks the
//! nodes once in reverse append order. Trainable values enter the tape through
//! [`Tape::param`], which snapshots a [`ParameterStore`] entry and remembers its
//! name so gradients can be written back with [`Tape::write_param_grads`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

pub const RMSNORM_EPS: f64 = 1e-6;
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Silu,
    Relu,
    Softplus,
    Square,
    Sqrt,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Shift(Var),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Unary(Var, Unary),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<S> },
    LayerNorm { x: Var, inv_std: Vec<S> },
    Conv1d { x: Var, w: Var, dilation: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S>, scale: S },
    GatherRows { x: Var, idx: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Rope { x: Var, positions: Vec<usize> },
    MixRows { gates: Var, outs: Vec<Var> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Append-only operation record.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Rotation angle for coordinate pair `pair` of a width-`d` vector at `pos`.
pub fn rope_angle(pos: usize, pair: usize, d: usize) -> f64 {
    let theta = 10000f64.powf(-2.0 * pair as f64 / d as f64);
    pos as f64 * theta
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; gradients are not tracked through it.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is retrievable after `backward`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Snapshot of a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let mut value = t.clone();
        value.set_requires_grad(false);
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.same_shape(op, a, b)?;
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(t, Op::Shift(a), ng)
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).item();
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(t, Op::ScaleBy(a, s), ng))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<usize> {
        let n = self.value(a).cols();
        if self.value(row).numel() != n {
            return Err(Error::dim(op, self.shape(a), self.shape(row)));
        }
        Ok(n)
    }

    /// `a + row`, broadcasting `row` over every leading index of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.check_row("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x += r[i % n];
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(t, Op::AddRow(a, row), ng))
    }

    /// `a ⊙ row`, broadcasting `row` over every leading index of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.check_row("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x *= r[i % n];
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(t, Op::MulRow(a, row), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f = |x: S| -> S {
            match kind {
                Unary::Neg => -x,
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Tanh => x.tanh(),
                Unary::Sigmoid => sigmoid(x),
                Unary::Silu => x * sigmoid(x),
                Unary::Relu => x.max(S::zero()),
                Unary::Softplus => softplus(x),
                Unary::Square => x * x,
                Unary::Sqrt => x.sqrt(),
            }
        };
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, Op::Unary(a, kind), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.value(a).rank() {
            return Err(Error::Shape {
                op,
                detail: format!("axis {axis} out of range for {:?}", self.shape(a)),
            });
        }
        Ok(())
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NumericDomain {
                op: "softmax",
                detail: "NaN input".into(),
            });
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let src = x.data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut mx = S::neg_infinity();
                for j in 0..n {
                    mx = mx.max(src[idx(j)]);
                }
                let mut z = S::zero();
                for j in 0..n {
                    let e = (src[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax { x: a, axis }, ng))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NumericDomain {
                op: "log_softmax",
                detail: "NaN input".into(),
            });
        }
        let n = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(x.shape(), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::LogSoftmax(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<S>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().copied().sum::<S>() / S::count(x.numel());
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Sums out `axis`, dropping it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * n + j) * inner + i];
                }
            }
        }
        let mut shape: Vec<usize> = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SumAxis { x: a, axis }, ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let n = self.shape(a)[axis];
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, S::one() / S::count(n)))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// `gain ⊙ x / sqrt(mean(x²) + δ)` along the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let n = self.check_row("rmsnorm", x, gain)?;
        let xv = self.value(x);
        let g = self.value(gain).data();
        let mut out = xv.data().to_vec();
        let mut inv = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let ms = row.iter().map(|&v| v * v).sum::<S>() / S::count(n);
            let r = S::one() / (ms + S::lit(RMSNORM_EPS)).sqrt();
            for (v, &gg) in row.iter_mut().zip(g) {
                *v = *v * r * gg;
            }
            inv.push(r);
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(
            t,
            Op::RmsNorm {
                x,
                gain,
                inv_rms: inv,
            },
            ng,
        ))
    }

    /// Zero-mean, unit-variance normalisation along the last axis.
    pub fn layernorm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        let mut inv = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mu = row.iter().copied().sum::<S>() / S::count(n);
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / S::count(n);
            let s = S::one() / (var + S::lit(LAYERNORM_EPS)).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * s);
            inv.push(s);
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::LayerNorm { x, inv_std: inv }, ng))
    }

    /// `scale ⊙ layernorm(h) + shift` with row-broadcast scale and shift.
    pub fn adaln(&mut self, h: Var, scale: Var, shift: Var) -> Result<Var> {
        let n = self.value(h).cols();
        for v in [scale, shift] {
            if self.value(v).numel() != n {
                return Err(Error::dim("adaln", self.shape(h), self.shape(v)));
            }
        }
        let ln = self.layernorm(h)?;
        let m = self.mul_row(ln, scale)?;
        self.add_row(m, shift)
    }

    /// Centered, zero-padded dilated convolution.
    ///
    /// `x` is `[c_in × T]`, `w` is `[c_out × c_in × k]` with odd `k`; the output
    /// is `[c_out × T]`.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] {
            return Err(Error::dim("conv1d", sx, sw));
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width {k} must be odd")));
        }
        if dilation == 0 {
            return Err(Error::Config("conv1d dilation must be positive".into()));
        }
        let (cin, len, cout) = (sx[0], sx[1], sw[0]);
        let half = (k / 2) as isize;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![S::zero(); cout * len];
        for o in 0..cout {
            for c in 0..cin {
                for j in 0..k {
                    let wv = wd[(o * cin + c) * k + j];
                    let off = (j as isize - half) * dilation as isize;
                    for t in 0..len {
                        let src = t as isize + off;
                        if src >= 0 && (src as usize) < len {
                            out[o * len + t] += wv * xd[c * len + src as usize];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[cout, len], out)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(t, Op::Conv1d { x, w, dilation }, ng))
    }

    /// Cross-entropy of `logits[N×K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let k = lv.cols();
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Bounds {
                op: "cross_entropy",
                index: bad,
                bound: k,
            });
        }
        let mut probs = lv.data().to_vec();
        let mut loss = S::zero();
        for (row, &tgt) in probs.chunks_mut(k).zip(targets) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z = row.iter().map(|&v| (v - mx).exp()).sum::<S>();
            let lse = mx + z.ln();
            loss += lse - row[tgt];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let scale = match reduction {
            Reduction::Mean => S::one() / S::count(targets.len()),
            Reduction::Sum => S::one(),
        };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            ng,
        ))
    }

    /// Selects rows of `x` by index (axis 0).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.shape()[0];
        let width = xv.numel() / rows;
        if idx.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: "empty index list".into(),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(Error::Bounds {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&xv.data()[i * width..(i + 1) * width]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    /// Embedding table lookup: `table[V×d]`, ids → `[n×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let xv = self.value(x);
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::Bounds {
                op: "slice",
                index: start + len,
                bound: n,
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Slice { x, axis, start }, ng))
    }

    /// Rotary position embedding over consecutive coordinate pairs of `x[T×d]`.
    pub fn rope(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.rows() != positions.len() {
            return Err(Error::dim("rope", xv.shape(), &[positions.len()]));
        }
        let d = xv.cols();
        if !d.is_multiple_of(2) {
            return Err(Error::Config(format!("rope width {d} must be even")));
        }
        let mut out = xv.data().to_vec();
        for (row, &p) in out.chunks_mut(d).zip(positions) {
            for j in 0..d / 2 {
                let (s, c) = rope_angle(p, j, d).sin_cos();
                let (s, c) = (S::lit(s), S::lit(c));
                let (a, b) = (row[2 * j], row[2 * j + 1]);
                row[2 * j] = a * c - b * s;
                row[2 * j + 1] = a * s + b * c;
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::Rope {
                x,
                positions: positions.to_vec(),
            },
            ng,
        ))
    }

    /// Row-wise gated mixture: `y[u] = Σ_i gates[u,i] · outs_i[u]`.
    pub fn mix_rows(&mut self, gates: Var, outs: &[Var]) -> Result<Var> {
        let gs = self.shape(gates).to_vec();
        if gs.len() != 2 || gs[1] != outs.len() || outs.is_empty() {
            return Err(Error::dim("mix_rows", &gs, &[outs.len()]));
        }
        let oshape = self.shape(outs[0]).to_vec();
        if oshape.len() != 2 || oshape[0] != gs[0] {
            return Err(Error::dim("mix_rows", &gs, &oshape));
        }
        for &o in outs {
            if self.shape(o) != oshape.as_slice() {
                return Err(Error::dim("mix_rows", &oshape, self.shape(o)));
            }
        }
        let (u, n, d) = (gs[0], gs[1], oshape[1]);
        let g = self.value(gates).data();
        let mut out = vec![S::zero(); u * d];
        for (i, &o) in outs.iter().enumerate() {
            let od = self.value(o).data();
            for r in 0..u {
                let w = g[r * n + i];
                for c in 0..d {
                    out[r * d + c] += w * od[r * d + c];
                }
            }
        }
        let t = Tensor::new(&oshape, out)?;
        let ng = self.ng(gates) || outs.iter().any(|&o| self.ng(o));
        Ok(self.push(
            t,
            Op::MixRows {
                gates,
                outs: outs.to_vec(),
            },
            ng,
        ))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
        f(buf);
    }

    fn propagate(&mut self, i: usize, g: &[S]) {
        // Temporarily move the op out so that input values can be borrowed.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |buf| add_into(buf, g));
                self.acc(*b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |buf| add_into(buf, g));
                self.acc(*b, |buf| buf.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                self.acc(*a, |buf| {
                    for ((x, &gy), &bb) in buf.iter_mut().zip(g).zip(&bv) {
                        *x += gy * bb;
                    }
                });
                self.acc(*b, |buf| {
                    for ((x, &gy), &aa) in buf.iter_mut().zip(g).zip(&av) {
                        *x += gy * aa;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, |buf| buf.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c));
            }
            Op::Shift(a) | Op::Reshape(a) => self.acc(*a, |buf| add_into(buf, g)),
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                let dot: S = self.value(*a).data().iter().zip(g).map(|(&x, &y)| x * y).sum();
                self.acc(*a, |buf| buf.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c));
                self.acc(*s, |buf| buf[0] += dot);
            }
            Op::AddRow(a, row) => {
                let n = self.value(*row).numel();
                self.acc(*a, |buf| add_into(buf, g));
                self.acc(*row, |buf| {
                    for (k, &y) in g.iter().enumerate() {
                        buf[k % n] += y;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a).data().to_vec();
                let rv = self.value(*row).data().to_vec();
                let n = rv.len();
                self.acc(*a, |buf| {
                    for (k, (x, &y)) in buf.iter_mut().zip(g).enumerate() {
                        *x += y * rv[k % n];
                    }
                });
                self.acc(*row, |buf| {
                    for (k, &y) in g.iter().enumerate() {
                        buf[k % n] += y * av[k];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.ng(*a) {
                    let bv = self.value(*b).data().to_vec();
                    self.acc(*a, |buf| gemm_bt(g, &bv, buf, m, n, k));
                }
                if self.ng(*b) {
                    let av = self.value(*a).data().to_vec();
                    self.acc(*b, |buf| gemm_at(&av, g, buf, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.acc(*a, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Unary(a, kind) => {
                let xv = self.value(*a).data().to_vec();
                let yv = self.nodes[i].value.data().to_vec();
                let kind = *kind;
                self.acc(*a, |buf| {
                    for k in 0..buf.len() {
                        let (x, y) = (xv[k], yv[k]);
                        let d = match kind {
                            Unary::Neg => -S::one(),
                            Unary::Exp => y,
                            Unary::Log => S::one() / x,
                            Unary::Tanh => S::one() - y * y,
                            Unary::Sigmoid => y * (S::one() - y),
                            Unary::Silu => {
                                let s = sigmoid(x);
                                s + x * s * (S::one() - s)
                            }
                            Unary::Relu => {
                                if x > S::zero() {
                                    S::one()
                                } else {
                                    S::zero()
                                }
                            }
                            Unary::Softplus => sigmoid(x),
                            Unary::Square => S::lit(2.0) * x,
                            Unary::Sqrt => S::lit(0.5) / y,
                        };
                        buf[k] += g[k] * d;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let yv = self.nodes[i].value.data().to_vec();
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                self.acc(*x, |buf| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + ii;
                            let dot: S = (0..n).map(|j| g[idx(j)] * yv[idx(j)]).sum();
                            for j in 0..n {
                                buf[idx(j)] += yv[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let yv = self.nodes[i].value.data().to_vec();
                let n = self.value(*x).cols();
                self.acc(*x, |buf| {
                    for r in 0..buf.len() / n {
                        let gs: S = g[r * n..(r + 1) * n].iter().copied().sum();
                        for j in 0..n {
                            let k = r * n + j;
                            buf[k] += g[k] - yv[k].exp() * gs;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gy = g[0];
                self.acc(*a, |buf| buf.iter_mut().for_each(|x| *x += gy));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let gy = g[0] / S::count(n);
                self.acc(*a, |buf| buf.iter_mut().for_each(|x| *x += gy));
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                self.acc(*x, |buf| {
                    for o in 0..outer {
                        for j in 0..n {
                            for ii in 0..inner {
                                buf[(o * n + j) * inner + ii] += g[o * inner + ii];
                            }
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data().to_vec();
                let gv = self.value(*gain).data().to_vec();
                let n = gv.len();
                let nf = S::count(n);
                self.acc(*gain, |buf| {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for j in 0..n {
                            buf[j] += g[r * n + j] * xv[r * n + j] * ir;
                        }
                    }
                });
                self.acc(*x, |buf| {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let row = r * n..(r + 1) * n;
                        let dot: S = row.clone().map(|k| g[k] * gv[k - r * n] * xv[k]).sum();
                        let c = ir * ir * ir * dot / nf;
                        for k in row {
                            buf[k] += ir * g[k] * gv[k - r * n] - c * xv[k];
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let yv = self.nodes[i].value.data().to_vec();
                let n = self.value(*x).cols();
                let nf = S::count(n);
                self.acc(*x, |buf| {
                    for (r, &s) in inv_std.iter().enumerate() {
                        let row = r * n..(r + 1) * n;
                        let mg: S = row.clone().map(|k| g[k]).sum::<S>() / nf;
                        let mgy: S = row.clone().map(|k| g[k] * yv[k]).sum::<S>() / nf;
                        for k in row {
                            buf[k] += s * (g[k] - mg - yv[k] * mgy);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, dilation } => {
                let (cin, len) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (cout, k) = (self.shape(*w)[0], self.shape(*w)[2]);
                let half = (k / 2) as isize;
                let dil = *dilation as isize;
                let xv = self.value(*x).data().to_vec();
                let wv = self.value(*w).data().to_vec();
                self.acc(*w, |buf| {
                    for o in 0..cout {
                        for c in 0..cin {
                            for j in 0..k {
                                let off = (j as isize - half) * dil;
                                let mut s = S::zero();
                                for t in 0..len {
                                    let src = t as isize + off;
                                    if src >= 0 && (src as usize) < len {
                                        s += g[o * len + t] * xv[c * len + src as usize];
                                    }
                                }
                                buf[(o * cin + c) * k + j] += s;
                            }
                        }
                    }
                });
                self.acc(*x, |buf| {
                    for o in 0..cout {
                        for c in 0..cin {
                            for j in 0..k {
                                let wq = wv[(o * cin + c) * k + j];
                                let off = (j as isize - half) * dil;
                                for t in 0..len {
                                    let src = t as isize + off;
                                    if src >= 0 && (src as usize) < len {
                                        buf[c * len + src as usize] += wq * g[o * len + t];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let k = self.value(*logits).cols();
                let c = g[0] * *scale;
                self.acc(*logits, |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { S::one() } else { S::zero() };
                            buf[r * k + j] += c * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let rows = self.shape(*x)[0];
                let width = self.value(*x).numel() / rows;
                self.acc(*x, |buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..width {
                            buf[src * width + c] += g[r * width + c];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    self.acc(p, |buf| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for e in 0..n * inner {
                                buf[o * n * inner + e] += g[src + e];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = self.nodes[i].value.shape()[*axis];
                let start = *start;
                self.acc(*x, |buf| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        for e in 0..len * inner {
                            buf[dst + e] += g[o * len * inner + e];
                        }
                    }
                });
            }
            Op::Rope { x, positions } => {
                let d = self.value(*x).cols();
                self.acc(*x, |buf| {
                    for (r, &p) in positions.iter().enumerate() {
                        for j in 0..d / 2 {
                            let (s, c) = rope_angle(p, j, d).sin_cos();
                            let (s, c) = (S::lit(s), S::lit(c));
                            let (ga, gb) = (g[r * d + 2 * j], g[r * d + 2 * j + 1]);
                            buf[r * d + 2 * j] += ga * c + gb * s;
                            buf[r * d + 2 * j + 1] += -ga * s + gb * c;
                        }
                    }
                });
            }
            Op::MixRows { gates, outs } => {
                let gs = self.shape(*gates).to_vec();
                let (u, n) = (gs[0], gs[1]);
                let d = g.len() / u;
                let gv = self.value(*gates).data().to_vec();
                if self.ng(*gates) {
                    let mut dg = vec![S::zero(); u * n];
                    for (e, &o) in outs.iter().enumerate() {
                        let od = self.value(o).data();
                        for r in 0..u {
                            dg[r * n + e] = (0..d).map(|c| g[r * d + c] * od[r * d + c]).sum();
                        }
                    }
                    self.acc(*gates, |buf| add_into(buf, &dg));
                }
                for (e, &o) in outs.iter().enumerate() {
                    self.acc(o, |buf| {
                        for r in 0..u {
                            let w = gv[r * n + e];
                            for c in 0..d {
                                buf[r * d + c] += w * g[r * d + c];
                            }
                        }
                    });
                }
            }
        }
        self.nodes[i].op = op;
    }

    /// Gradient of a node after `backward`; zeros for tracked nodes the loss
    /// did not reach.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        if !self.backward_done || !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.shape(v);
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Adds parameter gradients from this tape into `store`.
    pub fn write_param_grads(&self, store: &mut ParameterStore<S>) -> Result<()> {
        if !self.backward_done {
            return Err(Error::State("write_param_grads before backward".into()));
        }
        for (name, v) in &self.params {
            if let (Some(g), Some(t)) = (&self.grads[v.0], store.get_mut(name)) {
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

fn add_into<S: Scalar>(buf: &mut [S], g: &[S]) {
    for (x, &y) in buf.iter_mut().zip(g) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let c = tape.constant(t(&[2, 1], &[2.0, 5.0]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::NumericDomain { .. })));
    }

    #[test]
    fn rmsnorm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[3.0, -3.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let y = tape.rmsnorm(x, g).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && (d[1] + 1.0).abs() < 1e-6);

        let x = tape.constant(Tensor::ones(&[2, 4]));
        let g = tape.constant(Tensor::ones(&[4]));
        let y = tape.rmsnorm(x, g).unwrap();
        assert!(tape.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn adaln_identity_and_constant() {
        let mut tape = Tape::new();
        let h = tape.constant(t(&[2, 3], &[1.0, 2.0, 4.0, -1.0, 0.5, 3.0]));
        let one = tape.constant(Tensor::ones(&[3]));
        let zero = tape.constant(Tensor::zeros(&[3]));
        let five = tape.constant(Tensor::full(&[3], 5.0));
        let ln = tape.layernorm(h).unwrap();
        let a = tape.adaln(h, one, zero).unwrap();
        assert_eq!(tape.value(a), tape.value(ln));
        let c = tape.adaln(h, zero, five).unwrap();
        assert!(tape.value(c).data().iter().all(|&v| v == 5.0));
        for row in 0..2 {
            let mean: f64 = tape.value(ln).row(row).iter().sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn conv1d_hand_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1.0, 0.0, 0.0, 0.0]));
        let id = tape.constant(t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
        let y = tape.conv1d(x, id, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 0.0]);

        let box3 = tape.constant(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
        let y = tape.conv1d(x, box3, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 0.0, 0.0]);

        let imp = tape.constant(t(&[1, 5], &[0.0, 0.0, 1.0, 0.0, 0.0]));
        let k = tape.constant(t(&[1, 1, 3], &[1.0, 0.0, 1.0]));
        let y = tape.conv1d(imp, k, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 0.0, 1.0]);

        let even = tape.constant(Tensor::ones(&[1, 1, 2]));
        assert!(matches!(tape.conv1d(x, even, 1), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_confident_and_bounds() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[1, 3], &[100.0, 0.0, 0.0]));
        let l = tape.cross_entropy(logits, &[0], Reduction::Mean).unwrap();
        assert!(tape.value(l).item() < 1e-40);
        assert!(matches!(
            tape.cross_entropy(logits, &[3], Reduction::Mean),
            Err(Error::Bounds { .. })
        ));
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.mse(x, x).unwrap();
        assert_eq!(tape.value(m).item(), 0.0);
    }

    #[test]
    fn backward_simple_sums() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.square(w);
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
        assert!(matches!(tape.backward(l), Err(Error::State(_))));
    }

    #[test]
    fn non_participating_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let l = tape.sum(a);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[9.0, 8.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 9.0, 4.0, 8.0]);
        assert!(tape.slice(c, 1, 2, 2).is_err());
    }
}
