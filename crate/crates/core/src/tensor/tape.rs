use super::kernels::{broadcast_for_each, broadcast_shape, fast_tanh, gemm, inverse_perm, permute};
use super::{Mask, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `c * x + d`; only the slope matters for the backward pass.
    Affine(Var, f32),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f32>,
    },
    Silu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run record of a computation. Rebuilt for every forward pass.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it and a reverse sweep over the node list is a valid
/// topological order for the backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub const RMS_EPS: f32 = 1e-6;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_K * x * x * x)))
}

fn gelu_grad(x: f32) -> f32 {
    let th = fast_tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Views `shape` as `[outer, shape[axis], inner]`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n = out_shape.iter().product();
            let mut data = vec![0.0; n];
            let (da, db) = (va.data(), vb.data());
            broadcast_for_each(&out_shape, va.shape(), vb.shape(), |o, i, j| {
                data[o] = f(da[i], db[j]);
            });
            data
        };
        Ok(self.push(Tensor::raw(out_shape, data), op, &[a, b]))
    }

    /// Elementwise sum with same-rank broadcasting over size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `slope * x + offset`.
    pub fn affine(&mut self, x: Var, slope: f32, offset: f32) -> Var {
        let value = self.value(x).map(|v| slope * v + offset);
        self.push(value, Op::Affine(x, slope), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.affine(x, c, 0.0)
    }

    /// Matrix product of rank-2 tensors or batched product of rank-3 tensors
    /// sharing the leading (group) axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product where `ta` / `tb` transpose the last two axes of the
    /// corresponding operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})"));
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(err());
        }
        let r = sa.len();
        let groups = if r == 3 { sa[0] } else { 1 };
        if r == 3 && sb[0] != groups {
            return Err(err());
        }
        let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (k2, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != k2 {
            return Err(err());
        }
        let mut out = vec![0.0; groups * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for g in 0..groups {
                gemm(
                    ta,
                    tb,
                    m,
                    k,
                    n,
                    &da[g * m * k..(g + 1) * m * k],
                    &db[g * k * n..(g + 1) * k * n],
                    &mut out[g * m * n..(g + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if r == 3 { vec![groups, m, n] } else { vec![m, n] };
        Ok(self.push(Tensor::raw(shape, out), Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..v.rank()).collect::<Vec<_>>() {
            return Err(Error::shape("permute", format!("{perm:?} for {:?}", v.shape())));
        }
        let (shape, data) = permute(v.data(), v.shape(), perm);
        Ok(self.push(Tensor::raw(shape, data), Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn transpose(&mut self, x: Var, i: usize, j: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.value(x).rank()).collect();
        if i >= perm.len() || j >= perm.len() {
            return Err(Error::shape("transpose", format!("axes {i},{j}")));
        }
        perm.swap(i, j);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| Error::Invalid("empty concat".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        Ok(self.push(Tensor::raw(shape, data), Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::shape("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&v[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        Ok(self.push(Tensor::raw(shape, data), Op::Slice { x, axis, start }, &[x]))
    }

    /// Softmax over the last axis. Masked (`false`) positions receive exactly
    /// zero probability; a row with no attendable position is an error.
    pub fn softmax_masked(&mut self, logits: Var, mask: Option<&Mask>) -> Result<Var> {
        let v = self.value(logits);
        if let Some(m) = mask {
            if m.shape() != v.shape() {
                return Err(Error::shape(
                    "softmax_masked",
                    format!("mask {:?} vs logits {:?}", m.shape(), v.shape()),
                ));
            }
        }
        let n = v.last_dim();
        let mut out = vec![0.0; v.len()];
        for (r, (row, dst)) in v.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m.data()[r * n + j]);
            let mut max = f32::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > max {
                    max = x;
                }
            }
            if max == f32::NEG_INFINITY {
                return Err(Error::FullyMasked { row: r });
            }
            let mut sum = 0.0f64;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (x - max).exp();
                    dst[j] = e;
                    sum += e as f64;
                }
            }
            let inv = (1.0 / sum) as f32;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let value = Tensor::raw(v.shape().to_vec(), out);
        Ok(self.push(value, Op::Softmax(logits), &[logits]))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        self.softmax_masked(logits, None)
    }

    /// `gain ⊙ x / sqrt(mean(x²) + 1e-6)` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (v, g) = (self.value(x), self.value(gain));
        let d = v.last_dim();
        if g.len() != d {
            return Err(Error::shape("rms_norm", format!("gain {:?} for {:?}", g.shape(), v.shape())));
        }
        let mut out = vec![0.0; v.len()];
        let mut inv_rms = Vec::with_capacity(v.len() / d);
        for (row, dst) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            let ms: f64 = row.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>() / d as f64;
            let r = (1.0 / (ms + RMS_EPS as f64).sqrt()) as f32;
            inv_rms.push(r);
            for ((o, &a), &gn) in dst.iter_mut().zip(row).zip(g.data()) {
                *o = gn * a * r;
            }
        }
        let value = Tensor::raw(v.shape().to_vec(), out);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f32::ln, Op::Log(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean() as f32;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Rows `ids` of a `[vocab, dim]` table, shaped `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", t.shape())));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Invalid(format!("embedding id {bad} out of range {vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::Invalid("embedding lookup of zero ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::raw(vec![ids.len(), dim], data);
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Forward identity that records no backward rule.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::raw(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Gradient accumulator for input `v`; `None` when the input is frozen.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
        let n = &self.nodes[v.0];
        if !n.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
    }

    fn backprop(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                if let Some(ga) = self.slot(grads, *a) {
                    if sa == node.value.shape() {
                        ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    } else {
                        broadcast_for_each(node.value.shape(), &sa, &sb, |o, ia, _| ga[ia] += g[o]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if sb == node.value.shape() {
                        gb.iter_mut().zip(g).for_each(|(d, &s)| *d += sign * s);
                    } else {
                        broadcast_for_each(node.value.shape(), &sa, &sb, |o, _, ib| {
                            gb[ib] += sign * g[o]
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (da, db) = (va.data(), vb.data());
                let out = node.value.shape();
                if let Some(ga) = self.slot(grads, *a) {
                    broadcast_for_each(out, va.shape(), vb.shape(), |o, ia, ib| {
                        ga[ia] += g[o] * db[ib]
                    });
                }
                if let Some(gb) = self.slot(grads, *b) {
                    broadcast_for_each(out, va.shape(), vb.shape(), |o, ia, ib| {
                        gb[ib] += g[o] * da[ia]
                    });
                }
            }
            Op::Affine(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += c * s);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let r = va.rank();
                let groups = if r == 3 { va.shape()[0] } else { 1 };
                let sa = va.shape();
                let (m, k) = if *ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
                let n = node.value.last_dim();
                let (da, db) = (va.data(), vb.data());
                if let Some(ga) = self.slot(grads, *a) {
                    for grp in 0..groups {
                        let gg = &g[grp * m * n..(grp + 1) * m * n];
                        let bb = &db[grp * k * n..(grp + 1) * k * n];
                        let out = &mut ga[grp * m * k..(grp + 1) * m * k];
                        match (*ta, *tb) {
                            (false, false) => gemm(false, true, m, n, k, gg, bb, out, true),
                            (false, true) => gemm(false, false, m, n, k, gg, bb, out, true),
                            (true, false) => gemm(false, true, k, n, m, bb, gg, out, true),
                            (true, true) => gemm(true, true, k, n, m, bb, gg, out, true),
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for grp in 0..groups {
                        let gg = &g[grp * m * n..(grp + 1) * m * n];
                        let aa = &da[grp * m * k..(grp + 1) * m * k];
                        let out = &mut gb[grp * k * n..(grp + 1) * k * n];
                        match (*ta, *tb) {
                            (false, false) => gemm(true, false, k, m, n, aa, gg, out, true),
                            (false, true) => gemm(true, false, n, m, k, gg, aa, out, true),
                            (true, false) => gemm(false, false, k, m, n, aa, gg, out, true),
                            (true, true) => gemm(true, true, n, m, k, gg, aa, out, true),
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Permute(x, perm) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let (_, back) = permute(g, node.value.shape(), &inverse_perm(perm));
                    gx.iter_mut().zip(back).for_each(|(d, s)| *d += s);
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if let Some(gx) = self.slot(grads, x) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gx[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                    let len = node.value.shape()[*axis];
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let base = (o * full + start) * inner;
                        let dst = &mut gx[base..base + len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = node.value.last_dim();
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (((xr, gr), dr), &r) in
                        xv.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).zip(inv_rms)
                    {
                        let dot: f32 = xr.iter().zip(gr).zip(gv).map(|((a, b), c)| a * b * c).sum();
                        let coef = r * r * r * dot / d as f32;
                        for (((o, &a), &gg), &gn) in dr.iter_mut().zip(xr).zip(gr).zip(gv) {
                            *o += r * gg * gn - coef * a;
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for ((xr, gr), &r) in xv.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                        for ((o, &a), &s) in gg.iter_mut().zip(xr).zip(gr) {
                            *o += s * a * r;
                        }
                    }
                }
            }
            Op::Silu(x) | Op::Gelu(x) | Op::Tanh(x) | Op::Exp(x) | Op::Log(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let xv = self.value(*x).data();
                    let acc = |gx: &mut [f32], deriv: &dyn Fn(usize) -> f32| {
                        for (j, (d, &s)) in gx.iter_mut().zip(g).enumerate() {
                            *d += s * deriv(j);
                        }
                    };
                    // one monomorphic loop per op keeps the derivative inlined
                    match &node.op {
                        Op::Silu(_) => {
                            for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                                let sg = sigmoid(v);
                                *d += s * sg * (1.0 + v * (1.0 - sg));
                            }
                        }
                        Op::Gelu(_) => {
                            for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                                *d += s * gelu_grad(v);
                            }
                        }
                        Op::Tanh(_) => acc(gx, &|j| 1.0 - y[j] * y[j]),
                        Op::Exp(_) => acc(gx, &|j| y[j]),
                        _ => acc(gx, &|j| 1.0 / xv[j]),
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = if matches!(node.op, Op::Mean(_)) {
                        g[0] / gx.len() as f32
                    } else {
                        g[0]
                    };
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let dim = node.value.last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * dim..(id + 1) * dim];
                        dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]).for_each(|(d, &s)| *d += s);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn masked_softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[1.0; 4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);

        let x = tape.constant(t(&[3], &[10.0, 0.0, 0.0]));
        let m = Mask::new(&[3], vec![false, true, true]).unwrap();
        let y = tape.softmax_masked(x, Some(&m)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 0.5]);

        let none = Mask::new(&[3], vec![false; 3]).unwrap();
        assert!(matches!(
            tape.softmax_masked(x, Some(&none)),
            Err(Error::FullyMasked { row: 0 })
        ));
    }

    #[test]
    fn rms_norm_examples() {
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::full(&[4], 1.0));
        let x = tape.constant(t(&[4], &[3.0; 4]));
        let y = tape.rms_norm(x, gain).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let z = tape.constant(Tensor::zeros(&[4]));
        let y = tape.rms_norm(z, gain).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn stop_gradient_freezes_factor() {
        // L = x * sg(x) at x = 3 -> dL/dx = 3
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s), tape.value(x));
        let l = tape.mul(x, s).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
        assert!(g.get(s).is_none());

        // L = (x - sg(x))^2 -> gradient 2(x - sg(x)) = 0
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.stop_gradient(x);
        let d = tape.sub(x, s).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn repeated_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.param(t(&[1, 2], &[1.0, 1.0]));
        let y = tape.matmul(x, w).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3, 2]));
        let b = tape.param(t(&[1, 2], &[1.0, 2.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f32));
        let b = tape.constant(Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as f32));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 3]);
        let a2 = tape.slice(c, 1, 0, 2).unwrap();
        let b2 = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }
}
