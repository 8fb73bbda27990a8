use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::{Mask, Rng, Tape, Tensor, Var};

/// Standard deviation for modulation and output-head weights.
pub(crate) const SMALL_INIT: f32 = 0.02;

pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Builder<'_> {
    pub fn normal(&mut self, name: String, shape: &[usize], std: f32) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f32) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// `std = None` draws weights from `N(0, 1/in_dim)`.
    pub(crate) fn new(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize, bias: bool, std: Option<f32>) -> Self {
        let std = std.unwrap_or(1.0 / (in_dim as f32).sqrt());
        let weight = b.normal(format!("{name}.weight"), &[in_dim, out_dim], std);
        let bias = bias.then(|| b.constant(format!("{name}.bias"), &[1, out_dim], 0.0));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.last() != Some(&self.in_dim) {
            return Err(Error::shape("linear", format!("input {s:?}, expected last dim {}", self.in_dim)));
        }
        let rows = s[..s.len() - 1].iter().product();
        let flat = tape.reshape(x, &[rows, self.in_dim])?;
        let mut y = tape.matmul(flat, p[self.weight])?;
        if let Some(bias) = self.bias {
            y = tape.add(y, p[bias])?;
        }
        let mut out = s;
        *out.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &out)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub(crate) fn new(b: &mut Builder, name: &str, dim: usize, hidden: usize, out: usize) -> Self {
        Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), dim, hidden, true, None),
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, out, true, None),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Splits `[B, k·h]` modulation output into `k` tensors shaped `[B, 1, h]`.
fn chunks(tape: &mut Tape, m: Var, k: usize) -> Result<Vec<Var>> {
    let s = tape.shape(m).to_vec();
    let h = s[1] / k;
    (0..k)
        .map(|i| {
            let c = tape.slice(m, 1, i * h, (i + 1) * h)?;
            tape.reshape(c, &[s[0], 1, h])
        })
        .collect()
}

/// `x · (1 + scale) + shift` with per-sample broadcast.
fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s1 = tape.affine(scale, 1.0, 1.0);
    let y = tape.mul(x, s1)?;
    tape.add(y, shift)
}

/// Per-stream parameters of one transformer block.
#[derive(Debug, Clone)]
pub struct StreamBlock {
    pub norm1: ParamId,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: ParamId,
    pub mlp: Mlp,
    pub ada: Linear,
    pub hidden: usize,
}

impl StreamBlock {
    pub(crate) fn new(b: &mut Builder, name: &str, hidden: usize, mlp_ratio: usize) -> Self {
        Self {
            norm1: b.constant(format!("{name}.norm1.gain"), &[hidden], 1.0),
            qkv: Linear::new(b, &format!("{name}.attn.qkv"), hidden, 3 * hidden, true, None),
            proj: Linear::new(b, &format!("{name}.attn.proj"), hidden, hidden, true, None),
            norm2: b.constant(format!("{name}.norm2.gain"), &[hidden], 1.0),
            mlp: Mlp::new(b, &format!("{name}.mlp"), hidden, mlp_ratio * hidden, hidden),
            ada: Linear::new(b, &format!("{name}.ada"), hidden, 6 * hidden, true, Some(SMALL_INIT)),
            hidden,
        }
    }
}

/// Multi-head attention over `[B, L, h]` queries/keys/values.
pub(crate) fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Mask>) -> Result<Var> {
    let s = tape.shape(q).to_vec();
    let (b, l, h) = (s[0], s[1], s[2]);
    let dh = h / heads;
    let split = |tape: &mut Tape, x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[b, l, heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * heads, l, dh])
    };
    let q = tape.scale(q, 1.0 / (dh as f32).sqrt());
    let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
    let scores = tape.matmul_t(q, k, false, true)?;
    let att = tape.softmax_masked(scores, mask)?;
    let out = tape.matmul(att, v)?;
    let out = tape.reshape(out, &[b, heads, l, dh])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    tape.reshape(out, &[b, l, h])
}

/// One block over one or more token groups that attend jointly. Each
/// group uses its own stream parameters and conditioning; `cond_act` holds
/// `silu(c)` per group, shaped `[B, h]`.
pub(crate) fn joint_block(
    tape: &mut Tape,
    p: &Bound,
    blocks: &[&StreamBlock],
    xs: &[Var],
    cond_act: &[Var],
    heads: usize,
    mask: Option<&Mask>,
) -> Result<Vec<Var>> {
    let h = blocks[0].hidden;
    let mut mods = Vec::with_capacity(xs.len());
    let (mut qs, mut ks, mut vs, mut lens) = (vec![], vec![], vec![], vec![]);
    for ((blk, &x), &c) in blocks.iter().zip(xs).zip(cond_act) {
        let m = blk.ada.forward(tape, p, c)?;
        let m = chunks(tape, m, 6)?;
        let n = tape.rms_norm(x, p[blk.norm1])?;
        let n = modulate(tape, n, m[0], m[1])?;
        let qkv = blk.qkv.forward(tape, p, n)?;
        qs.push(tape.slice(qkv, 2, 0, h)?);
        ks.push(tape.slice(qkv, 2, h, 2 * h)?);
        vs.push(tape.slice(qkv, 2, 2 * h, 3 * h)?);
        lens.push(tape.shape(x)[1]);
        mods.push(m);
    }
    let cat = |tape: &mut Tape, parts: &[Var]| {
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(parts, 1)
        }
    };
    let (q, k, v) = (cat(tape, &qs)?, cat(tape, &ks)?, cat(tape, &vs)?);
    let att = attention(tape, q, k, v, heads, mask)?;
    let mut out = Vec::with_capacity(xs.len());
    let mut start = 0;
    for (i, blk) in blocks.iter().enumerate() {
        let a = if xs.len() == 1 {
            att
        } else {
            tape.slice(att, 1, start, start + lens[i])?
        };
        start += lens[i];
        let m = &mods[i];
        let o = blk.proj.forward(tape, p, a)?;
        let o = tape.mul(o, m[2])?;
        let x = tape.add(xs[i], o)?;
        let n = tape.rms_norm(x, p[blk.norm2])?;
        let n = modulate(tape, n, m[3], m[4])?;
        let f = blk.mlp.forward(tape, p, n)?;
        let f = tape.mul(f, m[5])?;
        out.push(tape.add(x, f)?);
    }
    Ok(out)
}

/// Modulated norm followed by a linear projection to the stream's output width.
#[derive(Debug, Clone)]
pub struct FinalLayer {
    pub norm: ParamId,
    pub ada: Linear,
    pub linear: Linear,
}

impl FinalLayer {
    pub(crate) fn new(b: &mut Builder, name: &str, hidden: usize, out: usize) -> Self {
        Self {
            norm: b.constant(format!("{name}.norm.gain"), &[hidden], 1.0),
            ada: Linear::new(b, &format!("{name}.ada"), hidden, 2 * hidden, true, Some(SMALL_INIT)),
            linear: Linear::new(b, &format!("{name}.linear"), hidden, out, true, Some(SMALL_INIT)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, cond_act: Var) -> Result<Var> {
        let m = self.ada.forward(tape, p, cond_act)?;
        let m = chunks(tape, m, 2)?;
        let n = tape.rms_norm(x, p[self.norm])?;
        let n = modulate(tape, n, m[0], m[1])?;
        self.linear.forward(tape, p, n)
    }
}

/// Fixed 2-D sine-cosine position codes `[1, gh·gw, hidden]`.
pub fn sincos_2d(gh: usize, gw: usize, hidden: usize) -> Tensor {
    let quarter = hidden / 4;
    let mut data = Vec::with_capacity(gh * gw * hidden);
    let omega = |i: usize| 1.0 / 10000f64.powf(i as f64 / quarter as f64);
    for y in 0..gh {
        for x in 0..gw {
            for pos in [y as f64, x as f64] {
                data.extend((0..quarter).map(|i| (pos * omega(i)).sin() as f32));
                data.extend((0..quarter).map(|i| (pos * omega(i)).cos() as f32));
            }
        }
    }
    Tensor::raw(vec![1, gh * gw, hidden], data)
}

/// Sinusoidal features of `1000·t`, `[len(t), dim]`.
pub fn timestep_features(t: &[f32], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let x = ti as f64 * 1000.0;
        let freq = |i: usize| (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data.extend((0..half).map(|i| (x * freq(i)).cos() as f32));
        data.extend((0..half).map(|i| (x * freq(i)).sin() as f32));
    }
    Tensor::raw(vec![t.len(), dim], data)
}
