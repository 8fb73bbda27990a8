//! Joint velocity loss and the auxiliary feature-space losses.
//!
//! Feature fields (drifting, hybrid) are computed off-tape from current
//! values and enter the loss through a frozen target `sg(u + V)`, so the
//! gradient with respect to `u` is exactly `-2·λ·V / B`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, Builder, Mlp, ParamStore};
use crate::teacher::{FeatureStats, TeacherEncoder};
use crate::{Rng, Tape, Tensor, Var};

/// Auxiliary loss added on top of the velocity loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxLoss {
    #[default]
    None,
    Repa,
    Perceptual,
    Drifting,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_d: f32,
    pub lambda_hyb: f32,
    pub tau_gate: f32,
    pub tau_rep: f32,
    pub tau_drift: f32,
    pub lambda_repa: f32,
    pub lambda_perc: f32,
    pub lambda_drift: f32,
    /// Replaces the similarity gate with this constant when set.
    pub scalar_gate: Option<f32>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 0.1,
            lambda_hyb: 10.0,
            tau_gate: 10.0,
            tau_rep: 0.2,
            tau_drift: 0.2,
            lambda_repa: 1.0,
            lambda_perc: 1.0,
            lambda_drift: 1.0,
            scalar_gate: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let temps = [self.tau_gate, self.tau_rep, self.tau_drift];
        let lambdas = [self.lambda_d, self.lambda_hyb, self.lambda_repa, self.lambda_perc, self.lambda_drift];
        if temps.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::Config(format!("loss temperatures must be positive: {self:?}")));
        }
        if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        if let Some(s) = self.scalar_gate {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("scalar gate {s} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `mean‖v̂_x − v_x‖² + λ_d · mean‖v̂_d − v_d‖²`. Returns `(total, pixel, semantic)`.
pub fn v_co_loss(tape: &mut Tape, vx_hat: Var, vx: Var, vd_hat: Var, vd: Var, lambda_d: f32) -> Result<(Var, Var, Var)> {
    let lx = tape.mse(vx_hat, vx)?;
    let ld = tape.mse(vd_hat, vd)?;
    let wd = tape.scale(ld, lambda_d);
    Ok((tape.add(lx, wd)?, lx, ld))
}

/// Two-layer MLP from pixel hidden width to teacher feature width.
#[derive(Debug, Clone)]
pub struct RepaProjector {
    mlp: Mlp,
}

impl RepaProjector {
    /// Registers `repa.proj.*` parameters in `store`.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, hidden: usize, feature_dim: usize) -> Self {
        let mut b = Builder { store, rng };
        Self {
            mlp: Mlp::new(&mut b, "repa.proj", hidden, 2 * hidden, feature_dim),
        }
    }

    /// Looks up previously registered projector parameters.
    pub fn from_store(store: &ParamStore) -> Option<Self> {
        let lin = |name: &str| {
            let w = store.id(&format!("{name}.weight"))?;
            let b = store.id(&format!("{name}.bias"))?;
            let s = store.get(w).shape();
            Some(crate::model::Linear {
                weight: w,
                bias: Some(b),
                in_dim: s[0],
                out_dim: s[1],
            })
        };
        Some(Self {
            mlp: Mlp {
                fc1: lin("repa.proj.fc1")?,
                fc2: lin("repa.proj.fc2")?,
            },
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        self.mlp.forward(tape, p, h)
    }
}

/// `mean‖g(h_ℓ) − φ(x)‖²` against clean-image features.
pub fn repa_loss(tape: &mut Tape, p: &Bound, projector: &RepaProjector, hidden: &[Var], block_index: usize, target: Var) -> Result<Var> {
    if block_index == 0 || block_index > hidden.len() {
        return Err(Error::Invalid(format!(
            "REPA block index {block_index} outside 1..={}",
            hidden.len()
        )));
    }
    let g = projector.forward(tape, p, hidden[block_index - 1])?;
    tape.mse(g, target)
}

/// Normalized teacher features of predicted pixel tokens `[B, n, C·p²]`,
/// flattened to `[B, n·D]`.
pub fn teacher_features_on_tape(tape: &mut Tape, teacher: &TeacherEncoder, stats: &FeatureStats, tokens: Var) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    let f = teacher.encode_on_tape(tape, tokens)?;
    let f = stats.normalize_on_tape(tape, f)?;
    tape.reshape(f, &[s[0], s[1] * teacher.feature_dim()])
}

/// Mean over the `n` tokens of `[B, n·D]` features, giving one `[B, D]`
/// descriptor per image for the kernel-based losses.
pub fn pool_tokens(tape: &mut Tape, u: Var, dim: usize) -> Result<Var> {
    let nd = tape.shape(u)[1];
    if dim == 0 || !nd.is_multiple_of(dim) {
        return Err(Error::shape("pool_tokens", format!("width {nd} is not a multiple of {dim}")));
    }
    let pool = tape.constant(pooling_matrix(nd / dim, dim));
    tape.matmul(u, pool)
}

fn pooling_matrix(n: usize, dim: usize) -> Tensor {
    let mut m = vec![0.0f32; n * dim * dim];
    for k in 0..n {
        for j in 0..dim {
            m[(k * dim + j) * dim + j] = 1.0 / n as f32;
        }
    }
    Tensor::raw(vec![n * dim, dim], m)
}

/// Plain-tensor counterpart of [`pool_tokens`].
pub fn pool_token_rows(features: &Tensor, dim: usize) -> Result<Tensor> {
    let nd = features.shape()[1];
    if dim == 0 || !nd.is_multiple_of(dim) {
        return Err(Error::shape("pool_token_rows", format!("width {nd} is not a multiple of {dim}")));
    }
    features.matmul(&pooling_matrix(nd / dim, dim))
}

/// `mean‖φ(x̂) − φ(x)‖²` with `u = φ(x̂)` already on the tape.
pub fn perceptual_loss(tape: &mut Tape, u: Var, target: Var) -> Result<Var> {
    tape.mse(u, target)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Kernel-weighted mean of `(member − u)` with weights `exp(−‖u − member‖²/τ)`.
/// Weights are shifted by the nearest distance before exponentiation; the
/// normalization cancels the shift.
fn kernel_mean_offset(u: &[f32], set: &Tensor, tau: f32) -> Vec<f32> {
    let f = u.len();
    let d: Vec<f64> = (0..set.shape()[0]).map(|j| sq_dist(u, set.row(j))).collect();
    let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = d.iter().map(|&dj| (-(dj - dmin) / tau as f64).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0f64; f];
    for (j, &wj) in w.iter().enumerate() {
        for ((o, &m), &x) in out.iter_mut().zip(set.row(j)).zip(u) {
            *o += wj * (m as f64 - x as f64);
        }
    }
    out.into_iter().map(|o| (o / z) as f32).collect()
}

/// `V(u) = V⁺ − V⁻` toward `pos` and away from `neg` (rows of `[P, F]`, `[N, F]`).
pub fn drifting_field(u: &[f32], pos: &Tensor, neg: &Tensor, tau: f32) -> Result<Vec<f32>> {
    check_set("drifting_field", u, pos)?;
    check_set("drifting_field", u, neg)?;
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("drifting temperature {tau} must be positive")));
    }
    let vp = kernel_mean_offset(u, pos, tau);
    let vn = kernel_mean_offset(u, neg, tau);
    Ok(vp.iter().zip(&vn).map(|(a, b)| a - b).collect())
}

fn check_set(op: &'static str, u: &[f32], set: &Tensor) -> Result<()> {
    if set.rank() != 2 || set.shape()[1] != u.len() {
        return Err(Error::shape(op, format!("set {:?} for feature width {}", set.shape(), u.len())));
    }
    Ok(())
}

/// Drifting fields for a batch: positives are same-class clean features
/// (self included), negatives are same-class predicted features other than
/// self. A sample without negatives keeps only the attraction term.
pub fn batch_drifting_field(u: &Tensor, targets: &Tensor, classes: &[usize], tau: f32) -> Result<Tensor> {
    let (b, f) = (u.shape()[0], u.shape()[1]);
    let mut out = Vec::with_capacity(b * f);
    for i in 0..b {
        let same: Vec<usize> = (0..b).filter(|&j| classes[j] == classes[i]).collect();
        let pos = gather_rows(targets, &same);
        let others: Vec<usize> = same.iter().copied().filter(|&j| j != i).collect();
        let v = if others.is_empty() {
            kernel_mean_offset(u.row(i), &pos, tau)
        } else {
            drifting_field(u.row(i), &pos, &gather_rows(u, &others), tau)?
        };
        out.extend(v);
    }
    Tensor::new(&[b, f], out)
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let f = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * f);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::raw(vec![rows.len(), f], data)
}

/// `s = exp(−‖u − target‖² / τ_gate)`.
pub fn hybrid_gate(u: &[f32], target: &[f32], tau_gate: f32) -> f32 {
    (-sq_dist(u, target) / tau_gate as f64).exp() as f32
}

/// Softmax of `−‖u_i − u_j‖²/τ_rep` over same-class `j ≠ i`, as a length-B
/// vector with zeros elsewhere. `None` when `i` has no same-class neighbour.
pub fn repulsion_weights(u: &Tensor, classes: &[usize], i: usize, tau_rep: f32) -> Option<Vec<f32>> {
    repulsion_weights_f64(u, classes, i, tau_rep).map(|w| w.into_iter().map(|x| x as f32).collect())
}

fn repulsion_weights_f64(u: &Tensor, classes: &[usize], i: usize, tau_rep: f32) -> Option<Vec<f64>> {
    let b = u.shape()[0];
    let nbrs: Vec<usize> = (0..b).filter(|&j| j != i && classes[j] == classes[i]).collect();
    if nbrs.is_empty() {
        return None;
    }
    let logits: Vec<f64> = nbrs
        .iter()
        .map(|&j| -sq_dist(u.row(i), u.row(j)) / tau_rep as f64)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut w = vec![0.0; b];
    for (&j, ej) in nbrs.iter().zip(e) {
        w[j] = ej / z;
    }
    Some(w)
}

/// Every intermediate of the hybrid field for one batch.
#[derive(Debug, Clone)]
pub struct HybridFieldBatch {
    pub gates: Vec<f32>,
    /// `[B, B]`; row `i` is zero when `i` has no same-class neighbour.
    pub alpha: Tensor,
    pub v_pos: Tensor,
    pub v_neg: Tensor,
    pub v_hyb: Tensor,
}

/// `V_hyb,i = s_i·V⁺_i − (1 − s_i)·V⁻_i` with `V⁺_i = target_i − u_i` and
/// `V⁻_i = Σ_j α_ij u_j − u_i`.
pub fn hybrid_field(u: &Tensor, targets: &Tensor, classes: &[usize], w: &LossWeights) -> Result<HybridFieldBatch> {
    if u.rank() != 2 || u.shape() != targets.shape() || classes.len() != u.shape()[0] {
        return Err(Error::shape(
            "hybrid_field",
            format!("u {:?}, targets {:?}, {} classes", u.shape(), targets.shape(), classes.len()),
        ));
    }
    let (b, f) = (u.shape()[0], u.shape()[1]);
    let mut gates = Vec::with_capacity(b);
    let mut alpha = vec![0.0f32; b * b];
    let (mut vp, mut vn, mut vh) = (vec![0.0f32; b * f], vec![0.0f32; b * f], vec![0.0f32; b * f]);
    for i in 0..b {
        let ui = u.row(i);
        let s = match w.scalar_gate {
            Some(g) => g as f64,
            None => (-sq_dist(ui, targets.row(i)) / w.tau_gate as f64).exp(),
        };
        gates.push(s as f32);
        let pos: Vec<f64> = targets.row(i).iter().zip(ui).map(|(&t, &x)| t as f64 - x as f64).collect();
        let mut neg = vec![0.0f64; f];
        if let Some(a) = repulsion_weights_f64(u, classes, i, w.tau_rep) {
            for (j, &aj) in a.iter().enumerate() {
                if aj != 0.0 {
                    for (c, &x) in neg.iter_mut().zip(u.row(j)) {
                        *c += aj * x as f64;
                    }
                }
                alpha[i * b + j] = aj as f32;
            }
            for (c, &x) in neg.iter_mut().zip(ui) {
                *c -= x as f64;
            }
        }
        for k in 0..f {
            vp[i * f + k] = pos[k] as f32;
            vn[i * f + k] = neg[k] as f32;
            vh[i * f + k] = (s * pos[k] - (1.0 - s) * neg[k]) as f32;
        }
    }
    Ok(HybridFieldBatch {
        gates,
        alpha: Tensor::raw(vec![b, b], alpha),
        v_pos: Tensor::raw(vec![b, f], vp),
        v_neg: Tensor::raw(vec![b, f], vn),
        v_hyb: Tensor::raw(vec![b, f], vh),
    })
}

/// `weight · (1/B) Σ_i ‖u_i − sg(u_i + V_i)‖²` for `u: [B, F]`.
pub fn frozen_field_loss(tape: &mut Tape, u: Var, field: &Tensor, weight: f32) -> Result<Var> {
    let uv = tape.value(u);
    if uv.shape() != field.shape() || uv.rank() != 2 {
        return Err(Error::shape("frozen_field_loss", format!("u {:?}, field {:?}", uv.shape(), field.shape())));
    }
    let b = uv.shape()[0];
    let target = tape.constant(uv.add(field)?);
    let d = tape.sub(u, target)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, weight / b as f32))
}

/// Drifting loss with the batch field of [`batch_drifting_field`].
pub fn drifting_loss(tape: &mut Tape, u: Var, targets: &Tensor, classes: &[usize], w: &LossWeights) -> Result<(Var, Tensor)> {
    let field = batch_drifting_field(tape.value(u), targets, classes, w.tau_drift)?;
    Ok((frozen_field_loss(tape, u, &field, w.lambda_drift)?, field))
}

/// `λ_hyb · mean_i ‖u_i − sg(u_i + V_hyb,i)‖²`.
pub fn hybrid_loss(tape: &mut Tape, u: Var, targets: &Tensor, classes: &[usize], w: &LossWeights) -> Result<(Var, HybridFieldBatch)> {
    let batch = hybrid_field(tape.value(u), targets, classes, w)?;
    Ok((frozen_field_loss(tape, u, &batch.v_hyb, w.lambda_hyb)?, batch))
}
