//! Invariant suite shared by the `verify` command and the test targets.
//!
//! Each check computes one worst-case figure and compares it with a fixed
//! threshold. The oracles here are deliberately naive double loops in f64 so
//! they share no code with the implementations they check.

use std::fmt;

use crate::data::{generate as generate_dataset, Dataset, DatasetSpec};
use crate::error::Result;
use crate::losses::{hybrid_field, perceptual_loss, repa_loss, teacher_features_on_tape, v_co_loss, LossWeights, RepaProjector};
use crate::model::{Bound, ParamStore, MaskType, Model, ModelConfig, SampleCond, Conditioning, SemanticInput, Variant};
use crate::sampler::{heun_integrate, linear_grid};
use crate::schedule::{snr, time_shift};
use crate::teacher::{FeatureStats, TeacherEncoder, TeacherSpec};
use crate::tensor::grad_check;
use crate::trainer::checkpoint::{read_entries, write_entries, Checkpoint};
use crate::trainer::{AdamState, EmaState};
use crate::{Mask, Rng, Tape, Tensor, Var};

/// Finite-difference step for primitive checks.
pub const PRIMITIVE_STEP: f32 = 1e-2;
/// Finite-difference step for the full training loss.
pub const FULL_LOSS_STEP: f32 = 5e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Pass when `value <= threshold`, or `value > threshold` for lower bounds.
    pub threshold: f64,
    pub lower_bound: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            lower_bound: false,
        }
    }

    pub fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            lower_bound: true,
        }
    }

    pub fn passed(&self) -> bool {
        if self.lower_bound {
            self.value > self.threshold
        } else {
            self.value <= self.threshold
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = if self.lower_bound { ">" } else { "<=" };
        let tag = if self.passed() { "ok  " } else { "FAIL" };
        write!(f, "{tag} {:<40} {:.3e} {op} {:.1e}", self.name, self.value, self.threshold)
    }
}

type Objective = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

fn constant_weights(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// `Σ w ⊙ y` for a fixed random `w`, so every output entry is probed.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let c = tape.constant(w.clone());
    let m = tape.mul(y, c)?;
    Ok(tape.sum(m))
}

fn unary_case(shape: &[usize], rng: &mut Rng, f: fn(&mut Tape, Var) -> Var) -> (Tensor, Objective) {
    let x = Tensor::randn(shape, 1.0, rng);
    let w = constant_weights(rng, shape);
    (x, Box::new(move |t, x| {
        let y = f(t, x);
        project(t, y, &w)
    }))
}

/// Builds the input and objective for one named primitive.
pub fn primitive_case(name: &str, rng: &mut Rng) -> (Tensor, Objective) {
    match name {
        "add" | "sub" | "mul" => {
            let x = Tensor::randn(&[3, 4], 1.0, rng);
            let c = Tensor::randn(&[1, 4], 1.0, rng);
            let w = constant_weights(rng, &[3, 4]);
            let op = name.to_string();
            (x, Box::new(move |t, x| {
                let cv = t.constant(c.clone());
                let y = match op.as_str() {
                    "add" => t.add(x, cv)?,
                    "sub" => t.sub(cv, x)?,
                    _ => {
                        let a = t.mul(x, cv)?;
                        t.mul(a, x)?
                    }
                };
                project(t, y, &w)
            }))
        }
        "broadcast_operand" => {
            let x = Tensor::randn(&[1, 4], 1.0, rng);
            let c = Tensor::randn(&[3, 4], 1.0, rng);
            let w = constant_weights(rng, &[3, 4]);
            (x, Box::new(move |t, x| {
                let cv = t.constant(c.clone());
                let y = t.mul(cv, x)?;
                let y = t.add(y, x)?;
                project(t, y, &w)
            }))
        }
        "affine" => unary_case(&[2, 5], rng, |t, x| t.affine(x, 1.7, 0.3)),
        "matmul" | "matmul_t" | "matmul_batched" => {
            let (xs, cs, ta, tb, x_left): (&[usize], &[usize], bool, bool, bool) = match name {
                "matmul" => (&[3, 4], &[4, 5], false, false, true),
                "matmul_t" => (&[5, 4], &[3, 4], false, true, false),
                _ => (&[2, 4, 3], &[2, 4, 5], true, false, true),
            };
            let x = Tensor::randn(xs, 1.0, rng);
            let c = Tensor::randn(cs, 1.0, rng);
            let out = match name {
                "matmul" => vec![3, 5],
                "matmul_t" => vec![3, 5],
                _ => vec![2, 3, 5],
            };
            let w = constant_weights(rng, &out);
            (x, Box::new(move |t, x| {
                let cv = t.constant(c.clone());
                let y = if x_left { t.matmul_t(x, cv, ta, tb)? } else { t.matmul_t(cv, x, ta, tb)? };
                project(t, y, &w)
            }))
        }
        "reshape" => {
            let x = Tensor::randn(&[2, 6], 1.0, rng);
            let w = constant_weights(rng, &[3, 4]);
            (x, Box::new(move |t, x| {
                let y = t.reshape(x, &[3, 4])?;
                project(t, y, &w)
            }))
        }
        "permute" => {
            let x = Tensor::randn(&[2, 3, 4], 1.0, rng);
            let w = constant_weights(rng, &[4, 2, 3]);
            (x, Box::new(move |t, x| {
                let y = t.permute(x, &[2, 0, 1])?;
                project(t, y, &w)
            }))
        }
        "transpose" => {
            let x = Tensor::randn(&[2, 3, 4], 1.0, rng);
            let w = constant_weights(rng, &[4, 3, 2]);
            (x, Box::new(move |t, x| {
                let y = t.transpose(x, 0, 2)?;
                project(t, y, &w)
            }))
        }
        "concat" => {
            let x = Tensor::randn(&[2, 3], 1.0, rng);
            let c = Tensor::randn(&[2, 2], 1.0, rng);
            let w = constant_weights(rng, &[2, 8]);
            (x, Box::new(move |t, x| {
                let cv = t.constant(c.clone());
                let y = t.concat(&[x, cv, x], 1)?;
                project(t, y, &w)
            }))
        }
        "slice" => {
            let x = Tensor::randn(&[3, 5], 1.0, rng);
            let w = constant_weights(rng, &[3, 2]);
            (x, Box::new(move |t, x| {
                let y = t.slice(x, 1, 1, 3)?;
                project(t, y, &w)
            }))
        }
        "softmax" => unary_case(&[3, 5], rng, |t, x| t.softmax(x).expect("rank >= 1")),
        "softmax_masked" => {
            let x = Tensor::randn(&[2, 3, 4], 1.0, rng);
            let w = constant_weights(rng, &[2, 3, 4]);
            let mut bits: Vec<bool> = (0..24).map(|_| rng.bernoulli(0.6)).collect();
            for r in 0..6 {
                bits[r * 4 + r % 4] = true;
            }
            let mask = Mask::new(&[2, 3, 4], bits).expect("mask shape");
            (x, Box::new(move |t, x| {
                let y = t.softmax_masked(x, Some(&mask))?;
                project(t, y, &w)
            }))
        }
        "rms_norm" | "rms_norm_gain" => {
            let a = Tensor::randn(&[3, 6], 1.0, rng);
            let g = Tensor::randn(&[6], 1.0, rng);
            let w = constant_weights(rng, &[3, 6]);
            let wrt_gain = name == "rms_norm_gain";
            let (x, other) = if wrt_gain { (g, a) } else { (a, g) };
            (x, Box::new(move |t, x| {
                let o = t.constant(other.clone());
                let y = if wrt_gain { t.rms_norm(o, x)? } else { t.rms_norm(x, o)? };
                project(t, y, &w)
            }))
        }
        "silu" => unary_case(&[4, 3], rng, |t, x| t.silu(x)),
        "gelu" => unary_case(&[4, 3], rng, |t, x| t.gelu(x)),
        "tanh" => unary_case(&[4, 3], rng, |t, x| t.tanh(x)),
        "exp" => unary_case(&[4, 3], rng, |t, x| t.exp(x)),
        "log" => {
            let x = Tensor::from_fn(&[4, 3], |_| rng.uniform_range(0.5, 2.0));
            let w = constant_weights(rng, &[4, 3]);
            (x, Box::new(move |t, x| {
                let y = t.log(x);
                project(t, y, &w)
            }))
        }
        "sum" | "mean" => {
            let x = Tensor::randn(&[3, 4], 1.0, rng);
            let c = Tensor::randn(&[3, 4], 1.0, rng);
            let mean = name == "mean";
            (x, Box::new(move |t, x| {
                let cv = t.constant(c.clone());
                let y = t.mul(x, cv)?;
                let y = t.mul(y, x)?;
                Ok(if mean { t.mean(y) } else { t.sum(y) })
            }))
        }
        "mse" => {
            let x = Tensor::randn(&[3, 4], 1.0, rng);
            let c = Tensor::randn(&[3, 4], 1.0, rng);
            (x, Box::new(move |t, x| {
                let cv = t.constant(c.clone());
                t.mse(x, cv)
            }))
        }
        "embedding" => {
            let x = Tensor::randn(&[5, 3], 1.0, rng);
            let ids: Vec<usize> = (0..6).map(|_| rng.below(5)).collect();
            let w = constant_weights(rng, &[6, 3]);
            (x, Box::new(move |t, x| {
                let y = t.embedding(x, &ids)?;
                project(t, y, &w)
            }))
        }
        other => panic!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "broadcast_operand",
    "affine",
    "matmul",
    "matmul_t",
    "matmul_batched",
    "reshape",
    "permute",
    "transpose",
    "concat",
    "slice",
    "softmax",
    "softmax_masked",
    "rms_norm",
    "rms_norm_gain",
    "silu",
    "gelu",
    "tanh",
    "exp",
    "log",
    "sum",
    "mean",
    "mse",
    "embedding",
];

/// Worst grad-check error of each primitive over `seeds`.
pub fn primitive_grad_errors(seeds: std::ops::Range<u64>) -> Result<Vec<(&'static str, f32)>> {
    PRIMITIVES
        .iter()
        .map(|&name| {
            let mut worst = 0.0f32;
            for s in seeds.clone() {
                let mut rng = Rng::new(s);
                let (x, f) = primitive_case(name, &mut rng);
                worst = worst.max(grad_check(f, &x, PRIMITIVE_STEP)?);
            }
            Ok((name, worst))
        })
        .collect()
}

/// Two-token dual-stream model used by the full-loss check.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::DualStream,
        depth: 1,
        hidden: 4,
        heads: 2,
        mlp_ratio: 2,
        height: 4,
        width: 8,
        channels: 1,
        patch_size: 4,
        n_classes: 2,
        semantic_dim: 2,
        repa_block_index: 1,
        time_freq_dim: 4,
        ..ModelConfig::default()
    }
}

/// Grad-check error of the differentiable training objective
/// (`L_x + λ_d L_d + L_repa + L_perc`) with respect to every parameter of
/// the toy model, at randomised parameters.
pub fn full_loss_grad_error(seed: u64) -> Result<f32> {
    full_loss_grad_error_at(seed, FULL_LOSS_STEP)
}

pub fn full_loss_grad_error_at(seed: u64, h: f32) -> Result<f32> {
    let mc = toy_model_config();
    let mut rng = Rng::new(seed);
    let (model, mut store) = Model::new(mc.clone(), &mut rng)?;
    let projector = RepaProjector::new(&mut store, &mut rng, mc.hidden, mc.semantic_dim);
    for v in store.values_mut() {
        let noise = Tensor::randn(v.shape(), 0.1, &mut rng);
        *v = v.add(&noise)?;
    }
    let teacher = TeacherEncoder::new(TeacherSpec {
        seed: seed ^ 0x5eed,
        patch_size: mc.patch_size,
        in_channels: mc.channels,
        feature_dim: mc.semantic_dim,
    })?;
    let stats = FeatureStats {
        mean: vec![0.1; mc.semantic_dim],
        std: vec![0.8; mc.semantic_dim],
    };
    let (b, n, pd, dd) = (3, mc.n_tokens(), mc.pixel_dim(), mc.semantic_dim);
    let zx = Tensor::randn(&[b, n, pd], 1.0, &mut rng);
    let zd = Tensor::randn(&[b, n, dd], 1.0, &mut rng);
    let vx = Tensor::randn(&[b, n, pd], 1.0, &mut rng);
    let vd = Tensor::randn(&[b, n, dd], 1.0, &mut rng);
    let feats = Tensor::randn(&[b, n, dd], 1.0, &mut rng);
    let t: Vec<f32> = (0..b).map(|_| rng.uniform_range(0.1, 0.9)).collect();
    let inv = Tensor::raw(vec![b, 1, 1], t.iter().map(|&ti| 1.0 / (1.0 - ti)).collect());
    let samples = vec![
        SampleCond::class(1),
        SampleCond {
            class: None,
            mask: MaskType::SemanticToPixel,
            semantic_input: SemanticInput::Features,
        },
        SampleCond {
            class: Some(0),
            mask: MaskType::None,
            semantic_input: SemanticInput::NullToken,
        },
    ];
    let cond = Conditioning::new(t, samples);
    let shapes: Vec<Vec<usize>> = store.values().iter().map(|v| v.shape().to_vec()).collect();
    let flat: Vec<f32> = store.values().iter().flat_map(|v| v.data().iter().copied()).collect();
    let total = flat.len();
    let objective = move |tape: &mut Tape, x: Var| -> Result<Var> {
        let mut vars = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for s in &shapes {
            let len: usize = s.iter().product();
            let piece = tape.slice(x, 0, off, off + len)?;
            vars.push(tape.reshape(piece, s)?);
            off += len;
        }
        let p = Bound::from_vars(vars);
        let zxv = tape.constant(zx.clone());
        let zdv = tape.constant(zd.clone());
        let out = model.forward(tape, &p, zxv, zdv, &cond)?;
        let iv = tape.constant(inv.clone());
        let dx = tape.sub(out.pred_pixels, zxv)?;
        let vx_hat = tape.mul(dx, iv)?;
        let ddv = tape.sub(out.pred_semantics, zdv)?;
        let vd_hat = tape.mul(ddv, iv)?;
        let (vxt, vdt) = (tape.constant(vx.clone()), tape.constant(vd.clone()));
        let (l, _, _) = v_co_loss(tape, vx_hat, vxt, vd_hat, vdt, 0.1)?;
        let target = tape.constant(feats.clone());
        let lr = repa_loss(tape, &p, &projector, &out.hidden_pixel, 1, target)?;
        let u = teacher_features_on_tape(tape, &teacher, &stats, out.pred_pixels)?;
        let ft = tape.constant(feats.clone().reshape(&[b, n * dd])?);
        let lp = perceptual_loss(tape, u, ft)?;
        let l = tape.add(l, lr)?;
        tape.add(l, lp)
    };
    grad_check(objective, &Tensor::raw(vec![total], flat), h)
}

/// Randomised toy model with parameters large enough that every path
/// through the network carries signal.
fn perturbed_model(variant: Variant, seed: u64) -> Result<(Model, ParamStore)> {
    let mc = ModelConfig {
        variant,
        depth: 2,
        hidden: 16,
        heads: 2,
        height: 8,
        width: 8,
        n_classes: 3,
        semantic_dim: 4,
        repa_block_index: 1,
        time_freq_dim: 16,
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(seed);
    let (model, mut store) = Model::new(mc, &mut rng)?;
    for v in store.values_mut() {
        let noise = Tensor::randn(v.shape(), 0.2, &mut rng);
        *v = v.add(&noise)?;
    }
    Ok((model, store))
}

#[derive(Debug, Clone, Copy)]
pub struct MaskInvariance {
    /// Change of `x̂` when only the semantic input changes, semantic-to-pixel mask.
    pub s2p_pixel: f32,
    pub bidir_pixel: f32,
    /// Change of `d̂` when only the pixel input changes, bidirectional mask.
    pub bidir_semantic: f32,
    /// Change of `x̂` without a mask; must be nonzero.
    pub unmasked_pixel: f32,
}

pub fn mask_invariance(seed: u64) -> Result<MaskInvariance> {
    let (model, store) = perturbed_model(Variant::DualStream, seed)?;
    let mc = model.config().clone();
    let (b, n) = (2, mc.n_tokens());
    let mut rng = Rng::new(seed.wrapping_add(1));
    let zx = Tensor::randn(&[b, n, mc.pixel_dim()], 1.0, &mut rng);
    let zd = Tensor::randn(&[b, n, mc.semantic_dim], 1.0, &mut rng);
    let zx2 = Tensor::randn(&[b, n, mc.pixel_dim()], 1.0, &mut rng);
    let zd2 = Tensor::randn(&[b, n, mc.semantic_dim], 1.0, &mut rng);
    let t = vec![0.3, 0.7];
    let cond = |mask| {
        let s = SampleCond {
            class: None,
            mask,
            semantic_input: SemanticInput::Features,
        };
        Conditioning::new(t.clone(), vec![s; b])
    };
    let run = |x: &Tensor, d: &Tensor, m| model.predict(&store, x, d, &cond(m));
    let (a, _) = run(&zx, &zd, MaskType::SemanticToPixel)?;
    let (a2, _) = run(&zx, &zd2, MaskType::SemanticToPixel)?;
    let (bx, bd) = run(&zx, &zd, MaskType::Bidirectional)?;
    let (bx2, _) = run(&zx, &zd2, MaskType::Bidirectional)?;
    let (_, bd2) = run(&zx2, &zd, MaskType::Bidirectional)?;
    let (u, _) = run(&zx, &zd, MaskType::None)?;
    let (u2, _) = run(&zx, &zd2, MaskType::None)?;
    Ok(MaskInvariance {
        s2p_pixel: a.max_abs_diff(&a2),
        bidir_pixel: bx.max_abs_diff(&bx2),
        bidir_semantic: bd.max_abs_diff(&bd2),
        unmasked_pixel: u.max_abs_diff(&u2),
    })
}

/// Worst relative SNR mismatch between `α·d` at `t` and `d` at the shifted
/// time, and worst shift round-trip error, over `n` random draws.
pub fn snr_equivalence(n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = Rng::new(seed);
    let (mut worst_snr, mut worst_trip) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let alpha = 10f64.powf(rng.uniform_range(-1.0, 1.0) as f64);
        let t = (rng.uniform() as f64).clamp(1e-4, 1.0 - 1e-4);
        let power = 0.1 + rng.uniform() as f64;
        let scaled = snr(t, alpha * alpha * power, 1.0)?;
        let shifted = snr(time_shift(alpha, t), power, 1.0)?;
        worst_snr = worst_snr.max((scaled - shifted).abs() / scaled);
        worst_trip = worst_trip.max((time_shift(1.0 / alpha, time_shift(alpha, t)) - t).abs());
    }
    Ok((worst_snr, worst_trip))
}

fn sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Plain-softmax oracle of the hybrid field for one batch.
pub fn hybrid_oracle(u: &Tensor, targets: &Tensor, classes: &[usize], w: &LossWeights) -> (Vec<f64>, Vec<f64>) {
    let (b, f) = (u.shape()[0], u.shape()[1]);
    let mut v = vec![0.0; b * f];
    let mut row_sums = vec![0.0; b];
    for i in 0..b {
        let s = w.scalar_gate.map_or_else(|| (-sq(u.row(i), targets.row(i)) / w.tau_gate as f64).exp(), |g| g as f64);
        let mut weights = vec![0.0; b];
        let mut z = 0.0;
        for j in 0..b {
            if j != i && classes[j] == classes[i] {
                weights[j] = (-sq(u.row(i), u.row(j)) / w.tau_rep as f64).exp();
                z += weights[j];
            }
        }
        for k in 0..f {
            let pos = targets.row(i)[k] as f64 - u.row(i)[k] as f64;
            let mut neg = 0.0;
            if z > 0.0 {
                for j in 0..b {
                    neg += weights[j] / z * u.row(j)[k] as f64;
                }
                neg -= u.row(i)[k] as f64;
            }
            v[i * f + k] = s * pos - (1.0 - s) * neg;
        }
        row_sums[i] = if z > 0.0 { weights.iter().sum::<f64>() / z } else { 1.0 };
    }
    (v, row_sums)
}

/// Plain-softmax oracle of the single-sample drifting field.
pub fn drifting_oracle(u: &[f32], pos: &Tensor, neg: &Tensor, tau: f32) -> Vec<f64> {
    let attract = |set: &Tensor| -> Vec<f64> {
        let f = u.len();
        let m = set.shape()[0];
        let k: Vec<f64> = (0..m).map(|j| (-sq(u, set.row(j)) / tau as f64).exp()).collect();
        let z: f64 = k.iter().sum();
        (0..f)
            .map(|c| (0..m).map(|j| k[j] / z * set.row(j)[c] as f64).sum::<f64>() - u[c] as f64)
            .collect()
    };
    let (p, n) = (attract(pos), attract(neg));
    p.iter().zip(&n).map(|(a, b)| a - b).collect()
}

fn max_abs(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy)]
pub struct FieldOracleErrors {
    pub drifting: f64,
    pub hybrid: f64,
    pub alpha_row_sum: f64,
    /// `‖V_hyb − V⁺‖` at zero distance.
    pub gate_one: f64,
    /// `‖V_hyb + V⁻‖` at large distance.
    pub gate_zero: f64,
}

/// Random batch with few classes so most samples have same-class neighbours.
fn field_batch(rng: &mut Rng, b: usize, f: usize, spread: f32) -> (Tensor, Tensor, Vec<usize>) {
    let u = Tensor::randn(&[b, f], spread, rng);
    let targets = Tensor::randn(&[b, f], spread, rng);
    let classes = (0..b).map(|_| rng.below(3)).collect();
    (u, targets, classes)
}

pub fn field_oracle_errors(batches: usize, seed: u64) -> Result<FieldOracleErrors> {
    let mut rng = Rng::new(seed);
    let mut e = FieldOracleErrors {
        drifting: 0.0,
        hybrid: 0.0,
        alpha_row_sum: 0.0,
        gate_one: 0.0,
        gate_zero: 0.0,
    };
    for _ in 0..batches {
        let b = 2 + rng.below(15);
        let f = 1 + rng.below(16);
        let (u, targets, classes) = field_batch(&mut rng, b, f, 0.5);
        let w = LossWeights::default();

        let m = 1 + rng.below(8);
        let pos = Tensor::randn(&[m, f], 0.5, &mut rng);
        let neg = Tensor::randn(&[1 + rng.below(8), f], 0.5, &mut rng);
        let got = crate::losses::drifting_field(u.row(0), &pos, &neg, w.tau_drift)?;
        e.drifting = e.drifting.max(max_abs(&got, &drifting_oracle(u.row(0), &pos, &neg, w.tau_drift)));

        let batch = hybrid_field(&u, &targets, &classes, &w)?;
        let (oracle, _) = hybrid_oracle(&u, &targets, &classes, &w);
        e.hybrid = e.hybrid.max(max_abs(batch.v_hyb.data(), &oracle));
        for i in 0..b {
            let has_neighbour = (0..b).any(|j| j != i && classes[j] == classes[i]);
            if has_neighbour {
                let s: f64 = batch.alpha.row(i).iter().map(|&a| a as f64).sum();
                e.alpha_row_sum = e.alpha_row_sum.max((s - 1.0).abs());
            }
        }

        let near = u.add(&Tensor::randn(u.shape(), 1e-4, &mut rng))?;
        let same = batch_gate_case(&u, &near, &classes, &w)?;
        e.gate_one = e.gate_one.max(same);
        let far = u.map(|x| x + 100.0);
        let far_batch = hybrid_field(&u, &far, &classes, &w)?;
        let dev = far_batch
            .v_hyb
            .data()
            .iter()
            .zip(far_batch.v_neg.data())
            .map(|(&h, &n)| (h + n).abs() as f64)
            .fold(0.0, f64::max);
        e.gate_zero = e.gate_zero.max(dev);
    }
    Ok(e)
}

fn batch_gate_case(u: &Tensor, targets: &Tensor, classes: &[usize], w: &LossWeights) -> Result<f64> {
    let batch = hybrid_field(u, targets, classes, w)?;
    Ok(batch
        .v_hyb
        .data()
        .iter()
        .zip(batch.v_pos.data())
        .map(|(&h, &p)| (h - p).abs() as f64)
        .fold(0.0, f64::max))
}

/// Relative gap between the tape gradient of the frozen-field losses and
/// `−2 λ V / B`, worst over `n` random batches.
pub fn stop_gradient_errors(n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = Rng::new(seed);
    let w = LossWeights::default();
    let (mut drift, mut hyb) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let b = 2 + rng.below(15);
        let f = 1 + rng.below(16);
        let (u, targets, classes) = field_batch(&mut rng, b, f, 0.5);
        for (which, worst) in [(0, &mut drift), (1, &mut hyb)] {
            let mut tape = Tape::new();
            let uv = tape.param(u.clone());
            let (loss, field, lambda) = if which == 0 {
                let (l, v) = crate::losses::drifting_loss(&mut tape, uv, &targets, &classes, &w)?;
                (l, v, w.lambda_drift)
            } else {
                let (l, hb) = crate::losses::hybrid_loss(&mut tape, uv, &targets, &classes, &w)?;
                (l, hb.v_hyb, w.lambda_hyb)
            };
            let g = tape.backward(loss)?.get(uv).cloned().unwrap_or_else(|| Tensor::zeros(u.shape()));
            let expect: Vec<f64> = field.data().iter().map(|&v| -2.0 * lambda as f64 * v as f64 / b as f64).collect();
            let num: f64 = g.data().iter().zip(&expect).map(|(&a, b)| (a as f64 - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = expect.iter().map(|x| x * x).sum::<f64>().sqrt();
            if den > 0.0 {
                *worst = worst.max(num / den);
            }
        }
    }
    Ok((drift, hyb))
}

/// Relative error after 50 steps and the empirical order from 10 vs 20
/// steps, on `dz/dt = −z`.
pub fn heun_order() -> Result<(f64, f64)> {
    let field = |x: &Tensor, d: &Tensor, _: f32, _: f32| Ok((x.scale(-1.0), d.scale(-1.0)));
    let err = |steps: usize| -> Result<f64> {
        let one = Tensor::raw(vec![1], vec![1.0]);
        let (x, _) = heun_integrate(&field, one.clone(), one, &linear_grid(steps), None)?;
        let exact = (-1f64).exp();
        Ok((x.item() as f64 - exact).abs() / exact)
    };
    let e50 = err(50)?;
    let order = (err(10)? / err(20)?).log2();
    Ok((e50, order))
}

/// Serialised size mismatch count after write → read → write for a small
/// dataset and checkpoint (0 means bitwise round trips).
pub fn format_round_trips(seed: u64) -> Result<usize> {
    let ds = generate_dataset(&DatasetSpec {
        samples_per_class: 8,
        seed,
        ..DatasetSpec::default()
    })?;
    let mut a = Vec::new();
    ds.write_to(&mut a)?;
    let back = Dataset::read_from(&mut a.as_slice())?;
    let mut b = Vec::new();
    back.write_to(&mut b)?;
    let mut bad = usize::from(a != b || back != ds);

    let (_, store) = perturbed_model(Variant::DualStream, seed)?;
    let ckpt = Checkpoint {
        config: "seed = 1\n".into(),
        teacher_seed: seed,
        stats: FeatureStats {
            mean: vec![0.0; 4],
            std: vec![1.0; 4],
        },
        calibration: crate::schedule::Calibration::identity(),
        step: 3,
        adam: AdamState::new(store.values()),
        ema: EmaState::new(&[0.9], store.values()),
        params: store,
    };
    let mut c1 = Vec::new();
    write_entries(&mut c1, &ckpt.entries())?;
    let back = Checkpoint::from_entries(read_entries(&mut c1.as_slice())?)?;
    let mut c2 = Vec::new();
    write_entries(&mut c2, &back.entries())?;
    bad += usize::from(c1 != c2 || back != ckpt);
    Ok(bad)
}

/// Runs every check. `seeds` sets the number of random seeds for the grad
/// checks.
pub fn run_suite(seeds: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, err) in primitive_grad_errors(0..seeds)? {
        out.push(Check::at_most(format!("grad/{name}"), err as f64, 1e-3));
    }
    let mut worst = 0.0f32;
    for s in 0..seeds {
        worst = worst.max(full_loss_grad_error(s)?);
    }
    out.push(Check::at_most("grad/full_loss", worst as f64, 1e-2));

    let m = mask_invariance(7)?;
    out.push(Check::at_most("mask/semantic_to_pixel", m.s2p_pixel as f64, 1e-5));
    out.push(Check::at_most("mask/bidirectional_pixel", m.bidir_pixel as f64, 1e-5));
    out.push(Check::at_most("mask/bidirectional_semantic", m.bidir_semantic as f64, 1e-5));
    out.push(Check::above("mask/unmasked_sensitivity", m.unmasked_pixel as f64, 1e-4));

    let (snr_err, trip) = snr_equivalence(1000, 11)?;
    out.push(Check::at_most("snr/scaled_vs_shifted", snr_err, 1e-6));
    out.push(Check::at_most("snr/shift_round_trip", trip, 1e-6));

    let f = field_oracle_errors(200, 13)?;
    out.push(Check::at_most("field/drifting_oracle", f.drifting, 1e-6));
    out.push(Check::at_most("field/hybrid_oracle", f.hybrid, 1e-6));
    out.push(Check::at_most("field/alpha_row_sums", f.alpha_row_sum, 1e-6));
    out.push(Check::at_most("field/gate_one_limit", f.gate_one, 1e-6));
    out.push(Check::at_most("field/gate_zero_limit", f.gate_zero, 1e-6));

    let (d, h) = stop_gradient_errors(200, 17)?;
    out.push(Check::at_most("stopgrad/drifting", d, 1e-4));
    out.push(Check::at_most("stopgrad/hybrid", h, 1e-4));

    let (e50, order) = heun_order()?;
    out.push(Check::at_most("heun/error_50_steps", e50, 1e-3));
    out.push(Check::at_most("heun/order_low", (1.8 - order).max(0.0), 0.0));
    out.push(Check::at_most("heun/order_high", (order - 2.2).max(0.0), 0.0));

    out.push(Check::at_most("format/round_trips", format_round_trips(19)? as f64, 0.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_with_few_seeds() {
        let checks = run_suite(3).unwrap();
        for c in &checks {
            println!("{c}");
        }
        assert!(checks.iter().all(Check::passed));
    }
}
