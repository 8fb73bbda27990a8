//! Training loop: conditioning dropout, joint loss, Adam, EMA, checkpoints.

pub mod checkpoint;
mod optim;

pub use checkpoint::{read_entries, write_entries, Checkpoint, Payload, CHECKPOINT_MAGIC};
pub use optim::{adam_step, ema_update, warmup_lr, AdamParams, AdamState, EmaState};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    drifting_loss, hybrid_loss, perceptual_loss, pool_token_rows, pool_tokens, repa_loss, teacher_features_on_tape, v_co_loss, AuxLoss,
    LossWeights, RepaProjector,
};
use crate::model::{Conditioning, Model, ModelConfig, ParamStore, SampleCond, Variant};
use crate::rng::streams;
use crate::sampler::UncondType;
use crate::schedule::{time_shift, velocity_denominator, TimeSampler, DEFAULT_CLIP};
use crate::teacher::{patchify, SemanticPipeline};
use crate::{Rng, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    #[default]
    Joint,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutConfig {
    pub mode: DropoutMode,
    pub p_joint: f32,
    pub p_label: f32,
    pub p_semantic: f32,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            mode: DropoutMode::Joint,
            p_joint: 0.1,
            p_label: 0.1,
            p_semantic: 0.1,
        }
    }
}

/// How the semantic stream is matched to the pixel stream's SNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Features multiplied by `α`.
    #[default]
    RmsScale,
    /// Features left unscaled; the semantic stream runs at `t′(α, t)`.
    TimeShift,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub ema_decays: Vec<f32>,
    pub dropout: DropoutConfig,
    pub uncond_type: UncondType,
    pub aux_loss: AuxLoss,
    pub losses: LossWeights,
    pub calibration: CalibrationMode,
    pub time_sampler: TimeSampler,
    /// Lower bound on `1 − t` in the clean-to-velocity conversion.
    pub clip: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 30,
            warmup_epochs: 5,
            ema_decays: vec![0.9996, 0.9998, 0.9999],
            dropout: DropoutConfig::default(),
            uncond_type: UncondType::default(),
            aux_loss: AuxLoss::None,
            losses: LossWeights::default(),
            calibration: CalibrationMode::default(),
            time_sampler: TimeSampler::default(),
            clip: DEFAULT_CLIP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be non-negative", self.lr));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if self.batch_size < 2 || self.epochs == 0 {
            return bad(format!("batch_size {} must be >= 2 and epochs >= 1", self.batch_size));
        }
        if self.ema_decays.iter().any(|d| !(0.0..1.0).contains(d)) {
            return bad(format!("EMA decays {:?} must lie in [0, 1)", self.ema_decays));
        }
        let d = &self.dropout;
        if [d.p_joint, d.p_label, d.p_semantic].iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!("dropout probabilities outside [0, 1]: {d:?}"));
        }
        if !(self.clip > 0.0 && self.clip <= 1.0) {
            return bad(format!("clip {} outside (0, 1]", self.clip));
        }
        self.losses.validate()?;
        self.time_sampler.validate()
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Conditioning for a batch after dropout.
#[derive(Debug, Clone)]
pub struct DroppedConditioning {
    pub samples: Vec<SampleCond>,
    /// Samples that received the full unconditional treatment.
    pub unconditional: usize,
}

/// Draws per-sample conditioning. Joint mode drops class and semantic
/// input together; independent mode draws them separately. The semantic
/// treatment is the one `uncond` prescribes (mask, zeroing, null token).
pub fn apply_condition_dropout(rng: &mut Rng, classes: &[usize], dropout: &DropoutConfig, uncond: UncondType) -> DroppedConditioning {
    let treat = uncond.sample_cond();
    let mut unconditional = 0;
    let samples = classes
        .iter()
        .map(|&c| {
            let (drop_label, drop_sem) = match dropout.mode {
                DropoutMode::Joint => {
                    let d = rng.bernoulli(dropout.p_joint);
                    (d, d)
                }
                DropoutMode::Independent => (rng.bernoulli(dropout.p_label), rng.bernoulli(dropout.p_semantic)),
            };
            unconditional += (drop_label && drop_sem) as usize;
            let mut s = SampleCond::class(c);
            if drop_label {
                s.class = None;
            }
            if drop_sem {
                s.mask = treat.mask;
                s.semantic_input = treat.semantic_input;
            }
            s
        })
        .collect();
    DroppedConditioning { samples, unconditional }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub t_mean: f32,
    pub loss_total: f32,
    pub loss_vx: f32,
    pub loss_vd: f32,
    pub loss_aux: f32,
    pub grad_norm_pixel: f32,
    pub grad_norm_semantic: f32,
    pub uncond_fraction: f32,
    pub lr: f32,
}

/// Per-sample tensors precomputed from the dataset.
#[derive(Debug, Clone)]
struct Prepared {
    /// Patch tokens `n × C·p²` per image.
    pixels: Vec<f32>,
    /// Clean semantic stream target `n × D` per image.
    semantics: Vec<f32>,
    /// Normalized teacher features `n × D` per image (auxiliary targets).
    features: Vec<f32>,
    labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub params: ParamStore,
    pub adam: AdamState,
    pub ema: EmaState,
    pub step: u64,
    pub config: TrainConfig,
    pub pipeline: SemanticPipeline,
    pub seed: u64,
    projector: Option<RepaProjector>,
    data: Prepared,
    n_samples: usize,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, dataset: &Dataset, pipeline: SemanticPipeline, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, streams::INIT);
        let (model, mut params) = Model::new(model_config, &mut rng)?;
        let projector = (config.aux_loss == AuxLoss::Repa).then(|| {
            RepaProjector::new(&mut params, &mut rng, model.config().hidden, pipeline.encoder.feature_dim())
        });
        let adam = AdamState::new(params.values());
        let ema = EmaState::new(&config.ema_decays, params.values());
        Self::assemble(model, params, adam, ema, 0, config, dataset, pipeline, seed, projector)
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(model_config: ModelConfig, config: TrainConfig, dataset: &Dataset, pipeline: SemanticPipeline, seed: u64, ckpt: Checkpoint) -> Result<Self> {
        let fresh = Self::new(model_config, config, dataset, pipeline, seed)?;
        if fresh.params.names() != ckpt.params.names()
            || fresh.params.values().iter().zip(ckpt.params.values()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format("checkpoint parameters do not match the configured model".into()));
        }
        if ckpt.ema.decays != fresh.config.ema_decays {
            return Err(Error::Format("checkpoint EMA decays differ from the configuration".into()));
        }
        let Trainer {
            model,
            config,
            pipeline,
            projector,
            data,
            n_samples,
            ..
        } = fresh;
        Ok(Self {
            model,
            params: ckpt.params,
            adam: ckpt.adam,
            ema: ckpt.ema,
            step: ckpt.step,
            config,
            pipeline,
            seed,
            projector,
            data,
            n_samples,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: Model,
        params: ParamStore,
        adam: AdamState,
        ema: EmaState,
        step: u64,
        config: TrainConfig,
        dataset: &Dataset,
        pipeline: SemanticPipeline,
        seed: u64,
        projector: Option<RepaProjector>,
    ) -> Result<Self> {
        let mc = model.config().clone();
        let [c, h, w] = dataset.image_shape();
        if (c, h, w) != (mc.channels, mc.height, mc.width) {
            return Err(Error::Config(format!(
                "dataset images {c}x{h}x{w} do not match model {}x{}x{}",
                mc.channels, mc.height, mc.width
            )));
        }
        if pipeline.encoder.feature_dim() != mc.semantic_dim || pipeline.encoder.spec().patch_size != mc.patch_size {
            return Err(Error::Config("teacher feature dim / patch size must match the model".into()));
        }
        if dataset.len() < config.batch_size {
            return Err(Error::Config(format!(
                "dataset of {} samples is smaller than one batch of {}",
                dataset.len(),
                config.batch_size
            )));
        }
        if config.uncond_type_needs_mask() && !mc.variant.supports_masks() && mc.variant.has_semantic_stream() {
            return Err(Error::Config(format!("{:?} cannot realise {:?}", mc.variant, config.uncond_type)));
        }
        let alpha = pipeline.calibration.alpha;
        let scale = match config.calibration {
            CalibrationMode::RmsScale => alpha,
            _ => 1.0,
        };
        let mut data = Prepared {
            pixels: Vec::with_capacity(dataset.len() * mc.n_tokens() * mc.pixel_dim()),
            semantics: Vec::with_capacity(dataset.len() * mc.n_tokens() * mc.semantic_dim),
            features: Vec::with_capacity(dataset.len() * mc.n_tokens() * mc.semantic_dim),
            labels: dataset.labels.iter().map(|&l| l as usize).collect(),
        };
        for i in 0..dataset.len() {
            let img = dataset.image(i);
            data.pixels.extend(patchify(img.data(), c, h, w, mc.patch_size)?.into_data());
            let f = pipeline.normalized(&img)?;
            data.semantics.extend(f.data().iter().map(|&v| v * scale));
            data.features.extend(f.into_data());
        }
        Ok(Self {
            model,
            params,
            adam,
            ema,
            step,
            config,
            pipeline,
            seed,
            projector,
            data,
            n_samples: dataset.len(),
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.n_samples / self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    pub fn lr_at(&self, step: u64) -> f32 {
        // the update taken at step index k uses the ramp value at k + 1
        warmup_lr(step + 1, self.steps_per_epoch() * self.config.warmup_epochs as u64, self.config.lr)
    }

    /// Semantic-stream time for pixel time `t` under the configured calibration.
    pub fn semantic_time(&self, t: f32) -> f32 {
        match self.config.calibration {
            CalibrationMode::TimeShift => time_shift(self.pipeline.calibration.alpha as f64, t as f64) as f32,
            _ => t,
        }
    }

    /// Alpha for time-shifted sampling, when that mode is active.
    pub fn sampling_shift(&self) -> Option<f32> {
        (self.config.calibration == CalibrationMode::TimeShift).then_some(self.pipeline.calibration.alpha)
    }

    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let k = (step % spe) as usize;
        let mut rng = Rng::derive(self.seed, streams::SHUFFLE + epoch);
        let order = rng.permutation(self.n_samples);
        let bs = self.config.batch_size;
        order[k * bs..(k + 1) * bs].to_vec()
    }

    fn gather(&self, src: &[f32], idx: &[usize], width: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        out
    }

    /// One optimisation step.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let step = self.step;
        let mc = self.model.config().clone();
        let (n, pd, dd) = (mc.n_tokens(), mc.pixel_dim(), mc.semantic_dim);
        let idx = self.batch_indices(step);
        let b = idx.len();
        let x = self.gather(&self.data.pixels, &idx, n * pd);
        let d = self.gather(&self.data.semantics, &idx, n * dd);
        let feats = self.gather(&self.data.features, &idx, n * dd);
        let labels: Vec<usize> = idx.iter().map(|&i| self.data.labels[i]).collect();

        let mut rng = Rng::derive(self.seed, streams::STEP + step);
        let t: Vec<f32> = (0..b).map(|_| self.config.time_sampler.sample(&mut rng)).collect();
        let t_d: Vec<f32> = t.iter().map(|&ti| self.semantic_time(ti)).collect();
        let eps_x = rng.normals(b * n * pd);
        let eps_d = rng.normals(b * n * dd);
        let dropped = apply_condition_dropout(&mut rng, &labels, &self.config.dropout, self.config.uncond_type);

        let interp = |clean: &[f32], noise: &[f32], times: &[f32], width: usize| -> (Vec<f32>, Vec<f32>) {
            let mut z = Vec::with_capacity(clean.len());
            let mut v = Vec::with_capacity(clean.len());
            for (i, (c, e)) in clean.chunks(width).zip(noise.chunks(width)).enumerate() {
                let ti = times[i];
                z.extend(c.iter().zip(e).map(|(&c, &e)| ti * c + (1.0 - ti) * e));
                v.extend(c.iter().zip(e).map(|(&c, &e)| c - e));
            }
            (z, v)
        };
        let (zx, vx) = interp(&x, &eps_x, &t, n * pd);
        let (zd, vd) = interp(&d, &eps_d, &t_d, n * dd);

        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let zx_v = tape.constant(Tensor::raw(vec![b, n, pd], zx));
        let zd_v = tape.constant(Tensor::raw(vec![b, n, dd], zd));
        let mut cond = Conditioning::new(t.clone(), dropped.samples);
        if self.config.calibration == CalibrationMode::TimeShift {
            cond.t_semantic = Some(t_d.clone());
        }
        let out = self.model.forward(&mut tape, &p, zx_v, zd_v, &cond)?;

        let inv = |times: &[f32]| {
            let v = times.iter().map(|&ti| 1.0 / velocity_denominator(ti, self.config.clip)).collect();
            Tensor::raw(vec![b, 1, 1], v)
        };
        let inv_x = tape.constant(inv(&t));
        let inv_d = tape.constant(inv(&t_d));
        let dx = tape.sub(out.pred_pixels, zx_v)?;
        let vx_hat = tape.mul(dx, inv_x)?;
        let dd_v = tape.sub(out.pred_semantics, zd_v)?;
        let vd_hat = tape.mul(dd_v, inv_d)?;
        let vx_t = tape.constant(Tensor::raw(vec![b, n, pd], vx));
        let vd_t = tape.constant(Tensor::raw(vec![b, n, dd], vd));
        let w = &self.config.losses;
        let lambda_d = if mc.variant == Variant::PixelOnly { 0.0 } else { w.lambda_d };
        let (mut total, lx, ld) = v_co_loss(&mut tape, vx_hat, vx_t, vd_hat, vd_t, lambda_d)?;

        let aux = match self.config.aux_loss {
            AuxLoss::None => None,
            AuxLoss::Repa => {
                let proj = self.projector.as_ref().expect("projector built for REPA");
                let target = tape.constant(Tensor::raw(vec![b, n, dd], feats));
                let l = repa_loss(&mut tape, &p, proj, &out.hidden_pixel, mc.repa_block_index, target)?;
                Some(tape.scale(l, w.lambda_repa))
            }
            kind => {
                let u = teacher_features_on_tape(&mut tape, &self.pipeline.encoder, &self.pipeline.stats, out.pred_pixels)?;
                let target = Tensor::raw(vec![b, n * dd], feats);
                Some(match kind {
                    AuxLoss::Perceptual => {
                        let tv = tape.constant(target);
                        let l = perceptual_loss(&mut tape, u, tv)?;
                        tape.scale(l, w.lambda_perc)
                    }
                    kernel => {
                        let u = pool_tokens(&mut tape, u, dd)?;
                        let target = pool_token_rows(&target, dd)?;
                        if kernel == AuxLoss::Drifting {
                            drifting_loss(&mut tape, u, &target, &labels, w)?.0
                        } else {
                            hybrid_loss(&mut tape, u, &target, &labels, w)?.0
                        }
                    }
                })
            }
        };
        if let Some(a) = aux {
            total = tape.add(total, a)?;
        }

        let loss_total = tape.value(total).item();
        let loss_aux = aux.map_or(0.0, |a| tape.value(a).item());
        if !loss_total.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss at step {step}: total={loss_total} vx={} vd={} aux={loss_aux}",
                tape.value(lx).item(),
                tape.value(ld).item()
            )));
        }
        let mut grads = tape.backward(total)?;
        let grads: Vec<Option<Tensor>> = self.params.ids().map(|id| grads.take(p[id])).collect();
        let norm = |prefix: &str| -> f32 {
            let ss: f64 = self
                .params
                .names()
                .iter()
                .zip(&grads)
                .filter(|(name, _)| name.starts_with(prefix))
                .filter_map(|(_, g)| g.as_ref().map(Tensor::sum_sq))
                .sum();
            ss.sqrt() as f32
        };
        let (grad_norm_pixel, grad_norm_semantic) = (norm("pixel."), norm("semantic."));

        let lr = self.lr_at(step);
        let hp = self.config.adam();
        adam_step(self.params.values_mut(), &grads, &mut self.adam, lr, &hp)?;
        self.ema.update(self.params.values());
        self.step += 1;
        Ok(MetricsRecord {
            step,
            t_mean: (t.iter().map(|&v| v as f64).sum::<f64>() / b as f64) as f32,
            loss_total,
            loss_vx: tape.value(lx).item(),
            loss_vd: tape.value(ld).item(),
            loss_aux,
            grad_norm_pixel,
            grad_norm_semantic,
            uncond_fraction: dropped.unconditional as f32 / b as f32,
            lr,
        })
    }

    /// Trains until `until` steps have been taken (capped at the configured
    /// budget), forwarding every record to `sink`.
    pub fn run(&mut self, until: u64, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        let end = until.min(self.total_steps());
        while self.step < end {
            let rec = self.train_step()?;
            sink(&rec)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, config_toml: &str) -> Checkpoint {
        Checkpoint {
            config: config_toml.to_string(),
            teacher_seed: self.pipeline.encoder.spec().seed,
            stats: self.pipeline.stats.clone(),
            calibration: self.pipeline.calibration,
            step: self.step,
            params: self.params.clone(),
            adam: self.adam.clone(),
            ema: self.ema.clone(),
        }
    }

    /// Raw weights, or the EMA shadow at `index` into the configured decays.
    pub fn weights(&self, ema_index: Option<usize>) -> Result<ParamStore> {
        select_weights(&self.params, &self.ema, ema_index)
    }
}

/// Raw parameters or one EMA shadow set, in the same layout.
pub fn select_weights(params: &ParamStore, ema: &EmaState, ema_index: Option<usize>) -> Result<ParamStore> {
    let Some(k) = ema_index else {
        return Ok(params.clone());
    };
    let shadow = ema
        .shadows
        .get(k)
        .ok_or_else(|| Error::Config(format!("EMA index {k} out of {} decays", ema.decays.len())))?;
    let mut out = params.clone();
    out.set_values(shadow.clone())?;
    Ok(out)
}

impl TrainConfig {
    fn uncond_type_needs_mask(&self) -> bool {
        matches!(self.uncond_type, UncondType::BidirectionalMask | UncondType::SemanticToPixelMask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::teacher::TeacherSpec;

    fn tiny() -> (ModelConfig, TrainConfig, Dataset, SemanticPipeline) {
        let spec = DatasetSpec {
            samples_per_class: 8,
            height: 8,
            width: 8,
            ..DatasetSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let pipe = SemanticPipeline::fit(TeacherSpec::default(), &ds).unwrap();
        let mc = ModelConfig {
            depth: 2,
            hidden: 16,
            heads: 2,
            height: 8,
            width: 8,
            repa_block_index: 2,
            time_freq_dim: 8,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            batch_size: 8,
            epochs: 2,
            warmup_epochs: 1,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        (mc, tc, ds, pipe)
    }

    #[test]
    fn dropout_examples() {
        let classes = vec![1usize; 1000];
        let mut rng = Rng::new(0);
        let none = DropoutConfig {
            p_joint: 0.0,
            ..DropoutConfig::default()
        };
        let d = apply_condition_dropout(&mut rng, &classes, &none, UncondType::SemanticToPixelMask);
        assert!(d.samples.iter().all(|s| *s == SampleCond::class(1)));
        let all = DropoutConfig {
            p_joint: 1.0,
            ..DropoutConfig::default()
        };
        let d = apply_condition_dropout(&mut rng, &classes, &all, UncondType::SemanticToPixelMask);
        assert!(d.samples.iter().all(|s| *s == UncondType::SemanticToPixelMask.sample_cond()));
        assert_eq!(d.unconditional, 1000);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let (mc, mut tc, ds, pipe) = tiny();
        tc.lr = 0.0;
        let mut tr = Trainer::new(mc, tc, &ds, pipe, 3).unwrap();
        let before = tr.params.clone();
        let rec = tr.train_step().unwrap();
        assert!(rec.loss_total.is_finite() && rec.loss_total > 0.0);
        assert_eq!(tr.params.values(), before.values());
    }

    #[test]
    fn every_aux_loss_trains() {
        for aux in [AuxLoss::None, AuxLoss::Repa, AuxLoss::Perceptual, AuxLoss::Drifting, AuxLoss::Hybrid] {
            let (mc, mut tc, ds, pipe) = tiny();
            tc.aux_loss = aux;
            let mut tr = Trainer::new(mc, tc, &ds, pipe, 1).unwrap();
            let rec = tr.train_step().unwrap();
            assert!(rec.loss_total.is_finite(), "{aux:?}");
            assert_eq!(rec.loss_aux == 0.0, aux == AuxLoss::None, "{aux:?}");
        }
    }

    #[test]
    fn resume_is_bitwise() {
        let (mc, tc, ds, pipe) = tiny();
        let mut a = Trainer::new(mc.clone(), tc.clone(), &ds, pipe.clone(), 5).unwrap();
        a.run(5, |_| Ok(())).unwrap();
        let mut buf = Vec::new();
        write_entries(&mut buf, &a.checkpoint("").entries()).unwrap();
        let ck = Checkpoint::from_entries(read_entries(&mut buf.as_slice()).unwrap()).unwrap();
        let mut b = Trainer::resume(mc, tc, &ds, pipe, 5, ck).unwrap();
        a.run(8, |_| Ok(())).unwrap();
        b.run(8, |_| Ok(())).unwrap();
        assert_eq!(a.params.values(), b.params.values());
        assert_eq!(a.ema, b.ema);
    }

    #[test]
    fn time_shift_mode_trains() {
        let (mc, mut tc, ds, pipe) = tiny();
        tc.calibration = CalibrationMode::TimeShift;
        let mut tr = Trainer::new(mc, tc, &ds, pipe, 2).unwrap();
        assert!(tr.train_step().unwrap().loss_total.is_finite());
        assert!(tr.sampling_shift().is_some());
    }
}
