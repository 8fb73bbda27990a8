//! The joint pixel/semantic denoiser.
//!
//! Inputs are patch tokens: noisy pixels `[B, n, C·p²]` and noisy semantic
//! features `[B, n, D]`. The model predicts the clean version of both.

mod config;
mod layers;
mod mask;
mod params;

pub use config::{ModelConfig, Variant};
pub use layers::{sincos_2d, timestep_features, FinalLayer, Linear, Mlp, StreamBlock};
pub use mask::{build_mask, AttentionMaskSpec, MaskType};
pub use params::{Bound, ParamId, ParamStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Rng, Tape, Tensor, Var};
pub(crate) use layers::Builder;
use layers::joint_block;

/// What the semantic stream receives as input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticInput {
    #[default]
    Features,
    Zero,
    /// Every semantic token replaced by one learned vector.
    NullToken,
}

/// Per-sample conditioning flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleCond {
    /// `None` selects the learned null class embedding.
    pub class: Option<usize>,
    pub mask: MaskType,
    pub semantic_input: SemanticInput,
}

impl SampleCond {
    pub fn class(class: usize) -> Self {
        Self {
            class: Some(class),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub t: Vec<f32>,
    /// Time seen by the semantic stream when it differs from `t`.
    pub t_semantic: Option<Vec<f32>>,
    pub samples: Vec<SampleCond>,
}

impl Conditioning {
    pub fn new(t: Vec<f32>, samples: Vec<SampleCond>) -> Self {
        Self {
            t,
            t_semantic: None,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pred_pixels: Var,
    pub pred_semantics: Var,
    /// Pixel-stream activations after every block, `[B, n, hidden]`.
    pub hidden_pixel: Vec<Var>,
    /// Sequence length inside the shared blocks of single-stream variants.
    pub shared_tokens: Option<usize>,
}

#[derive(Debug, Clone)]
enum Fusion {
    /// Sum of pixel tokens and projected semantic tokens.
    Add(Linear),
    /// Channel concatenation `[B, n, 2h]` projected back to `h`.
    Channel(Linear),
    Token,
}

#[derive(Debug, Clone)]
enum Layout {
    Dual(Vec<(StreamBlock, StreamBlock)>),
    PixelOnly(Vec<StreamBlock>),
    Single {
        pixel_private: Vec<StreamBlock>,
        semantic_private: Vec<StreamBlock>,
        fusion: Fusion,
        shared: Vec<StreamBlock>,
    },
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pos: Tensor,
    pixel_embed: Vec<Linear>,
    semantic_embed: Option<Linear>,
    null_token: Option<ParamId>,
    time_fc1: Linear,
    time_fc2: Linear,
    class_table: ParamId,
    layout: Layout,
    pixel_head: FinalLayer,
    semantic_head: Option<FinalLayer>,
}

impl Model {
    /// Builds the architecture and registers freshly initialised parameters.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng,
        };
        let h = config.hidden;
        let (gh, gw) = config.grid();
        let pixel_embed = if config.bottleneck > 0 {
            vec![
                Linear::new(&mut b, "pixel.embed.down", config.pixel_dim(), config.bottleneck, false, None),
                Linear::new(&mut b, "pixel.embed.up", config.bottleneck, h, true, None),
            ]
        } else {
            vec![Linear::new(&mut b, "pixel.embed", config.pixel_dim(), h, true, None)]
        };
        let semantic = config.variant.has_semantic_stream();
        let semantic_embed =
            semantic.then(|| Linear::new(&mut b, "semantic.embed", config.semantic_dim, h, true, None));
        let null_token = semantic.then(|| b.normal("semantic.null_token".into(), &[1, 1, config.semantic_dim], 1.0));
        let time_fc1 = Linear::new(&mut b, "cond.time.fc1", config.time_freq_dim, h, true, None);
        let time_fc2 = Linear::new(&mut b, "cond.time.fc2", h, h, true, None);
        let class_table = b.normal("cond.class_embed".into(), &[config.n_classes + 1, h], 1.0);
        let block = |b: &mut Builder, name: String| StreamBlock::new(b, &name, h, config.mlp_ratio);
        let layout = match config.variant {
            Variant::DualStream => Layout::Dual(
                (0..config.depth)
                    .map(|i| {
                        (
                            block(&mut b, format!("pixel.blocks.{i}")),
                            block(&mut b, format!("semantic.blocks.{i}")),
                        )
                    })
                    .collect(),
            ),
            Variant::PixelOnly => {
                Layout::PixelOnly((0..config.depth).map(|i| block(&mut b, format!("pixel.blocks.{i}"))).collect())
            }
            v => {
                let k = config.feature_specific_blocks;
                let pixel_private = (0..k).map(|i| block(&mut b, format!("pixel.blocks.{i}"))).collect();
                let semantic_private = (0..k).map(|i| block(&mut b, format!("semantic.blocks.{i}"))).collect();
                let fusion = match v {
                    Variant::SingleDirectAdd => Fusion::Add(Linear::new(&mut b, "semantic.fuse", h, h, false, None)),
                    Variant::SingleChannelConcat => {
                        Fusion::Channel(Linear::new(&mut b, "shared.fuse", 2 * h, h, true, None))
                    }
                    _ => Fusion::Token,
                };
                let shared = (k..config.depth).map(|i| block(&mut b, format!("shared.blocks.{i}"))).collect();
                Layout::Single {
                    pixel_private,
                    semantic_private,
                    fusion,
                    shared,
                }
            }
        };
        let pixel_head = FinalLayer::new(&mut b, "pixel.head", h, config.pixel_dim());
        let semantic_head = semantic.then(|| FinalLayer::new(&mut b, "semantic.head", h, config.semantic_dim));
        let model = Self {
            pos: sincos_2d(gh, gw, h),
            config,
            pixel_embed,
            semantic_embed,
            null_token,
            time_fc1,
            time_fc2,
            class_table,
            layout,
            pixel_head,
            semantic_head,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Conditioning vectors `[B, hidden]`: time MLP of sinusoidal features
    /// plus the class (or null) embedding.
    pub fn embed_conditioning(&self, tape: &mut Tape, p: &Bound, t: &[f32], classes: &[Option<usize>]) -> Result<Var> {
        if t.len() != classes.len() {
            return Err(Error::shape("embed_conditioning", format!("{} times, {} classes", t.len(), classes.len())));
        }
        let k = self.config.n_classes;
        let ids = classes
            .iter()
            .map(|c| match *c {
                Some(c) if c >= k => Err(Error::Invalid(format!("class id {c} out of range {k}"))),
                Some(c) => Ok(c),
                None => Ok(k),
            })
            .collect::<Result<Vec<_>>>()?;
        let f = tape.constant(timestep_features(t, self.config.time_freq_dim));
        let e = self.time_fc1.forward(tape, p, f)?;
        let e = tape.silu(e);
        let e = self.time_fc2.forward(tape, p, e)?;
        let y = tape.embedding(p[self.class_table], &ids)?;
        tape.add(e, y)
    }

    /// Runs the denoiser on `z_x: [B, n, C·p²]` and `z_d: [B, n, D]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z_x: Var, z_d: Var, cond: &Conditioning) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (n, h) = (cfg.n_tokens(), cfg.hidden);
        let b = tape.shape(z_x)[0];
        let want_x = [b, n, cfg.pixel_dim()];
        let want_d = [b, n, cfg.semantic_dim];
        if tape.shape(z_x) != want_x || tape.shape(z_d) != want_d {
            return Err(Error::shape(
                "forward",
                format!("inputs {:?}, {:?}; expected {want_x:?}, {want_d:?}", tape.shape(z_x), tape.shape(z_d)),
            ));
        }
        if cond.len() != b || cond.t.len() != b || cond.t_semantic.as_ref().is_some_and(|t| t.len() != b) {
            return Err(Error::shape("forward", format!("conditioning for {} samples, batch {b}", cond.len())));
        }
        let masks: Vec<MaskType> = cond.samples.iter().map(|s| s.mask).collect();
        let masked = masks.iter().any(|&m| m != MaskType::None);
        // the pixel-only variant has nothing to mask and ignores semantic flags
        if masked && !cfg.variant.supports_masks() && cfg.variant.has_semantic_stream() {
            return Err(Error::Config(format!("{:?} has no separate stream tokens to mask", cfg.variant)));
        }

        let classes: Vec<Option<usize>> = cond.samples.iter().map(|s| s.class).collect();
        let c_x = self.embed_conditioning(tape, p, &cond.t, &classes)?;
        let c_d = match &cond.t_semantic {
            Some(ts) => self.embed_conditioning(tape, p, ts, &classes)?,
            None => c_x,
        };
        let a_x = tape.silu(c_x);
        let a_d = if c_d == c_x { a_x } else { tape.silu(c_d) };
        let pos = tape.constant(self.pos.clone());

        let mut hx = z_x;
        for lin in &self.pixel_embed {
            hx = lin.forward(tape, p, hx)?;
        }
        hx = tape.add(hx, pos)?;

        let Some(sem_embed) = &self.semantic_embed else {
            let Layout::PixelOnly(blocks) = &self.layout else { unreachable!() };
            let mut hidden_pixel = Vec::with_capacity(blocks.len());
            for blk in blocks {
                hx = joint_block(tape, p, &[blk], &[hx], &[a_x], cfg.heads, None)?[0];
                hidden_pixel.push(hx);
            }
            let pred_pixels = self.pixel_head.forward(tape, p, hx, a_x)?;
            let pred_semantics = tape.constant(Tensor::zeros(&want_d));
            return Ok(ForwardOutput {
                pred_pixels,
                pred_semantics,
                hidden_pixel,
                shared_tokens: None,
            });
        };

        let zd = self.semantic_input(tape, p, z_d, &cond.samples)?;
        let mut hd = sem_embed.forward(tape, p, zd)?;
        hd = tape.add(hd, pos)?;
        let sem_head = self.semantic_head.as_ref().expect("semantic head exists with semantic stream");
        let mut hidden_pixel = Vec::with_capacity(cfg.depth);

        match &self.layout {
            Layout::Dual(blocks) => {
                let mask = mask::batch_mask(&masks, cfg.heads, n, n)?;
                for (bx, bd) in blocks {
                    let out = joint_block(tape, p, &[bx, bd], &[hx, hd], &[a_x, a_d], cfg.heads, mask.as_ref())?;
                    (hx, hd) = (out[0], out[1]);
                    hidden_pixel.push(hx);
                }
                Ok(ForwardOutput {
                    pred_pixels: self.pixel_head.forward(tape, p, hx, a_x)?,
                    pred_semantics: sem_head.forward(tape, p, hd, a_d)?,
                    hidden_pixel,
                    shared_tokens: None,
                })
            }
            Layout::Single {
                pixel_private,
                semantic_private,
                fusion,
                shared,
            } => {
                for (bx, bd) in pixel_private.iter().zip(semantic_private) {
                    hx = joint_block(tape, p, &[bx], &[hx], &[a_x], cfg.heads, None)?[0];
                    hd = joint_block(tape, p, &[bd], &[hd], &[a_d], cfg.heads, None)?[0];
                    hidden_pixel.push(hx);
                }
                let (mut fused, mask) = match fusion {
                    Fusion::Add(proj) => {
                        let pd = proj.forward(tape, p, hd)?;
                        (tape.add(hx, pd)?, None)
                    }
                    Fusion::Channel(proj) => {
                        let cat = tape.concat(&[hx, hd], 2)?;
                        (proj.forward(tape, p, cat)?, None)
                    }
                    Fusion::Token => (tape.concat(&[hx, hd], 1)?, mask::batch_mask(&masks, cfg.heads, n, n)?),
                };
                let shared_tokens = tape.shape(fused)[1];
                let token = matches!(fusion, Fusion::Token);
                for blk in shared {
                    fused = joint_block(tape, p, &[blk], &[fused], &[a_x], cfg.heads, mask.as_ref())?[0];
                    let px = if token { tape.slice(fused, 1, 0, n)? } else { fused };
                    hidden_pixel.push(px);
                }
                let (fx, fd) = if token {
                    (tape.slice(fused, 1, 0, n)?, tape.slice(fused, 1, n, 2 * n)?)
                } else {
                    (fused, fused)
                };
                debug_assert_eq!(tape.shape(fx), [b, n, h]);
                Ok(ForwardOutput {
                    pred_pixels: self.pixel_head.forward(tape, p, fx, a_x)?,
                    pred_semantics: sem_head.forward(tape, p, fd, a_d)?,
                    hidden_pixel,
                    shared_tokens: Some(shared_tokens),
                })
            }
            Layout::PixelOnly(_) => unreachable!("pixel-only layout has no semantic embed"),
        }
    }

    /// Applies per-sample Zero / NullToken replacement of the semantic input.
    fn semantic_input(&self, tape: &mut Tape, p: &Bound, z_d: Var, samples: &[SampleCond]) -> Result<Var> {
        if samples.iter().all(|s| s.semantic_input == SemanticInput::Features) {
            return Ok(z_d);
        }
        let b = samples.len();
        let keep: Vec<f32> = samples
            .iter()
            .map(|s| (s.semantic_input == SemanticInput::Features) as u8 as f32)
            .collect();
        let keep_v = tape.constant(Tensor::raw(vec![b, 1, 1], keep));
        let mut out = tape.mul(z_d, keep_v)?;
        if samples.iter().any(|s| s.semantic_input == SemanticInput::NullToken) {
            let null: Vec<f32> = samples
                .iter()
                .map(|s| (s.semantic_input == SemanticInput::NullToken) as u8 as f32)
                .collect();
            let null_v = tape.constant(Tensor::raw(vec![b, 1, 1], null));
            let token = p[self.null_token.expect("null token exists with semantic stream")];
            let placed = tape.mul(null_v, token)?;
            out = tape.add(out, placed)?;
        }
        Ok(out)
    }

    /// Gradient-free forward returning `(x̂, d̂)` token tensors.
    pub fn predict(&self, params: &ParamStore, z_x: &Tensor, z_d: &Tensor, cond: &Conditioning) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let zx = tape.constant(z_x.clone());
        let zd = tape.constant(z_d.clone());
        let out = self.forward(&mut tape, &p, zx, zd, cond)?;
        Ok((tape.value(out.pred_pixels).clone(), tape.value(out.pred_semantics).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            depth: 2,
            hidden: 16,
            heads: 2,
            height: 8,
            width: 8,
            semantic_dim: 4,
            feature_specific_blocks: 1,
            repa_block_index: 2,
            time_freq_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn inputs(cfg: &ModelConfig, b: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        let n = cfg.n_tokens();
        (
            Tensor::randn(&[b, n, cfg.pixel_dim()], 1.0, &mut rng),
            Tensor::randn(&[b, n, cfg.semantic_dim], 1.0, &mut rng),
        )
    }

    fn cond(b: usize, mask: MaskType, class: Option<usize>) -> Conditioning {
        let s = SampleCond {
            class,
            mask,
            semantic_input: SemanticInput::Features,
        };
        Conditioning::new((0..b).map(|i| 0.2 + 0.1 * i as f32).collect(), vec![s; b])
    }

    #[test]
    fn output_shapes_match_inputs() {
        for v in [
            Variant::DualStream,
            Variant::SingleDirectAdd,
            Variant::SingleChannelConcat,
            Variant::SingleTokenConcat,
            Variant::PixelOnly,
        ] {
            let cfg = small(v);
            let (m, ps) = Model::new(cfg.clone(), &mut Rng::new(0)).unwrap();
            let (x, d) = inputs(&cfg, 3, 1);
            let (px, pd) = m.predict(&ps, &x, &d, &cond(3, MaskType::None, Some(1))).unwrap();
            assert_eq!(px.shape(), x.shape(), "{v:?}");
            assert_eq!(pd.shape(), d.shape(), "{v:?}");
        }
    }

    #[test]
    fn semantic_to_pixel_mask_makes_pixels_blind_to_semantics() {
        for v in [Variant::DualStream, Variant::SingleTokenConcat] {
            let cfg = small(v);
            let (m, ps) = Model::new(cfg.clone(), &mut Rng::new(0)).unwrap();
            let (x, d1) = inputs(&cfg, 2, 1);
            let (_, d2) = inputs(&cfg, 2, 2);
            let c = cond(2, MaskType::SemanticToPixel, None);
            let (a, _) = m.predict(&ps, &x, &d1, &c).unwrap();
            let (b, _) = m.predict(&ps, &x, &d2, &c).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-6, "{v:?}");
            let c = cond(2, MaskType::None, None);
            let (a, _) = m.predict(&ps, &x, &d1, &c).unwrap();
            let (b, _) = m.predict(&ps, &x, &d2, &c).unwrap();
            assert!(a.max_abs_diff(&b) > 1e-6, "{v:?}");
        }
    }

    #[test]
    fn depth_zero_pixels_ignore_semantics() {
        let cfg = ModelConfig {
            depth: 0,
            ..small(Variant::DualStream)
        };
        let (m, ps) = Model::new(cfg.clone(), &mut Rng::new(0)).unwrap();
        let (x, d1) = inputs(&cfg, 2, 1);
        let (_, d2) = inputs(&cfg, 2, 2);
        let c = cond(2, MaskType::None, Some(0));
        assert_eq!(m.predict(&ps, &x, &d1, &c).unwrap().0, m.predict(&ps, &x, &d2, &c).unwrap().0);
    }

    #[test]
    fn direct_add_with_zero_projection_is_pixel_only() {
        let cfg = small(Variant::SingleDirectAdd);
        let (m, mut ps) = Model::new(cfg.clone(), &mut Rng::new(0)).unwrap();
        let id = ps.id("semantic.fuse.weight").unwrap();
        ps.get_mut(id).data_mut().fill(0.0);
        let (x, d1) = inputs(&cfg, 2, 1);
        let (_, d2) = inputs(&cfg, 2, 2);
        let c = cond(2, MaskType::None, Some(0));
        assert_eq!(m.predict(&ps, &x, &d1, &c).unwrap().0, m.predict(&ps, &x, &d2, &c).unwrap().0);
    }

    #[test]
    fn fusion_widths() {
        let cfg = small(Variant::SingleChannelConcat);
        let (_, ps) = Model::new(cfg.clone(), &mut Rng::new(0)).unwrap();
        assert_eq!(ps.by_name("shared.fuse.weight").unwrap().shape(), &[2 * cfg.hidden, cfg.hidden]);

        let cfg = small(Variant::SingleTokenConcat);
        let (m, ps) = Model::new(cfg.clone(), &mut Rng::new(0)).unwrap();
        let (x, d) = inputs(&cfg, 1, 1);
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false);
        let (xv, dv) = (tape.constant(x), tape.constant(d));
        let out = m.forward(&mut tape, &p, xv, dv, &cond(1, MaskType::None, Some(0))).unwrap();
        assert_eq!(out.shared_tokens, Some(2 * cfg.n_tokens()));
    }

    #[test]
    fn masks_rejected_for_fused_variants() {
        let cfg = small(Variant::SingleDirectAdd);
        let (m, ps) = Model::new(cfg.clone(), &mut Rng::new(0)).unwrap();
        let (x, d) = inputs(&cfg, 1, 1);
        assert!(m.predict(&ps, &x, &d, &cond(1, MaskType::SemanticToPixel, None)).is_err());
    }

    #[test]
    fn dual_stream_has_more_parameters_than_token_concat() {
        let dual = small(Variant::DualStream);
        let tok = ModelConfig {
            feature_specific_blocks: 0,
            ..small(Variant::SingleTokenConcat)
        };
        let (_, a) = Model::new(dual, &mut Rng::new(0)).unwrap();
        let (_, b) = Model::new(tok, &mut Rng::new(0)).unwrap();
        assert!(a.num_elements() > b.num_elements());
    }

    #[test]
    fn conditioning_embedding_properties() {
        let cfg = small(Variant::DualStream);
        let (m, ps) = Model::new(cfg, &mut Rng::new(0)).unwrap();
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false);
        let e = m
            .embed_conditioning(&mut tape, &p, &[0.1, 0.9, 0.1, 0.5, 0.5], &[Some(1), Some(1), Some(1), None, None])
            .unwrap();
        let v = tape.value(e);
        assert_ne!(v.row(0), v.row(1));
        assert_eq!(v.row(0), v.row(2));
        assert_eq!(v.row(3), v.row(4));
        assert!(m.embed_conditioning(&mut tape, &p, &[0.1], &[Some(4)]).is_err());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for v in [
            Variant::DualStream,
            Variant::SingleDirectAdd,
            Variant::SingleChannelConcat,
            Variant::SingleTokenConcat,
            Variant::PixelOnly,
        ] {
            let cfg = small(v);
            let (m, ps) = Model::new(cfg.clone(), &mut Rng::new(0)).unwrap();
            let (x, d) = inputs(&cfg, 3, 4);
            let mut c = cond(3, MaskType::None, Some(2));
            c.samples[1].class = None;
            c.samples[1].semantic_input = SemanticInput::NullToken;
            if v.supports_masks() {
                c.samples[2].mask = MaskType::SemanticToPixel;
            }
            let mut tape = Tape::new();
            let p = ps.bind(&mut tape, true);
            let (xv, dv) = (tape.constant(x), tape.constant(d));
            let out = m.forward(&mut tape, &p, xv, dv, &c).unwrap();
            let lx = tape.mean(out.pred_pixels);
            let sq = tape.mul(out.pred_semantics, out.pred_semantics).unwrap();
            let ld = tape.mean(sq);
            let sq = tape.mul(out.pred_pixels, out.pred_pixels).unwrap();
            let lx2 = tape.mean(sq);
            let l = tape.add(lx, ld).unwrap();
            let l = tape.add(l, lx2).unwrap();
            let g = tape.backward(l).unwrap();
            for id in ps.ids() {
                let gr = g.get(p[id]).unwrap_or_else(|| panic!("{v:?}: no grad for {}", ps.name(id)));
                assert!(gr.data().iter().any(|&x| x != 0.0), "{v:?}: zero grad for {}", ps.name(id));
            }
        }
    }
}
