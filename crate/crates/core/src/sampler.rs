//! Heun integration of the joint velocity field with classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Conditioning, MaskType, Model, ParamStore, SampleCond, SemanticInput};
use crate::rng::streams;
use crate::schedule::{clean_to_velocity, time_shift, DEFAULT_CLIP};
use crate::teacher::unpatchify;
use crate::{Rng, Tensor};

/// How the unconditional prediction is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncondType {
    ZeroSemantic,
    NullToken,
    BidirectionalMask,
    #[default]
    SemanticToPixelMask,
}

impl UncondType {
    /// Null class plus this type's semantic treatment.
    pub fn sample_cond(self) -> SampleCond {
        let (mask, semantic_input) = match self {
            UncondType::ZeroSemantic => (MaskType::None, SemanticInput::Zero),
            UncondType::NullToken => (MaskType::None, SemanticInput::NullToken),
            UncondType::BidirectionalMask => (MaskType::Bidirectional, SemanticInput::Features),
            UncondType::SemanticToPixelMask => (MaskType::SemanticToPixel, SemanticInput::Features),
        };
        SampleCond {
            class: None,
            mask,
            semantic_input,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f32,
    /// Guidance applies only for `t` in `[lo, hi]` when set.
    pub cfg_interval: Option<[f32; 2]>,
    pub uncond_type: UncondType,
    pub clip: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 1.0,
            cfg_interval: None,
            uncond_type: UncondType::default(),
            clip: DEFAULT_CLIP,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("cfg scale {} must be >= 0", self.cfg_scale)));
        }
        if let Some([lo, hi]) = self.cfg_interval {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(Error::Config(format!("cfg interval [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1")));
            }
        }
        if !(self.clip > 0.0 && self.clip <= 1.0) {
            return Err(Error::Config(format!("velocity clip {} outside (0, 1]", self.clip)));
        }
        Ok(())
    }

    pub fn guides_at(&self, t: f32) -> bool {
        self.cfg_scale != 1.0 && self.cfg_interval.is_none_or(|[lo, hi]| (lo..=hi).contains(&t))
    }
}

/// `v_uncond + s·(v_cond − v_uncond)`.
pub fn guidance_combine(v_cond: &Tensor, v_uncond: &Tensor, s: f32) -> Result<Tensor> {
    v_cond.zip_map(v_uncond, |c, u| u + s * (c - u))
}

/// Velocity of both streams at pixel time `t` and semantic time `t_d`.
pub trait JointField {
    fn velocity(&self, z_x: &Tensor, z_d: &Tensor, t: f32, t_d: f32) -> Result<(Tensor, Tensor)>;
}

impl<F> JointField for F
where
    F: Fn(&Tensor, &Tensor, f32, f32) -> Result<(Tensor, Tensor)>,
{
    fn velocity(&self, z_x: &Tensor, z_d: &Tensor, t: f32, t_d: f32) -> Result<(Tensor, Tensor)> {
        self(z_x, z_d, t, t_d)
    }
}

/// `steps + 1` points linear in `[0, 1]`.
pub fn linear_grid(steps: usize) -> Vec<f32> {
    (0..=steps).map(|k| (k as f64 / steps as f64) as f32).collect()
}

fn axpy(z: &Tensor, h: f32, v: &Tensor) -> Result<Tensor> {
    z.zip_map(v, |a, b| a + h * b)
}

fn check_finite(z: &Tensor, what: &str, t: f32) -> Result<()> {
    if z.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} state became non-finite at t = {t}")))
    }
}

/// Integrates from `grid[0]` to its last point. The semantic stream steps
/// along `grid_d` (same length) when given, e.g. the time-shifted grid.
/// Steps ending at `t = 1` use plain Euler; all others use Heun.
pub fn heun_integrate(
    field: &impl JointField,
    z_x: Tensor,
    z_d: Tensor,
    grid: &[f32],
    grid_d: Option<&[f32]>,
) -> Result<(Tensor, Tensor)> {
    let grid_d = grid_d.unwrap_or(grid);
    if grid.len() < 2 || grid_d.len() != grid.len() {
        return Err(Error::Invalid(format!("bad time grids of {} and {} points", grid.len(), grid_d.len())));
    }
    let (mut zx, mut zd) = (z_x, z_d);
    for k in 0..grid.len() - 1 {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let (s0, s1) = (grid_d[k], grid_d[k + 1]);
        let (hx, hd) = (t1 - t0, s1 - s0);
        let (vx0, vd0) = field.velocity(&zx, &zd, t0, s0)?;
        let px = axpy(&zx, hx, &vx0)?;
        let pd = axpy(&zd, hd, &vd0)?;
        if t1 >= 1.0 {
            (zx, zd) = (px, pd);
        } else {
            let (vx1, vd1) = field.velocity(&px, &pd, t1, s1)?;
            zx = zx.zip_map(&vx0, |z, a| z + 0.5 * hx * a)?.zip_map(&vx1, |z, b| z + 0.5 * hx * b)?;
            zd = zd.zip_map(&vd0, |z, a| z + 0.5 * hd * a)?.zip_map(&vd1, |z, b| z + 0.5 * hd * b)?;
        }
        check_finite(&zx, "pixel", t1)?;
        check_finite(&zd, "semantic", t1)?;
    }
    Ok((zx, zd))
}

/// Guided velocities plus the per-stream components they came from.
#[derive(Debug, Clone)]
pub struct GuidedVelocity {
    pub vx: Tensor,
    pub vd: Tensor,
    pub cond: (Tensor, Tensor),
    /// Absent when the unconditional pass was skipped.
    pub uncond: Option<(Tensor, Tensor)>,
}

/// A trained model bound to its parameters and sampling settings.
pub struct ModelField<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
    pub classes: &'a [Option<usize>],
    pub config: &'a SamplerConfig,
    /// Whether the semantic stream runs on its own (shifted) time.
    pub shifted: bool,
}

impl ModelField<'_> {
    fn velocities(&self, z_x: &Tensor, z_d: &Tensor, t: f32, t_d: f32, samples: Vec<SampleCond>) -> Result<(Tensor, Tensor)> {
        let b = samples.len();
        let mut cond = Conditioning::new(vec![t; b], samples);
        if self.shifted {
            cond.t_semantic = Some(vec![t_d; b]);
        }
        let (x_hat, d_hat) = self.model.predict(self.params, z_x, z_d, &cond)?;
        Ok((
            clean_to_velocity(&x_hat, z_x, t, self.config.clip)?,
            clean_to_velocity(&d_hat, z_d, t_d, self.config.clip)?,
        ))
    }

    pub fn predict_velocity(&self, z_x: &Tensor, z_d: &Tensor, t: f32, t_d: f32) -> Result<GuidedVelocity> {
        let cond_samples = self
            .classes
            .iter()
            .map(|&class| SampleCond {
                class,
                ..SampleCond::default()
            })
            .collect();
        let cond = self.velocities(z_x, z_d, t, t_d, cond_samples)?;
        if !self.config.guides_at(t) {
            return Ok(GuidedVelocity {
                vx: cond.0.clone(),
                vd: cond.1.clone(),
                cond,
                uncond: None,
            });
        }
        let un = vec![self.config.uncond_type.sample_cond(); self.classes.len()];
        let uncond = self.velocities(z_x, z_d, t, t_d, un)?;
        let s = self.config.cfg_scale;
        Ok(GuidedVelocity {
            vx: guidance_combine(&cond.0, &uncond.0, s)?,
            vd: guidance_combine(&cond.1, &uncond.1, s)?,
            cond,
            uncond: Some(uncond),
        })
    }
}

impl JointField for ModelField<'_> {
    fn velocity(&self, z_x: &Tensor, z_d: &Tensor, t: f32, t_d: f32) -> Result<(Tensor, Tensor)> {
        let g = self.predict_velocity(z_x, z_d, t, t_d)?;
        Ok((g.vx, g.vd))
    }
}

/// Generated images `[N, C, H, W]` and terminal semantic tokens `[N, n, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub images: Tensor,
    pub semantics: Tensor,
    pub classes: Vec<Option<usize>>,
}

/// Samples one image per entry of `classes`. Sample `i` draws its starting
/// noise from its own stream, so results do not depend on `chunk`.
pub fn generate(
    model: &Model,
    params: &ParamStore,
    classes: &[Option<usize>],
    config: &SamplerConfig,
    time_shift_alpha: Option<f32>,
    seed: u64,
    chunk: usize,
) -> Result<SampleSet> {
    config.validate()?;
    if classes.is_empty() || chunk == 0 {
        return Err(Error::Invalid("nothing to sample".into()));
    }
    let mc = model.config();
    let (n, pd, dd) = (mc.n_tokens(), mc.pixel_dim(), mc.semantic_dim);
    let grid = linear_grid(config.steps);
    let grid_d: Option<Vec<f32>> =
        time_shift_alpha.map(|a| grid.iter().map(|&t| time_shift(a as f64, t as f64) as f32).collect());
    let mut images = Vec::with_capacity(classes.len() * n * pd);
    let mut semantics = Vec::with_capacity(classes.len() * n * dd);
    for (ci, cls) in classes.chunks(chunk).enumerate() {
        let b = cls.len();
        let (mut x0, mut d0) = (Vec::with_capacity(b * n * pd), Vec::with_capacity(b * n * dd));
        for i in 0..b {
            let mut rng = Rng::derive(seed, streams::SAMPLE + (ci * chunk + i) as u64);
            x0.extend(rng.normals(n * pd));
            d0.extend(rng.normals(n * dd));
        }
        let field = ModelField {
            model,
            params,
            classes: cls,
            config,
            shifted: grid_d.is_some(),
        };
        let (zx, zd) = heun_integrate(
            &field,
            Tensor::raw(vec![b, n, pd], x0),
            Tensor::raw(vec![b, n, dd], d0),
            &grid,
            grid_d.as_deref(),
        )?;
        for i in 0..b {
            images.extend(unpatchify(zx.row(i), mc.channels, mc.height, mc.width, mc.patch_size));
        }
        semantics.extend(zd.into_data());
    }
    Ok(SampleSet {
        images: Tensor::raw(vec![classes.len(), mc.channels, mc.height, mc.width], images),
        semantics: Tensor::raw(vec![classes.len(), n, dd], semantics),
        classes: classes.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn guidance_examples() {
        let (c, u) = (t(&[3.0, -1.0]), t(&[1.0, 2.0]));
        assert_eq!(guidance_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(guidance_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(guidance_combine(&t(&[3.0]), &t(&[1.0]), 2.0).unwrap().item(), 5.0);
    }

    #[test]
    fn constant_field_single_step_is_exact() {
        let c = t(&[0.7, -1.3]);
        let d = t(&[2.0]);
        let f = |_: &Tensor, _: &Tensor, _: f32, _: f32| Ok((c.clone(), d.clone()));
        let (x, y) = heun_integrate(&f, t(&[1.0, 2.0]), t(&[0.5]), &linear_grid(1), None).unwrap();
        // z0 + c up to one rounding of the sum
        assert!(x.max_abs_diff(&t(&[1.7, 0.7])) <= 1e-6);
        assert_eq!(y, t(&[2.5]));
    }

    fn decay_error(steps: usize) -> f64 {
        let f = |x: &Tensor, d: &Tensor, _: f32, _: f32| Ok((x.scale(-1.0), d.scale(-1.0)));
        let (x, _) = heun_integrate(&f, t(&[1.0]), t(&[1.0]), &linear_grid(steps), None).unwrap();
        ((x.item() as f64 - (-1f64).exp()) / (-1f64).exp()).abs()
    }

    #[test]
    fn decay_field_accuracy_and_order() {
        assert!(decay_error(50) < 1e-3);
        let order = (decay_error(10) / decay_error(20)).log2();
        assert!((1.8..=2.2).contains(&order), "order {order}");
    }

    #[test]
    fn divergence_is_reported() {
        let f = |x: &Tensor, d: &Tensor, _: f32, _: f32| Ok((x.map(|_| f32::INFINITY), d.clone()));
        let r = heun_integrate(&f, t(&[1.0]), t(&[1.0]), &linear_grid(4), None);
        assert!(matches!(r, Err(Error::Divergence(_))));
    }

    #[test]
    fn interval_gating() {
        let cfg = SamplerConfig {
            cfg_scale: 2.0,
            cfg_interval: Some([0.1, 1.0]),
            ..SamplerConfig::default()
        };
        assert!(!cfg.guides_at(0.05));
        assert!(cfg.guides_at(0.5));
        assert!(!SamplerConfig::default().guides_at(0.5));
        assert!(SamplerConfig {
            cfg_interval: Some([0.5, 0.5]),
            ..cfg
        }
        .validate()
        .is_err());
    }
}
