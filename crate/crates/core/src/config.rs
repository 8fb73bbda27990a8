//! Declarative experiment description read from TOML.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::eval::MIN_EVAL_SAMPLES;
use crate::model::{ModelConfig, Variant};
use crate::sampler::{SamplerConfig, UncondType};
use crate::teacher::TeacherSpec;
use crate::trainer::TrainConfig;

/// Version string recorded next to every output.
pub const CODE_VERSION: &str = concat!("vco ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated samples per class for each CFG scale.
    pub samples_per_class: usize,
    pub cfg_sweep: Vec<f32>,
    /// EMA shadow to evaluate; raw weights when unset.
    pub ema_index: Option<usize>,
    /// Added to the dataset seed to draw the held-out reference set.
    pub heldout_seed_offset: u64,
    /// Samples integrated together per sampler call.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 64,
            cfg_sweep: vec![1.0, 1.5, 2.0, 3.0],
            ema_index: None,
            heldout_seed_offset: 1_000_003,
            chunk: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset file to train on; generated from `dataset` when unset.
    pub data_path: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub teacher: TeacherSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data_path: None,
            dataset: DatasetSpec::default(),
            teacher: TeacherSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn check_uncond(u: UncondType, variant: Variant, what: &str) -> Result<()> {
    let masked = matches!(u, UncondType::SemanticToPixelMask | UncondType::BidirectionalMask);
    if masked && !variant.supports_masks() && variant != Variant::PixelOnly {
        return Err(Error::Config(format!(
            "{what} uncond type {u:?} needs attention masks, which variant {variant:?} does not support"
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let (m, d, t) = (&self.model, &self.dataset, &self.teacher);
        m.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        d.validate(m.patch_size)?;
        let bad = |msg: String| Err(Error::Config(msg));
        if (d.height, d.width, d.channels) != (m.height, m.width, m.channels) {
            return bad(format!(
                "dataset {}x{}x{} does not match model {}x{}x{}",
                d.channels, d.height, d.width, m.channels, m.height, m.width
            ));
        }
        if d.n_classes != m.n_classes {
            return bad(format!("dataset has {} classes, model {}", d.n_classes, m.n_classes));
        }
        if t.patch_size != m.patch_size || t.in_channels != m.channels || t.feature_dim != m.semantic_dim {
            return bad(format!(
                "teacher (patch {}, channels {}, dim {}) must match model (patch {}, channels {}, semantic_dim {})",
                t.patch_size, t.in_channels, t.feature_dim, m.patch_size, m.channels, m.semantic_dim
            ));
        }
        check_uncond(self.train.uncond_type, m.variant, "training")?;
        check_uncond(self.sampler.uncond_type, m.variant, "sampler")?;
        let e = &self.eval;
        if e.cfg_sweep.is_empty() || e.cfg_sweep.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad(format!("cfg_sweep {:?} must be a non-empty list of scales >= 0", e.cfg_sweep));
        }
        if e.samples_per_class * m.n_classes < MIN_EVAL_SAMPLES || e.chunk == 0 {
            return bad(format!(
                "evaluation needs at least {MIN_EVAL_SAMPLES} samples in total and a positive chunk"
            ));
        }
        if let Some(k) = e.ema_index {
            if k >= self.train.ema_decays.len() {
                return bad(format!("ema_index {k} out of {} decays", self.train.ema_decays.len()));
            }
        }
        Ok(())
    }

    /// Spec of the held-out reference set used by evaluation.
    pub fn heldout_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.dataset.seed.wrapping_add(self.eval.heldout_seed_offset),
            ..self.dataset.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.train.epochs = 3;
        c.sampler.cfg_interval = Some([0.1, 0.9]);
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys() {
        for text in ["bogus = 1", "[model]\nwidthh = 3", "[train.dropout]\nmode = \"joint\"\nextra = 1"] {
            let e = RunConfig::from_toml(text).unwrap_err();
            assert!(e.is_validation(), "{text}: {e}");
        }
    }

    #[test]
    fn cross_checks() {
        let mut c = RunConfig::default();
        c.model.variant = Variant::SingleChannelConcat;
        assert!(c.validate().is_err());
        c.sampler.uncond_type = UncondType::ZeroSemantic;
        c.train.uncond_type = UncondType::ZeroSemantic;
        c.validate().unwrap();

        let mut c = RunConfig::default();
        c.dataset.height = 18;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.teacher.feature_dim = 16;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.eval.cfg_sweep.clear();
        assert!(c.validate().is_err());
    }
}
