//! Frozen toy teacher encoder and the semantic-feature preparation pipeline.
//!
//! The encoder maps each image patch through a fixed, seeded linear map
//! followed by `tanh`. Its weights are never registered as trainable; when a
//! loss needs gradients through the encoder the weights enter the tape as
//! constants.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::streams;
use crate::schedule::{rescale_alpha, Calibration};
use crate::{Rng, Tape, Tensor, Var};

pub const STD_FLOOR: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSpec {
    pub seed: u64,
    pub patch_size: usize,
    pub in_channels: usize,
    pub feature_dim: usize,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            seed: 1234,
            patch_size: 4,
            in_channels: 1,
            feature_dim: 8,
        }
    }
}

/// Splits `[C, H, W]` into row-major patches, each flattened as `[C, p, p]`.
pub fn patchify(image: &[f32], channels: usize, height: usize, width: usize, p: usize) -> Result<Tensor> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::Invalid(format!(
            "image {height}x{width} is not divisible into {p}x{p} patches"
        )));
    }
    if image.len() != channels * height * width {
        return Err(Error::shape("patchify", format!("{} values for {channels}x{height}x{width}", image.len())));
    }
    let (gh, gw) = (height / p, width / p);
    let plen = channels * p * p;
    let mut out = Vec::with_capacity(image.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..channels {
                for y in 0..p {
                    let row = c * height * width + (gy * p + y) * width + gx * p;
                    out.extend_from_slice(&image[row..row + p]);
                }
            }
        }
    }
    Tensor::from_parts(&[gh * gw, plen], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[f32], channels: usize, height: usize, width: usize, p: usize) -> Vec<f32> {
    let (gh, gw) = (height / p, width / p);
    let mut img = vec![0.0; channels * height * width];
    let mut k = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..channels {
                for y in 0..p {
                    let row = c * height * width + (gy * p + y) * width + gx * p;
                    img[row..row + p].copy_from_slice(&tokens[k..k + p]);
                    k += p;
                }
            }
        }
    }
    img
}

/// Patchifies every image of a `[B, C, H, W]` batch into `[B, n, C·p²]`.
pub fn patchify_batch(images: &Tensor, p: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("patchify_batch", format!("{s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut data = Vec::with_capacity(images.len());
    let mut n = 0;
    for i in 0..b {
        let t = patchify(images.row(i), c, h, w, p)?;
        n = t.shape()[0];
        data.extend(t.into_data());
    }
    Tensor::from_parts(&[b, n, c * p * p], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEncoder {
    spec: TeacherSpec,
    /// `[C·p², feature_dim]`, drawn from `N(0, 1/fan_in)`.
    weights: Tensor,
}

impl TeacherEncoder {
    pub fn new(spec: TeacherSpec) -> Result<Self> {
        if spec.patch_size == 0 || spec.in_channels == 0 || spec.feature_dim == 0 {
            return Err(Error::Config(format!("degenerate teacher spec {spec:?}")));
        }
        let fan_in = spec.in_channels * spec.patch_size * spec.patch_size;
        let mut rng = Rng::derive(spec.seed, streams::TEACHER);
        let weights = Tensor::randn(&[fan_in, spec.feature_dim], 1.0 / (fan_in as f32).sqrt(), &mut rng);
        Ok(Self { spec, weights })
    }

    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    /// Patch tokens `[n, C·p²]` to features `[n, D]`.
    pub fn encode_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        Ok(tokens.matmul(&self.weights)?.map(f32::tanh))
    }

    /// `[C, H, W]` image to `[n, D]` patch features.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.spec.in_channels {
            return Err(Error::shape("encode", format!("image {s:?}")));
        }
        let tokens = patchify(image.data(), s[0], s[1], s[2], self.spec.patch_size)?;
        self.encode_tokens(&tokens)
    }

    /// Batched token features `[B, n, C·p²] -> [B, n, D]`.
    pub fn encode_token_batch(&self, tokens: &Tensor) -> Result<Tensor> {
        let s = tokens.shape().to_vec();
        let flat = tokens.clone().reshape(&[s[0] * s[1], s[2]])?;
        self.encode_tokens(&flat)?.reshape(&[s[0], s[1], self.spec.feature_dim])
    }

    /// Differentiable encoding of patch tokens `[B, n, C·p²]` on a tape.
    /// The weights enter as a constant, so gradients reach the input but
    /// never the encoder.
    pub fn encode_on_tape(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("encode_on_tape", format!("{s:?}")));
        }
        let w = tape.constant(self.weights.clone());
        let flat = tape.reshape(tokens, &[s[0] * s[1], s[2]])?;
        let lin = tape.matmul(flat, w)?;
        let act = tape.tanh(lin);
        tape.reshape(act, &[s[0], s[1], self.spec.feature_dim])
    }
}

/// Per-dimension feature statistics pooled over all patches of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn floored_dims(&self) -> usize {
        self.std.iter().filter(|&&s| s <= STD_FLOOR).count()
    }

    /// `(f − mean) / std` on `[.., D]` features.
    pub fn normalize(&self, features: &Tensor) -> Tensor {
        let d = self.dim();
        Tensor::from_fn(features.shape(), |i| {
            let j = i % d;
            ((features.data()[i] as f64 - self.mean[j] as f64) / self.std[j] as f64) as f32
        })
    }

    pub fn denormalize(&self, normalized: &Tensor) -> Tensor {
        let d = self.dim();
        Tensor::from_fn(normalized.shape(), |i| {
            let j = i % d;
            (normalized.data()[i] as f64 * self.std[j] as f64 + self.mean[j] as f64) as f32
        })
    }

    /// Tape version of [`FeatureStats::normalize`] for `[B, n, D]` features.
    pub fn normalize_on_tape(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let d = self.dim();
        let mean = tape.constant(Tensor::raw(vec![1, 1, d], self.mean.clone()));
        let inv = tape.constant(Tensor::raw(vec![1, 1, d], self.std.iter().map(|s| 1.0 / s).collect()));
        let centered = tape.sub(features, mean)?;
        tape.mul(centered, inv)
    }
}

/// Mean/std of every patch feature of every image in `dataset`.
pub fn fit_stats(encoder: &TeacherEncoder, dataset: &Dataset) -> Result<FeatureStats> {
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot fit feature stats on an empty dataset".into()));
    }
    let d = encoder.feature_dim();
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    let mut count = 0usize;
    for i in 0..dataset.len() {
        let f = encoder.encode(&dataset.image(i))?;
        for row in f.data().chunks(d) {
            for (j, &v) in row.iter().enumerate() {
                sum[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
            count += 1;
        }
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt() as f32).max(STD_FLOOR))
        .collect();
    Ok(FeatureStats {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        std,
    })
}

/// Encoder, fitted statistics and calibration bundled for data preparation.
#[derive(Debug, Clone)]
pub struct SemanticPipeline {
    pub encoder: TeacherEncoder,
    pub stats: FeatureStats,
    pub calibration: Calibration,
}

impl SemanticPipeline {
    /// Fits stats and the RMS calibration on `dataset`.
    pub fn fit(spec: TeacherSpec, dataset: &Dataset) -> Result<Self> {
        let encoder = TeacherEncoder::new(spec)?;
        let stats = fit_stats(&encoder, dataset)?;
        let mut ss = 0.0f64;
        let mut count = 0usize;
        for i in 0..dataset.len() {
            let f = stats.normalize(&encoder.encode(&dataset.image(i))?);
            ss += f.sum_sq();
            count += f.len();
        }
        let calibration = rescale_alpha(dataset.rms(), (ss / count as f64).sqrt())?;
        Ok(Self {
            encoder,
            stats,
            calibration,
        })
    }

    /// Normalized teacher features `[n, D]` of one image.
    pub fn normalized(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.stats.normalize(&self.encoder.encode(image)?))
    }

    /// Clean semantic target `α · (φ(x) − mean) / std`.
    pub fn prepare_semantics(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.normalized(image)?.scale(self.calibration.alpha))
    }

    /// Undoes the RMS scaling of a prepared semantic target.
    pub fn unscale(&self, prepared: &Tensor) -> Tensor {
        prepared.scale(1.0 / self.calibration.alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};

    fn spec() -> TeacherSpec {
        TeacherSpec::default()
    }

    #[test]
    fn zero_image_zero_features_and_determinism() {
        let enc = TeacherEncoder::new(spec()).unwrap();
        let z = enc.encode(&Tensor::zeros(&[1, 16, 16])).unwrap();
        assert_eq!(z.shape(), &[16, 8]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let img = Tensor::from_fn(&[1, 16, 16], |i| (i as f32 * 0.1).sin());
        let a = enc.encode(&img).unwrap();
        let b = TeacherEncoder::new(spec()).unwrap().encode(&img).unwrap();
        assert_eq!(a, b);
        assert!(enc.encode(&Tensor::zeros(&[1, 15, 16])).is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let img: Vec<f32> = (0..2 * 8 * 12).map(|i| i as f32).collect();
        let t = patchify(&img, 2, 8, 12, 4).unwrap();
        assert_eq!(t.shape(), &[6, 32]);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.data()[4], 12.0);
        assert_eq!(unpatchify(t.data(), 2, 8, 12, 4), img);
    }

    #[test]
    fn constant_images_floor_std() {
        let enc = TeacherEncoder::new(spec()).unwrap();
        let mut ds = generate(&DatasetSpec {
            samples_per_class: 4,
            ..DatasetSpec::default()
        })
        .unwrap();
        ds.images.iter_mut().for_each(|v| *v = 0.5);
        let st = fit_stats(&enc, &ds).unwrap();
        assert!(st.std.iter().all(|&s| s == STD_FLOOR));
        assert_eq!(st.floored_dims(), 8);
    }

    #[test]
    fn inverse_normalization() {
        let p = SemanticPipeline::fit(
            spec(),
            &generate(&DatasetSpec {
                samples_per_class: 8,
                ..DatasetSpec::default()
            })
            .unwrap(),
        )
        .unwrap();
        let raw = p.encoder.encode(&Tensor::from_fn(&[1, 16, 16], |i| ((i % 7) as f32) / 7.0)).unwrap();
        let back = p.stats.denormalize(&p.stats.normalize(&raw));
        assert!(back.max_abs_diff(&raw) < 1e-6);
    }
}
