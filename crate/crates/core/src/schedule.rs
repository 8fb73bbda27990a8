//! Linear flow-matching schedule: interpolation, velocity targets, time
//! sampling, and the SNR calibration between the pixel and semantic streams.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Rng, Tensor};

/// Lower bound on `1 - t` when converting clean predictions to velocities.
pub const DEFAULT_CLIP: f32 = 0.05;

/// Logit-normal time sampler: `t = sigmoid(g)`, `g ~ N(mu, sigma²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSampler {
    pub mu: f32,
    pub sigma: f32,
}

impl Default for TimeSampler {
    fn default() -> Self {
        Self {
            mu: -0.8,
            sigma: 0.8,
        }
    }
}

/// Smallest and largest `t` a sampler may emit, keeping both endpoints out.
const T_MIN: f32 = 1e-6;
const T_MAX: f32 = 1.0 - 1e-6;

impl TimeSampler {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!(
                "time sampler needs finite mu and sigma >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> f32 {
        let g = self.mu + self.sigma * rng.normal();
        sigmoid(g).clamp(T_MIN, T_MAX)
    }
}

pub fn sample_time(rng: &mut Rng, sampler: &TimeSampler, n: usize) -> Vec<f32> {
    (0..n).map(|_| sampler.sample(rng)).collect()
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(t: f32) -> f32 {
    (t / (1.0 - t)).ln()
}

/// One stream's clean signal, its noise draw, and the interpolant at `t`.
#[derive(Debug, Clone)]
pub struct NoisedPair {
    pub clean: Tensor,
    pub noise: Tensor,
    pub t: f32,
    pub z_t: Tensor,
}

impl NoisedPair {
    pub fn velocity(&self) -> Tensor {
        velocity_target(&self.clean, &self.noise).expect("shapes checked at construction")
    }
}

/// `z_t = t·clean + (1−t)·noise`.
pub fn interpolate(clean: &Tensor, noise: &Tensor, t: f32) -> Result<NoisedPair> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("t = {t} outside [0, 1]")));
    }
    let z_t = clean.zip_map(noise, |c, e| t * c + (1.0 - t) * e)?;
    Ok(NoisedPair {
        clean: clean.clone(),
        noise: noise.clone(),
        t,
        z_t,
    })
}

/// Ground-truth velocity `clean − noise`.
pub fn velocity_target(clean: &Tensor, noise: &Tensor) -> Result<Tensor> {
    clean.sub(noise)
}

/// Denominator of the clean-to-velocity conversion.
pub fn velocity_denominator(t: f32, clip: f32) -> f32 {
    (1.0 - t).max(clip)
}

/// `(pred_clean − z_t) / max(1 − t, clip)`.
pub fn clean_to_velocity(pred_clean: &Tensor, z_t: &Tensor, t: f32, clip: f32) -> Result<Tensor> {
    let inv = 1.0 / velocity_denominator(t, clip);
    pred_clean.zip_map(z_t, |p, z| (p - z) * inv)
}

/// `t² P_signal / ((1−t)² P_noise)` for `t` strictly inside (0, 1).
pub fn snr(t: f64, signal_power: f64, noise_power: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Invalid(format!("SNR undefined at t = {t}")));
    }
    Ok(t * t * signal_power / ((1.0 - t) * (1.0 - t) * noise_power))
}

/// Dataset-level RMS calibration of the semantic stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub rms_pixels: f32,
    pub rms_features: f32,
    pub alpha: f32,
}

impl Calibration {
    pub fn identity() -> Self {
        Self {
            rms_pixels: 1.0,
            rms_features: 1.0,
            alpha: 1.0,
        }
    }
}

/// `alpha = rms_pixels / rms_features`.
pub fn rescale_alpha(rms_pixels: f64, rms_features: f64) -> Result<Calibration> {
    if !(rms_pixels > 0.0 && rms_features > 0.0) {
        return Err(Error::Invalid(format!(
            "RMS calibration needs positive magnitudes, got pixels={rms_pixels} features={rms_features}"
        )));
    }
    Ok(Calibration {
        rms_pixels: rms_pixels as f32,
        rms_features: rms_features as f32,
        alpha: (rms_pixels / rms_features) as f32,
    })
}

/// SNR-equivalent time for an unscaled stream: `αt / (1 + (α−1)t)`.
pub fn time_shift(alpha: f64, t: f64) -> f64 {
    alpha * t / (1.0 + (alpha - 1.0) * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: f32) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let c = Tensor::from_fn(&[5], |i| i as f32 * 0.3 - 0.5);
        let e = Tensor::from_fn(&[5], |i| 1.7 - i as f32);
        assert_eq!(interpolate(&c, &e, 1.0).unwrap().z_t, c);
        assert_eq!(interpolate(&c, &e, 0.0).unwrap().z_t, e);
        assert_eq!(interpolate(&t1(2.0), &t1(0.0), 0.5).unwrap().z_t.item(), 1.0);
        assert!(interpolate(&c, &t1(0.0), 0.5).is_err());
        assert!(interpolate(&c, &e, 1.5).is_err());
    }

    #[test]
    fn velocity_examples() {
        assert_eq!(velocity_target(&t1(1.0), &t1(1.0)).unwrap().item(), 0.0);
        assert_eq!(velocity_target(&t1(3.0), &t1(1.0)).unwrap().item(), 2.0);
        let z = t1(0.0);
        assert_eq!(clean_to_velocity(&z, &z, 0.3, DEFAULT_CLIP).unwrap().item(), 0.0);
        assert_eq!(clean_to_velocity(&t1(1.0), &z, 0.5, DEFAULT_CLIP).unwrap().item(), 2.0);
        // clip engages once 1 - t < 0.05
        assert_eq!(velocity_denominator(0.99, DEFAULT_CLIP), 0.05);
        assert_eq!(clean_to_velocity(&t1(1.0), &z, 0.99, DEFAULT_CLIP).unwrap().item(), 20.0);
    }

    #[test]
    fn degenerate_sampler_is_constant() {
        let mut rng = Rng::new(0);
        let s = TimeSampler { mu: 0.0, sigma: 0.0 };
        assert!(sample_time(&mut rng, &s, 32).iter().all(|&t| t == 0.5));
    }

    #[test]
    fn snr_examples() {
        assert!((snr(0.5, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let a = snr(0.3, 1.0, 1.0).unwrap();
        let b = snr(0.3, 4.0, 1.0).unwrap();
        assert!((b / a - 4.0).abs() < 1e-12);
        assert!(snr(0.0, 1.0, 1.0).is_err());
        assert!(snr(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(rescale_alpha(2.0, 2.0).unwrap().alpha, 1.0);
        assert_eq!(rescale_alpha(1.0, 2.0).unwrap().alpha, 0.5);
        assert!(rescale_alpha(1.0, 0.0).is_err());
    }

    #[test]
    fn time_shift_examples() {
        for t in [0.0, 0.1, 0.5, 0.77, 1.0] {
            assert_eq!(time_shift(1.0, t), t);
        }
        for a in [0.1, 0.5, 3.0, 10.0] {
            assert_eq!(time_shift(a, 0.0), 0.0);
            assert!((time_shift(a, 1.0) - 1.0).abs() < 1e-15);
        }
        assert!((time_shift(2.0, 0.5) - 2.0 / 3.0).abs() < 1e-15);
    }
}
