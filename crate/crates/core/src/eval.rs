//! Toy-FD (Fréchet distance in frozen-teacher space) and per-class mean error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ParamStore};
use crate::sampler::{generate, SamplerConfig};
use crate::teacher::SemanticPipeline;
use crate::Tensor;

/// Largest matrix the Jacobi solver accepts.
pub const MAX_EIGEN_DIM: usize = 64;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues and column eigenvectors (row-major `F × F`) of a symmetric
/// matrix, by cyclic Jacobi rotations.
pub fn eigensolve_sym(a: &[f64], f: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != f * f || f == 0 {
        return Err(Error::shape("eigensolve_sym", format!("{} entries for {f}x{f}", a.len())));
    }
    if f > MAX_EIGEN_DIM {
        return Err(Error::Invalid(format!("eigensolve_sym supports F <= {MAX_EIGEN_DIM}, got {f}")));
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for i in 0..f {
        for j in 0..i {
            if (a[i * f + j] - a[j * f + i]).abs() > 1e-6 * norm.max(1.0) {
                return Err(Error::Invalid(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut m = a.to_vec();
    // symmetrise exactly so rotations act on one consistent matrix
    for i in 0..f {
        for j in 0..i {
            let s = 0.5 * (m[i * f + j] + m[j * f + i]);
            m[i * f + j] = s;
            m[j * f + i] = s;
        }
    }
    let mut v = vec![0.0; f * f];
    for i in 0..f {
        v[i * f + i] = 1.0;
    }
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..f {
            for j in 0..f {
                if i != j {
                    s += m[i * f + j] * m[i * f + j];
                }
            }
        }
        s.sqrt()
    };
    let tol = 1e-10 * norm;
    for _ in 0..MAX_SWEEPS {
        if off(&m) <= tol {
            break;
        }
        for p in 0..f {
            for q in p + 1..f {
                let apq = m[p * f + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * f + p], m[q * f + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..f {
                    let (mkp, mkq) = (m[k * f + p], m[k * f + q]);
                    m[k * f + p] = c * mkp - s * mkq;
                    m[k * f + q] = s * mkp + c * mkq;
                }
                for k in 0..f {
                    let (mpk, mqk) = (m[p * f + k], m[q * f + k]);
                    m[p * f + k] = c * mpk - s * mqk;
                    m[q * f + k] = s * mpk + c * mqk;
                }
                for k in 0..f {
                    let (vkp, vkq) = (v[k * f + p], v[k * f + q]);
                    v[k * f + p] = c * vkp - s * vkq;
                    v[k * f + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..f).map(|i| m[i * f + i]).collect();
    Ok((values, v))
}

/// `V · diag(g(λ)) · Vᵀ` for eigenvalues clamped at zero.
fn spectral_map(a: &[f64], f: usize, g: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let (vals, v) = eigensolve_sym(a, f)?;
    let mut out = vec![0.0; f * f];
    for (k, &l) in vals.iter().enumerate() {
        let gl = g(l.max(0.0));
        for i in 0..f {
            let vik = v[i * f + k] * gl;
            for j in 0..f {
                out[i * f + j] += vik * v[j * f + k];
            }
        }
    }
    Ok(out)
}

fn matmul(a: &[f64], b: &[f64], f: usize) -> Vec<f64> {
    let mut out = vec![0.0; f * f];
    for i in 0..f {
        for k in 0..f {
            let aik = a[i * f + k];
            for j in 0..f {
                out[i * f + j] += aik * b[k * f + j];
            }
        }
    }
    out
}

/// Mean and unbiased covariance of a set of descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    pub mean: Vec<f64>,
    /// Row-major `F × F`.
    pub cov: Vec<f64>,
}

impl FrechetStats {
    /// Statistics of the rows of `x: [N, F]`, `N ≥ 2`.
    pub fn from_rows(x: &Tensor) -> Result<Self> {
        if x.rank() != 2 || x.shape()[0] < 2 {
            return Err(Error::Invalid(format!("need at least 2 descriptor rows, got {:?}", x.shape())));
        }
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let mut mean = vec![0.0; f];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; f * f];
        for i in 0..n {
            let c: Vec<f64> = x.row(i).iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect();
            for a in 0..f {
                for b in 0..=a {
                    cov[a * f + b] += c[a] * c[b];
                }
            }
        }
        for a in 0..f {
            for b in 0..=a {
                let v = cov[a * f + b] / (n - 1) as f64;
                cov[a * f + b] = v;
                cov[b * f + a] = v;
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    let f = a.dim();
    if b.dim() != f {
        return Err(Error::shape("frechet_distance", format!("dims {f} and {}", b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = spectral_map(&a.cov, f, f64::sqrt)?;
    let mut inner = matmul(&matmul(&sa, &b.cov, f), &sa, f);
    for i in 0..f {
        for j in 0..i {
            let s = 0.5 * (inner[i * f + j] + inner[j * f + i]);
            inner[i * f + j] = s;
            inner[j * f + i] = s;
        }
    }
    let (vals, _) = eigensolve_sym(&inner, f)?;
    let tr_sqrt: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    let tr = |c: &[f64]| (0..f).map(|i| c[i * f + i]).sum::<f64>();
    Ok(mean_term + tr(&a.cov) + tr(&b.cov) - 2.0 * tr_sqrt)
}

/// Descriptor of one image: normalized teacher features mean-pooled over
/// each quadrant of the patch grid, concatenated (`4·D` values).
pub fn descriptor(pipeline: &SemanticPipeline, image: &Tensor) -> Result<Vec<f32>> {
    let s = image.shape();
    let p = pipeline.encoder.spec().patch_size;
    let (gh, gw) = (s[1] / p, s[2] / p);
    let f = pipeline.normalized(image)?;
    let d = pipeline.encoder.feature_dim();
    let mut out = vec![0.0f64; 4 * d];
    let mut counts = [0usize; 4];
    for gy in 0..gh {
        for gx in 0..gw {
            let q = (2 * gy / gh.max(1)).min(1) * 2 + (2 * gx / gw.max(1)).min(1);
            counts[q] += 1;
            for (o, &v) in out[q * d..(q + 1) * d].iter_mut().zip(f.row(gy * gw + gx)) {
                *o += v as f64;
            }
        }
    }
    for q in 0..4 {
        let c = counts[q].max(1) as f64;
        out[q * d..(q + 1) * d].iter_mut().for_each(|v| *v /= c);
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// Descriptors of a `[N, C, H, W]` image batch as `[N, 4·D]`.
pub fn descriptors(pipeline: &SemanticPipeline, images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("descriptors", format!("{s:?}")));
    }
    let mut data = Vec::new();
    for i in 0..s[0] {
        let img = Tensor::new(&s[1..], images.row(i).to_vec())?;
        data.extend(descriptor(pipeline, &img)?);
    }
    let f = data.len() / s[0];
    Tensor::new(&[s[0], f], data)
}

fn dataset_images(ds: &Dataset) -> Tensor {
    let [c, h, w] = ds.image_shape();
    Tensor::raw(vec![ds.len(), c, h, w], ds.images.clone())
}

/// Fréchet statistics of a real reference set's descriptors.
pub fn reference_stats(pipeline: &SemanticPipeline, real: &Dataset) -> Result<FrechetStats> {
    FrechetStats::from_rows(&descriptors(pipeline, &dataset_images(real))?)
}

pub fn toy_fd(pipeline: &SemanticPipeline, reference: &FrechetStats, images: &Tensor) -> Result<f64> {
    frechet_distance(&FrechetStats::from_rows(&descriptors(pipeline, images)?)?, reference)
}

/// Mean over classes of the RMS difference between generated and real
/// per-class mean images. Classes absent from `generated` are skipped.
pub fn class_mean_err(images: &Tensor, classes: &[usize], real: &Dataset) -> Result<f64> {
    let w = real.spec.image_len();
    if images.len() != classes.len() * w {
        return Err(Error::shape("class_mean_err", format!("{:?} for {} labels", images.shape(), classes.len())));
    }
    let mean_of = |rows: &mut dyn Iterator<Item = &[f32]>| -> Option<Vec<f64>> {
        let mut acc = vec![0.0f64; w];
        let mut n = 0usize;
        for r in rows {
            acc.iter_mut().zip(r).for_each(|(a, &v)| *a += v as f64);
            n += 1;
        }
        (n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect())
    };
    let mut errs = Vec::new();
    for k in 0..real.spec.n_classes {
        let gen = mean_of(&mut (0..classes.len()).filter(|&i| classes[i] == k).map(|i| &images.data()[i * w..(i + 1) * w]));
        let Some(gen) = gen else { continue };
        let re = mean_of(
            &mut (0..real.len())
                .filter(|&i| real.labels[i] as usize == k)
                .map(|i| &real.images[i * w..(i + 1) * w]),
        )
        .ok_or_else(|| Error::Invalid(format!("reference set has no class {k}")))?;
        let ms: f64 = gen.iter().zip(&re).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / w as f64;
        errs.push(ms.sqrt());
    }
    if errs.is_empty() {
        return Err(Error::Invalid("no classes to compare".into()));
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Minimum generated / reference sample count for an evaluation.
pub const MIN_EVAL_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub toy_fd: f64,
    pub class_mean_err: f64,
}

/// Scores one generated set against the real reference set.
pub fn evaluate_images(pipeline: &SemanticPipeline, reference: &FrechetStats, real: &Dataset, images: &Tensor, classes: &[usize]) -> Result<MetricsSummary> {
    let n = images.shape()[0];
    if n < MIN_EVAL_SAMPLES || real.len() < MIN_EVAL_SAMPLES {
        return Err(Error::Invalid(format!(
            "evaluation needs at least {MIN_EVAL_SAMPLES} generated and real samples, got {n} and {}",
            real.len()
        )));
    }
    Ok(MetricsSummary {
        toy_fd: toy_fd(pipeline, reference, images)?,
        class_mean_err: class_mean_err(images, classes, real)?,
    })
}

/// `{cfg_scale → summary}` keyed by the scale's decimal string.
pub type SweepReport = BTreeMap<String, MetricsSummary>;

pub fn cfg_key(s: f32) -> String {
    format!("{s}")
}

/// Class labels for an evaluation set, interleaved so every sampler chunk
/// mixes all classes.
pub fn eval_classes(n_classes: usize, per_class: usize) -> Vec<usize> {
    (0..n_classes * per_class).map(|i| i % n_classes).collect()
}

/// Samples `eval.samples_per_class` images per class at every scale of the
/// sweep and scores each set. All scales share the same starting noise.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    model: &Model,
    params: &ParamStore,
    pipeline: &SemanticPipeline,
    time_shift_alpha: Option<f32>,
    sampler: &SamplerConfig,
    eval: &EvalConfig,
    real: &Dataset,
    reference: &FrechetStats,
    seed: u64,
) -> Result<SweepReport> {
    let classes = eval_classes(model.config().n_classes, eval.samples_per_class);
    let requested: Vec<Option<usize>> = classes.iter().map(|&c| Some(c)).collect();
    let mut report = SweepReport::new();
    for &scale in &eval.cfg_sweep {
        let cfg = SamplerConfig {
            cfg_scale: scale,
            ..*sampler
        };
        let set = generate(model, params, &requested, &cfg, time_shift_alpha, seed, eval.chunk)?;
        let m = evaluate_images(pipeline, reference, real, &set.images, &classes)?;
        report.insert(cfg_key(scale), m);
    }
    Ok(report)
}

/// Lowest toy-FD in a sweep, with its scale key.
pub fn best_fd(report: &SweepReport, filter: impl Fn(f32) -> bool) -> Option<(f32, f64)> {
    report
        .iter()
        .filter_map(|(k, m)| k.parse::<f32>().ok().map(|s| (s, m.toy_fd)))
        .filter(|(s, _)| filter(*s))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn random_sym(f: usize, seed: u64) -> Vec<f64> {
        let mut rng = Rng::new(seed);
        let mut a = vec![0.0; f * f];
        for i in 0..f {
            for j in 0..=i {
                let v = rng.normal() as f64;
                a[i * f + j] = v;
                a[j * f + i] = v;
            }
        }
        a
    }

    fn reconstruct(vals: &[f64], v: &[f64], f: usize) -> Vec<f64> {
        let mut out = vec![0.0; f * f];
        for k in 0..f {
            for i in 0..f {
                for j in 0..f {
                    out[i * f + j] += v[i * f + k] * vals[k] * v[j * f + k];
                }
            }
        }
        out
    }

    #[test]
    fn eigen_examples() {
        let (vals, v) = eigensolve_sym(&[3.0, 0.0, 0.0, -1.0], 2).unwrap();
        assert_eq!(vals, vec![3.0, -1.0]);
        assert_eq!(v, vec![1.0, 0.0, 0.0, 1.0]);
        let (mut vals, _) = eigensolve_sym(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        vals.sort_by(f64::total_cmp);
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] - 3.0).abs() < 1e-12);
        let a = random_sym(8, 1);
        let (vals, v) = eigensolve_sym(&a, 8).unwrap();
        let r = reconstruct(&vals, &v, 8);
        assert!(a.iter().zip(&r).all(|(x, y)| (x - y).abs() < 1e-9));
        assert!(eigensolve_sym(&[1.0, 2.0, 0.0, 1.0], 2).is_err());
    }

    fn stats(mean: Vec<f64>, cov: Vec<f64>) -> FrechetStats {
        FrechetStats { mean, cov }
    }

    #[test]
    fn frechet_examples() {
        let f = 3;
        let a = random_sym(f, 2);
        let cov = matmul(&a, &a, f);
        let s = stats(vec![0.1, 0.2, 0.3], cov.clone());
        assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-6);
        let t = stats(vec![1.1, 0.2, -0.7], cov);
        assert!((frechet_distance(&s, &t).unwrap() - 2.0).abs() < 1e-6);
        let eye = |c: f64| (0..f * f).map(|i| if i % (f + 1) == 0 { c } else { 0.0 }).collect();
        let (ca, cb) = (2.0f64, 0.5f64);
        let iso = frechet_distance(&stats(vec![0.0; 3], eye(ca)), &stats(vec![0.0; 3], eye(cb))).unwrap();
        assert!((iso - 3.0 * (ca + cb - 2.0 * (ca * cb).sqrt())).abs() < 1e-9);
    }

    #[test]
    fn stats_use_unbiased_covariance() {
        let x = Tensor::new(&[2, 1], vec![0.0, 2.0]).unwrap();
        let s = FrechetStats::from_rows(&x).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.cov, vec![2.0]);
    }
}
