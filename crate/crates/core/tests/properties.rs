use proptest::prelude::*;

use vco::eval::{eigensolve_sym, frechet_distance, FrechetStats};
use vco::losses::{hybrid_field, LossWeights};
use vco::sampler::guidance_combine;
use vco::schedule::{interpolate, time_shift};
use vco::{Rng, Tape, Tensor};

fn rows(seed: u64, n: usize, f: usize, shift: f32) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::randn(&[n, f], 1.0, &mut rng).map(|v| v + shift)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_are_distributions(seed in 0u64..10_000, n in 1usize..12, keep in 1usize..12) {
        let mut rng = Rng::new(seed);
        let logits = Tensor::randn(&[n, n], 5.0, &mut rng);
        let keep = keep.min(n);
        let mask = vco::Mask::new(&[n, n], (0..n * n).map(|k| (k % n + k / n) % n < keep).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(logits);
        let p = tape.softmax_masked(x, Some(&mask)).unwrap();
        let p = tape.value(p);
        for i in 0..n {
            let row = p.row(i);
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            for (j, &v) in row.iter().enumerate() {
                if !mask.get(i, j) {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn time_shift_is_monotone_bijection(alpha in 0.1f64..10.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(time_shift(alpha, lo) <= time_shift(alpha, hi));
        prop_assert!((time_shift(1.0 / alpha, time_shift(alpha, a)) - a).abs() <= 1e-9);
        prop_assert_eq!(time_shift(alpha, 0.0), 0.0);
        prop_assert!((time_shift(alpha, 1.0) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn interpolation_endpoints(seed in 0u64..10_000, t in 0.0f32..1.0) {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(&[5], 1.0, &mut rng);
        let e = Tensor::randn(&[5], 1.0, &mut rng);
        let p = interpolate(&x, &e, t).unwrap();
        // z_t + (1 - t) v recovers the clean sample
        let back = p.z_t.zip_map(&p.velocity(), |z, v| z + (1.0 - t) * v).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-5);
        prop_assert_eq!(interpolate(&x, &e, 1.0).unwrap().z_t, x.clone());
    }

    #[test]
    fn guidance_is_affine_in_scale(seed in 0u64..10_000, s in 0.0f32..5.0) {
        let mut rng = Rng::new(seed);
        let c = Tensor::randn(&[7], 1.0, &mut rng);
        let u = Tensor::randn(&[7], 1.0, &mut rng);
        prop_assert_eq!(guidance_combine(&c, &u, 0.0).unwrap(), u.clone());
        prop_assert!(guidance_combine(&c, &u, 1.0).unwrap().max_abs_diff(&c) <= 1e-6);
        let g = guidance_combine(&c, &u, s).unwrap();
        let mid = u.zip_map(&c, |a, b| a + s * (b - a)).unwrap();
        prop_assert!(g.max_abs_diff(&mid) <= 1e-6);
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in 0u64..10_000, f in 1usize..6, shift in -2.0f32..2.0) {
        let a = FrechetStats::from_rows(&rows(seed, 40, f, 0.0)).unwrap();
        let b = FrechetStats::from_rows(&rows(seed + 1, 40, f, shift)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn frechet_ignores_row_order(seed in 0u64..10_000, f in 1usize..6) {
        let x = rows(seed, 30, f, 0.3);
        let mut rng = Rng::new(seed ^ 0xfeed);
        let perm = rng.permutation(30);
        let mut data = Vec::new();
        for &p in &perm {
            data.extend_from_slice(x.row(p));
        }
        let y = Tensor::new(&[30, f], data).unwrap();
        let reference = FrechetStats::from_rows(&rows(seed + 7, 30, f, 0.0)).unwrap();
        let d1 = frechet_distance(&FrechetStats::from_rows(&x).unwrap(), &reference).unwrap();
        let d2 = frechet_distance(&FrechetStats::from_rows(&y).unwrap(), &reference).unwrap();
        prop_assert!((d1 - d2).abs() <= 1e-6 * (1.0 + d1));
    }

    #[test]
    fn eigen_reconstructs(seed in 0u64..10_000, f in 1usize..10) {
        let mut rng = Rng::new(seed);
        let m: Vec<f64> = (0..f * f).map(|_| rng.normal() as f64).collect();
        let mut a = vec![0.0; f * f];
        for i in 0..f {
            for j in 0..f {
                a[i * f + j] = m[i * f + j] + m[j * f + i];
            }
        }
        let (vals, vecs) = eigensolve_sym(&a, f).unwrap();
        let scale = a.iter().map(|x| x.abs()).fold(1.0, f64::max);
        for i in 0..f {
            for j in 0..f {
                let r: f64 = (0..f).map(|k| vecs[i * f + k] * vals[k] * vecs[j * f + k]).sum();
                prop_assert!((r - a[i * f + j]).abs() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn hybrid_field_is_equivariant_to_batch_order(seed in 0u64..10_000, b in 2usize..10) {
        let w = LossWeights::default();
        let mut rng = Rng::new(seed);
        let u = Tensor::randn(&[b, 3], 0.5, &mut rng);
        let x = Tensor::randn(&[b, 3], 0.5, &mut rng);
        let cls: Vec<usize> = (0..b).map(|_| rng.below(2)).collect();
        let perm = rng.permutation(b);
        let take = |t: &Tensor| {
            let mut d = Vec::new();
            for &p in &perm {
                d.extend_from_slice(t.row(p));
            }
            Tensor::new(&[b, 3], d).unwrap()
        };
        let pc: Vec<usize> = perm.iter().map(|&p| cls[p]).collect();
        let direct = hybrid_field(&u, &x, &cls, &w).unwrap();
        let permuted = hybrid_field(&take(&u), &take(&x), &pc, &w).unwrap();
        prop_assert!(take(&direct.v_hyb).max_abs_diff(&permuted.v_hyb) <= 1e-6);
    }
}
