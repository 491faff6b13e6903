use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ltaug::cam::{eigencam_raw, normalize_map, threshold_masks, BinaryMask, CamMap};
use ltaug::eval::{frechet_distance, gaussian_stats, sparsity_report};
use ltaug::fusion::{fuse_sparse, smote_oversample};
use ltaug::models::{channelwise_softmax, sample_onehot, SparseLatent, SIMPLEX_TOL};
use ltaug::store::{partition_head_tail, synth_longtail, PartitionRule, SynthConfig};
use ltaug::tensor::{Dims, Grid, LatentTensor};
use ltaug::trainer::interaction_objective;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_tensor(seed: u64, d: Dims, lo: f64, hi: f64) -> LatentTensor {
    let mut r = rng(seed);
    LatentTensor::from_fn(d, |_, _, _| r.random_range(lo..hi))
}

fn simplex_tensor(seed: u64, d: Dims) -> LatentTensor {
    channelwise_softmax(&uniform_tensor(seed, d, -4.0, 4.0))
        .unwrap()
        .into_tensor()
}

fn mask(seed: u64, h: usize, w: usize) -> BinaryMask {
    let mut r = rng(seed);
    BinaryMask {
        h,
        w,
        data: (0..h * w).map(|_| r.random_bool(0.5)).collect(),
    }
}

fn dims() -> impl Strategy<Value = Dims> {
    (1usize..6, 1usize..6, 1usize..8).prop_map(|(h, w, c)| Dims::new(h, w, c))
}

/// Upper 0.001 quantile of chi-square via the Wilson-Hilferty cube
/// approximation.
fn chi2_critical(df: f64) -> f64 {
    let z = 3.090_232;
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn onehot_sampling_fits_its_distribution() {
    let mut r = rng(17);
    for trial in 0..5u64 {
        let c = 4 + trial as usize;
        let logits: Vec<f64> = (0..c).map(|_| r.random_range(-1.5..1.5)).collect();
        let p =
            channelwise_softmax(&LatentTensor::new(Dims::new(1, 1, c), logits).unwrap()).unwrap();
        let probs = p.tensor().data().to_vec();
        let draws = 10_000;
        let mut counts = vec![0usize; c];
        for s in 0..draws {
            counts[sample_onehot(&p, trial * 100_000 + s).choices()[0]] += 1;
        }
        let stat: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&o, &q)| {
                let e = q * draws as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        assert!(
            stat < chi2_critical((c - 1) as f64),
            "trial {trial}: chi2 = {stat}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn threshold_partition_is_disjoint_cover(theta in 0usize..250, seed in any::<u64>()) {
        let cfg = SynthConfig { head_count: 60, tail_count: 8, test_count: 2, ..SynthConfig::default() };
        let ds = synth_longtail(&cfg, seed).unwrap().dataset;
        let k = ds.num_classes();
        match partition_head_tail(&ds.manifest, &PartitionRule::Threshold(theta)) {
            Ok(p) => {
                prop_assert!(p.head.is_disjoint(&p.tail));
                let all: Vec<usize> = p.head.union(&p.tail).copied().collect();
                prop_assert_eq!(all, (0..k).collect::<Vec<_>>());
            }
            // every class on one side is rejected rather than returned
            Err(_) => prop_assert!(!(8..60).contains(&theta)),
        }
    }

    #[test]
    fn softmax_lands_on_simplex(d in dims(), seed in any::<u64>(), scale in 0.01f64..200.0) {
        let z = uniform_tensor(seed, d, -scale, scale);
        let p = channelwise_softmax(&z).unwrap();
        for px in p.tensor().data().chunks_exact(d.c) {
            prop_assert!((px.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
        }
    }

    #[test]
    fn objective_is_linear_and_monotone(
        lambda in 0.0f64..=1.0,
        a in 0.0f64..10.0,
        b in 0.0f64..10.0,
        da in 0.0f64..1.0,
        db in 0.0f64..1.0,
    ) {
        let f = |x, y| interaction_objective(lambda, x, y).unwrap();
        prop_assert!((f(a, b) - (lambda * a + (1.0 - lambda) * b)).abs() < 1e-12);
        prop_assert!(f(a + da, b) >= f(a, b));
        prop_assert!(f(a, b + db) >= f(a, b));
    }

    #[test]
    fn ordered_thresholds_give_disjoint_masks(
        h in 1usize..8, w in 1usize..8, seed in any::<u64>(),
        lo in 0.01f64..0.98, gap in 0.001f64..0.5,
    ) {
        let hi = (lo + gap).min(0.99);
        prop_assume!(lo < hi);
        let mut r = rng(seed);
        let m = CamMap { class: 0, map: Grid::new(h, w, (0..h * w).map(|_| r.random_range(0.0..=1.0)).collect()).unwrap() };
        let pair = threshold_masks(&m, hi, lo).unwrap();
        for p in 0..h * w {
            prop_assert!(!(pair.specific.data[p] && pair.generic.data[p]));
        }
    }

    #[test]
    fn cam_invariant_to_positive_scaling(d in dims(), seed in any::<u64>(), alpha in 0.01f64..100.0) {
        let a = uniform_tensor(seed, d, 0.0, 1.0);
        let scaled = LatentTensor::new(d, a.data().iter().map(|v| v * alpha).collect()).unwrap();
        let m1 = normalize_map(&eigencam_raw(&a, None).unwrap(), 0);
        let m2 = normalize_map(&eigencam_raw(&scaled, None).unwrap(), 0);
        for (x, y) in m1.map.data.iter().zip(&m2.map.data) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn fusion_copies_coordinates(d in dims(), seed in any::<u64>()) {
        let zt = simplex_tensor(seed, d);
        let zh = simplex_tensor(seed ^ 0x5555, d);
        let ms = mask(seed.wrapping_add(1), d.h, d.w);
        let mg = mask(seed.wrapping_add(2), d.h, d.w);
        let (f, _) = fuse_sparse(&zt, &zh, &ms, &mg, seed).unwrap();
        for p in 0..d.spatial() {
            let range = p * d.c..(p + 1) * d.c;
            let px = &f.data()[range.clone()];
            prop_assert!(px == &zt.data()[range.clone()] || px == &zh.data()[range]);
        }
        prop_assert!(SparseLatent::new(f).is_ok());
    }

    #[test]
    fn smote_stays_on_parent_segment(seed in any::<u64>(), n in 2usize..8, k in 1usize..5) {
        let d = Dims::new(2, 2, 3);
        let pool: Vec<LatentTensor> = (0..n).map(|i| uniform_tensor(seed.wrapping_add(i as u64), d, -3.0, 3.0)).collect();
        let refs: Vec<&LatentTensor> = pool.iter().collect();
        for s in smote_oversample(&refs, 10, k, seed).unwrap() {
            let x = pool[s.base].data();
            let y = pool[s.neighbor].data();
            prop_assert!((0.0..=1.0).contains(&s.u));
            for ((o, a), b) in s.tensor.data().iter().zip(x).zip(y) {
                prop_assert!(o >= &(a.min(*b) - 1e-12) && o <= &(a.max(*b) + 1e-12));
                prop_assert!((o - (a + s.u * (b - a))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frechet_symmetric_and_non_negative(seed in any::<u64>(), dim in 1usize..6, n in 3usize..20) {
        let mut r = rng(seed);
        let mut sample = |shift: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| shift + r.random_range(-1.0..1.0)).collect()).collect()
        };
        let a = gaussian_stats(&sample(0.0)).unwrap();
        let b = gaussian_stats(&sample(0.5)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6);
    }

    #[test]
    fn sparsity_entropy_bounded(d in dims(), seed in any::<u64>(), scale in 0.0f64..50.0) {
        let set: Vec<SparseLatent> = (0..3)
            .map(|i| channelwise_softmax(&uniform_tensor(seed.wrapping_add(i), d, -scale - 1e-9, scale + 1e-9)).unwrap())
            .collect();
        let rep = sparsity_report(&set);
        prop_assert!(rep.mean_entropy >= -1e-12);
        prop_assert!(rep.mean_entropy <= (d.c as f64).ln() + 1e-9);
    }
}
