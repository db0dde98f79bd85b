use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datasets::check_simplex;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sample mean with its standard error.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Sample variance with a standard error from the fourth central moment.
fn var_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    (m2 * n / (n - 1.0), ((m4 - m2 * m2) / n).sqrt())
}

fn assert_within(label: &str, (est, se): (f64, f64), truth: f64, k: f64) {
    assert!(
        (est - truth).abs() <= k * se,
        "{label}: estimate {est} vs {truth} exceeds {k} SE (se = {se})"
    );
}

#[test]
fn bb_trivial_cases() {
    let w = sample_bb_weights(1, &mut rng(0)).unwrap();
    assert_eq!(w.weights, vec![1.0]);
    assert_eq!(w.normalization, Normalization::SumsToOne);
    assert!(sample_bb_weights(0, &mut rng(0)).is_err());
    let mut r = rng(1);
    for n in [2, 7, 100, 1000] {
        let w = sample_bb_weights(n, &mut r).unwrap();
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert!(w.weights.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn bb_dirichlet_moments() {
    let mut r = rng(2);
    let draws: Vec<Vec<f64>> = (0..50_000)
        .map(|_| sample_bb_weights(5, &mut r).unwrap().weights)
        .collect();
    let var_truth = 0.2 * 0.8 / 6.0;
    for i in 0..5 {
        let col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        assert_within("mean", mean_se(&col), 0.2, 4.0);
        assert_within("variance", var_se(&col), var_truth, 4.0);
    }
}

#[test]
fn stabilized_weights_are_bounded() {
    assert_eq!(
        sample_stabilized_bb_weights(1, 3.0, &mut rng(0))
            .unwrap()
            .weights,
        vec![1.0]
    );
    assert!(sample_stabilized_bb_weights(10, 10.0, &mut rng(0)).is_err());
    let floor = stabilized_weight_floor(10, 20.0);
    assert!((floor - 0.1 / 2.0).abs() < 1e-15);
    let mut r = rng(3);
    let mut min_seen = f64::INFINITY;
    for _ in 0..10_000 {
        let w = sample_stabilized_bb_weights(10, 20.0, &mut r).unwrap();
        assert!((w.sum() - 1.0).abs() < 1e-12);
        let m = w.weights.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(m >= floor * (1.0 - 1e-12));
        min_seen = min_seen.min(m);
    }
    assert!(min_seen > 0.005, "min weight {min_seen}");
}

#[test]
fn dp_with_zero_concentration_matches_bb() {
    for seed in 0..20 {
        let dp = sample_dp_weights(13, 0.0, 7, &mut rng(seed)).unwrap();
        let bb = sample_bb_weights(13, &mut rng(seed)).unwrap();
        assert_eq!(dp.len(), 20);
        assert!(dp.weights[13..].iter().all(|&w| w == 0.0));
        assert_eq!(&dp.weights[..13], bb.weights.as_slice());
    }
    assert!(sample_dp_weights(0, 1.0, 1, &mut rng(0)).is_err());
    assert!(sample_dp_weights(1, 1.0, 0, &mut rng(0)).is_err());
    assert!(sample_dp_weights(1, -1.0, 1, &mut rng(0)).is_err());
}

#[test]
fn dp_moments() {
    for (n, c) in [(10usize, 1.0f64), (100, 10.0)] {
        let t = n;
        let mut r = rng(n as u64);
        let mut tail = Vec::with_capacity(50_000);
        let mut first = Vec::with_capacity(50_000);
        let mut last_obs = Vec::with_capacity(50_000);
        for _ in 0..50_000 {
            let w = sample_dp_weights(n, c, t, &mut r).unwrap();
            assert!((w.sum() - 1.0).abs() < 1e-12);
            tail.push(w.weights[n..].iter().sum::<f64>());
            first.push(w.weights[0]);
            last_obs.push(w.weights[n - 1]);
        }
        assert_within("tail mass", mean_se(&tail), c / (n as f64 + c), 4.0);
        assert_within("w_1", mean_se(&first), 1.0 / (n as f64 + c), 4.0);
        assert_within("w_n", mean_se(&last_obs), 1.0 / (n as f64 + c), 4.0);
    }
}

#[test]
fn beta_uniform_for_alpha_one() {
    let mut r = rng(5);
    let mut xs: Vec<f64> = (0..50_000)
        .map(|_| sample_beta(1.0, &mut r).unwrap())
        .collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS statistic {ks}");
}

#[test]
fn beta_moments() {
    for alpha in [0.1, 1.0, 2.0] {
        let mut r = rng(6);
        let xs: Vec<f64> = (0..50_000)
            .map(|_| sample_beta(alpha, &mut r).unwrap())
            .collect();
        assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
        assert_within("beta mean", mean_se(&xs), 0.5, 4.0);
        assert_within(
            "beta var",
            var_se(&xs),
            1.0 / (4.0 * (2.0 * alpha + 1.0)),
            4.0,
        );
    }
    assert!(sample_beta(0.0, &mut rng(0)).is_err());
    assert!(sample_beta(-1.0, &mut rng(0)).is_err());
}

#[test]
fn tiny_alpha_does_not_underflow() {
    let mut r = rng(7);
    for _ in 0..1000 {
        let l = sample_beta(1e-3, &mut r).unwrap();
        assert!(l.is_finite() && (0.0..=1.0).contains(&l));
    }
}

fn ex(f: &[f64], class: usize, k: usize) -> LabeledExample {
    LabeledExample::one_hot(f.to_vec(), class, k)
}

#[test]
fn mixup_pair_cases() {
    let a = ex(&[1.0, -2.0], 0, 3);
    let b = ex(&[0.3, 5.0], 1, 3);
    assert_eq!(mixup_pair(&a, &b, 1.0).unwrap(), a);
    assert_eq!(mixup_pair(&a, &a, 0.37).unwrap(), a);
    assert_eq!(mixup_pair(&a, &b, 0.5).unwrap().label, vec![0.5, 0.5, 0.0]);
    assert!(mixup_pair(&a, &ex(&[1.0], 0, 3), 0.5).is_err());
    assert!(mixup_pair(&a, &b, 1.5).is_err());
}

#[test]
fn sample_mixup_cases() {
    let single = vec![ex(&[3.0, 4.0], 1, 2)];
    let mut r = rng(8);
    for alpha in [0.2, 1.0, 5.0] {
        assert_eq!(sample_mixup(&single, alpha, &mut r).unwrap(), single[0]);
    }
    assert!(sample_mixup(&[], 1.0, &mut r).is_err());

    let pair = vec![ex(&[0.0], 0, 2), ex(&[1.0], 1, 2)];
    let xs: Vec<f64> = (0..10_000)
        .map(|_| {
            let z = sample_mixup(&pair, 1.0, &mut r).unwrap();
            assert!((z.label.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            z.features[0]
        })
        .collect();
    assert_within("mixup midpoint", mean_se(&xs), 0.5, 4.0);
}

#[test]
fn samplers_are_reproducible() {
    let data = vec![ex(&[0.0, 1.0], 0, 2), ex(&[2.0, -1.0], 1, 2)];
    let run = |seed| {
        let mut r = rng(seed);
        let w = sample_dp_weights(5, 2.0, 3, &mut r).unwrap();
        let z = sample_pseudo_batch(&data, 4, 0.4, &mut r).unwrap();
        (w, z)
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9).0, run(10).0);
}

fn image(c: usize, h: usize, w: usize) -> (Vec<f64>, FeatureShape) {
    let shape = FeatureShape::Image {
        channels: c,
        height: h,
        width: w,
    };
    ((0..c * h * w).map(|i| i as f64 + 1.0).collect(), shape)
}

#[test]
fn empty_augmentation_is_identity() {
    let (f, shape) = image(1, 4, 4);
    let z = LabeledExample::new(f, vec![0.25, 0.75]);
    assert_eq!(
        sample_h_aug(&z, &AugmentationSet::none(), &shape, &mut rng(0)),
        z
    );
}

#[test]
fn flip_is_an_involution() {
    let (f, shape) = image(3, 5, 6);
    let z = LabeledExample::new(f, vec![1.0, 0.0]);
    let flip = AugmentationSet(vec![Augmentation::HorizontalFlip { p: 1.0 }]);
    let once = sample_h_aug(&z, &flip, &shape, &mut rng(0));
    assert_ne!(once.features, z.features);
    assert_eq!(once.features[0], 6.0);
    assert_eq!(once.label, z.label);
    assert_eq!(sample_h_aug(&once, &flip, &shape, &mut rng(1)), z);
}

#[test]
fn pad_crop_offsets_are_uniform() {
    let (f, shape) = image(1, 28, 28);
    let z = LabeledExample::new(f, vec![1.0]);
    let aug = AugmentationSet(vec![Augmentation::PadCrop { pad: 4 }]);
    let mut counts = [[0usize; 9]; 9];
    let mut r = rng(11);
    let draws = 10_000;
    for _ in 0..draws {
        let out = sample_h_aug(&z, &aug, &shape, &mut r);
        assert_eq!(out.features.len(), 784);
        assert_eq!(out.label, z.label);
        // The centre pixel is always inside the source, so its value names the offset.
        let src = out.features[14 * 28 + 14] as usize - 1;
        let (dy, dx) = (src / 28 + 4 - 14, src % 28 + 4 - 14);
        counts[dy][dx] += 1;
    }
    let expected = draws as f64 / 81.0;
    let chi2: f64 = counts
        .iter()
        .flatten()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 0.999 quantile of chi-square with 80 degrees of freedom.
    assert!(chi2 < 124.84, "chi-square {chi2}");
}

#[test]
fn pad_crop_zero_fills() {
    let (f, shape) = image(1, 3, 3);
    assert_eq!(
        shift_image(&f, &shape, 1, -1),
        vec![0.0, 4.0, 5.0, 0.0, 7.0, 8.0, 0.0, 0.0, 0.0]
    );
}

#[test]
fn augmentation_validation() {
    let flat = FeatureShape::Flat { dim: 2 };
    assert!(AugmentationSet::standard_image().validate(&flat).is_err());
    assert!(Augmentation::GaussianJitter { variance: 1.0 }
        .validate(&flat)
        .is_ok());
    assert!(Augmentation::GaussianJitter { variance: -1.0 }
        .validate(&flat)
        .is_err());
    let (_, img) = image(1, 4, 4);
    assert!(Augmentation::HorizontalFlip { p: 1.5 }
        .validate(&img)
        .is_err());
    assert!(AugmentationSet::standard_image().validate(&img).is_ok());
}

#[test]
fn pseudo_batch_cases() {
    let mut r = rng(12);
    let batch = vec![
        ex(&[0.0, 5.0], 0, 3),
        ex(&[1.0, -5.0], 1, 3),
        ex(&[-2.0, 0.0], 2, 3),
    ];
    assert!(sample_pseudo_batch(&batch, 0, 1.0, &mut r)
        .unwrap()
        .is_empty());
    let one = &batch[..1];
    assert_eq!(
        sample_pseudo_batch(one, 5, 1.0, &mut r).unwrap(),
        vec![batch[0].clone(); 5]
    );
    for z in sample_pseudo_batch(&batch, 2000, 0.3, &mut r).unwrap() {
        assert!((-2.0..=1.0).contains(&z.features[0]));
        assert!((-5.0..=5.0).contains(&z.features[1]));
        check_simplex(&z.label).unwrap();
    }
}

fn small_dataset() -> Dataset {
    Dataset::new(
        vec![ex(&[1.0, 2.0], 0, 5), ex(&[-3.0, 0.5], 4, 5)],
        5,
        FeatureShape::Flat { dim: 2 },
    )
    .unwrap()
}

#[test]
fn perturbed_empirical() {
    let ds = small_dataset();
    let mut r = rng(13);
    let bm = BaseMeasure::PerturbedEmpirical { variance: 0.0 };
    for _ in 0..50 {
        let z = sample_base_measure(&bm, &ds, &mut r).unwrap();
        assert!(ds.examples.contains(&z));
    }
    let one = ds.head(1);
    let bm = BaseMeasure::PerturbedEmpirical { variance: 4.0 };
    let draws: Vec<LabeledExample> = (0..50_000)
        .map(|_| sample_base_measure(&bm, &one, &mut r).unwrap())
        .collect();
    assert!(draws.iter().all(|z| z.label == one.examples[0].label));
    for d in 0..2 {
        let col: Vec<f64> = draws.iter().map(|z| z.features[d]).collect();
        assert_within("perturbation variance", var_se(&col), 4.0, 4.0);
    }
    let empty = Dataset {
        examples: vec![],
        ..ds
    };
    assert!(sample_base_measure(&bm, &empty, &mut r).is_err());
}

#[test]
fn uniform_box() {
    let ds = small_dataset();
    let bm = BaseMeasure::UniformBox {
        lower: -15.0,
        upper: 15.0,
    };
    let mut r = rng(14);
    let mut seen = [false; 5];
    for _ in 0..2000 {
        let z = sample_base_measure(&bm, &ds, &mut r).unwrap();
        assert_eq!(z.features.len(), 2);
        assert!(z.features.iter().all(|v| (-15.0..=15.0).contains(v)));
        assert_eq!(z.label.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(z.label.iter().sum::<f64>(), 1.0);
        seen[z.class()] = true;
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn mixup_measure_stays_in_bounding_box() {
    let ds = small_dataset();
    let bm = BaseMeasure::Mixup {
        alpha: 0.5,
        augment: AugmentationSet::none(),
    };
    let mut r = rng(15);
    for _ in 0..2000 {
        let z = sample_base_measure(&bm, &ds, &mut r).unwrap();
        assert!((-3.0..=1.0).contains(&z.features[0]));
        assert!((0.5..=2.0).contains(&z.features[1]));
        check_simplex(&z.label).unwrap();
    }
}

#[test]
fn config_round_trip() {
    let bm = BaseMeasure::Mixup {
        alpha: 1.0,
        augment: AugmentationSet::standard_image(),
    };
    let json = serde_json::to_string(&bm).unwrap();
    assert_eq!(serde_json::from_str::<BaseMeasure>(&json).unwrap(), bm);
    assert!(serde_json::from_str::<Augmentation>(r#"{"kind":"pad-crop","pad":2,"x":1}"#).is_err());
}
