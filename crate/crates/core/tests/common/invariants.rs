//! Property checks shared by the invariant tests and the acceptance report.
//! Each returns a short summary on success.

use mpkit::datasets::{dataloader, gen_synthetic_clusters, Dataset, LabeledExample};
use mpkit::margin::normalized_margin;
use mpkit::nn::{forward, Layer, ModelParams, NetworkSpec, StopRule, TrainConfig};
use mpkit::posterior::{ensemble_predict_batch, Algorithm, Ensemble, Provenance};
use mpkit::predictive::{
    sample_base_measure, sample_mixup, sample_pseudo_batch, AugmentationSet, BaseMeasure,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_network, random_params};

pub type Check = Result<String, String>;

fn on_simplex(label: &[f64]) -> bool {
    label.iter().all(|&v| v >= 0.0) && (label.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

/// Every label produced by Mixup, pseudo batches and base measures is a
/// probability vector.
pub fn simplex_labels() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ds = gen_synthetic_clusters(4);
    let measures = [
        BaseMeasure::PerturbedEmpirical { variance: 0.5 },
        BaseMeasure::UniformBox {
            lower: -3.0,
            upper: 3.0,
        },
        BaseMeasure::Mixup {
            alpha: 0.4,
            augment: AugmentationSet::none(),
        },
    ];
    let mut checked = 0;
    for alpha in [0.1, 1.0, 2.0] {
        for _ in 0..500 {
            let ex = sample_mixup(&ds.examples, alpha, &mut rng).map_err(|e| e.to_string())?;
            if !on_simplex(&ex.label) {
                return Err(format!("mixup label {:?} off the simplex", ex.label));
            }
            checked += 1;
        }
        let batch = sample_pseudo_batch(&ds.examples[..64], 200, alpha, &mut rng)
            .map_err(|e| e.to_string())?;
        for ex in &batch {
            if !on_simplex(&ex.label) {
                return Err(format!("pseudo label {:?} off the simplex", ex.label));
            }
            checked += 1;
        }
    }
    for bm in &measures {
        for _ in 0..500 {
            let ex = sample_base_measure(bm, &ds, &mut rng).map_err(|e| e.to_string())?;
            if !on_simplex(&ex.label) {
                return Err(format!("{bm:?} label {:?} off the simplex", ex.label));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} labels on the simplex"))
}

/// Each epoch's minibatches partition `0..n` with the requested sizes.
pub fn dataloader_partition() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..300 {
        let n = rng.random_range(0..400);
        let n_mb = rng.random_range(1..=64);
        let seed = rng.random();
        let batches = dataloader(n, n_mb, seed).map_err(|e| e.to_string())?;
        let mut seen = vec![false; n];
        for (b, batch) in batches.iter().enumerate() {
            let last = b + 1 == batches.len();
            if batch.is_empty() || batch.len() > n_mb || (!last && batch.len() != n_mb) {
                return Err(format!(
                    "n={n} n_mb={n_mb}: batch {b} has size {}",
                    batch.len()
                ));
            }
            for &i in batch {
                if i >= n || seen[i] {
                    return Err(format!(
                        "n={n} n_mb={n_mb}: index {i} repeated or out of range"
                    ));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) || batches.len() != n.div_ceil(n_mb) {
            return Err(format!("n={n} n_mb={n_mb}: not a partition"));
        }
    }
    Ok("300 random (n, n_mb, seed) epochs partition 0..n".into())
}

fn random_points<R: Rng>(rng: &mut R, spec: &NetworkSpec, n: usize) -> Dataset {
    let k = spec.num_classes;
    let examples = (0..n)
        .map(|_| {
            let x = (0..spec.input.len())
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            LabeledExample::one_hot(x, rng.random_range(0..k), k)
        })
        .collect();
    Dataset {
        examples,
        num_classes: k,
        shape: spec.input,
    }
}

fn bias_free<R: Rng>(rng: &mut R, conv: bool) -> NetworkSpec {
    let mut spec = random_network(rng, conv, 500);
    for layer in &mut spec.layers {
        match layer {
            Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => *bias = false,
            _ => {}
        }
    }
    spec
}

/// The normalized margin is unchanged by rescaling the parameters.
pub fn margin_scale_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..40 {
        let spec = bias_free(&mut rng, i % 2 == 1);
        let params = random_params(&mut rng, &spec);
        let ds = random_points(&mut rng, &spec, 20);
        let base = normalized_margin(&params, &spec, &ds).map_err(|e| e.to_string())?;
        for c in [0.1, 3.0, 17.0] {
            let scaled =
                normalized_margin(&params.scaled(c), &spec, &ds).map_err(|e| e.to_string())?;
            let rel = (scaled - base).abs() / base.abs().max(1e-300);
            worst = worst.max(rel);
            if rel > 1e-9 {
                return Err(format!("network {i}, c={c}: {base} vs {scaled}"));
            }
        }
    }
    Ok(format!("40 networks, worst relative change {worst:.2e}"))
}

/// Bias-free ReLU networks satisfy `f(c theta) = c^L f(theta)`.
pub fn homogeneity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for i in 0..40 {
        let spec = bias_free(&mut rng, i % 2 == 1);
        if !spec.is_homogeneous() {
            return Err(format!("bias-free network {i} reported as not homogeneous"));
        }
        let params = random_params(&mut rng, &spec);
        let x: Vec<f64> = (0..spec.input.len())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let base = forward(&params, &spec, &x, None).map_err(|e| e.to_string())?;
        for c in [0.5, 2.0, 7.0] {
            let out = forward(&params.scaled(c), &spec, &x, None).map_err(|e| e.to_string())?;
            let factor = c.powi(spec.degree() as i32);
            for (a, b) in out.iter().zip(&base) {
                let rel = (a - factor * b).abs() / (factor * b).abs().max(1e-12);
                worst = worst.max(rel);
                if rel > 1e-9 {
                    return Err(format!("network {i}, c={c}: {a} vs {}", factor * b));
                }
            }
        }
    }
    Ok(format!("40 networks, worst relative deviation {worst:.2e}"))
}

/// Reordering ensemble members leaves predictions bitwise unchanged.
pub fn permutation_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..20 {
        let spec = random_network(&mut rng, i % 2 == 1, 500);
        let b = rng.random_range(2..=7);
        let members: Vec<ModelParams> = (0..b).map(|_| random_params(&mut rng, &spec)).collect();
        let provenance = Provenance {
            algorithm: Algorithm::De,
            train: TrainConfig {
                learning_rate: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
                stop: StopRule::Epochs { epochs: 0 },
                minibatch_size: 1,
                seed: 0,
            },
            seed: 0,
            mc_passes: None,
        };
        let ens = Ensemble::new(spec.clone(), members.clone(), provenance.clone())
            .map_err(|e| e.to_string())?;
        let ds = random_points(&mut rng, &spec, 16);
        let x = ds.features_flat();
        let base = ensemble_predict_batch(&ens, &x, ds.len(), None).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let other = Ensemble::new(spec.clone(), shuffled, provenance.clone())
                .map_err(|e| e.to_string())?;
            let got =
                ensemble_predict_batch(&other, &x, ds.len(), None).map_err(|e| e.to_string())?;
            if got != base {
                return Err(format!("ensemble {i}: prediction depends on member order"));
            }
        }
    }
    Ok("20 ensembles x 5 permutations, bitwise equal".into())
}
