mod common;

use common::{
    max_relative_error, random_network, random_params, random_simplex, reference_logits,
    reference_loss,
};
use mpkit::nn::{forward, loss_and_grad};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NETWORKS: usize = 100;
const MAX_PARAMS: usize = 500;
const TOLERANCE: f64 = 1e-4;

#[test]
fn engine_forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..50 {
        let spec = random_network(&mut rng, i % 2 == 1, MAX_PARAMS);
        let params = random_params(&mut rng, &spec);
        let x: Vec<f64> = (0..spec.input.len())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let ours = forward(&params, &spec, &x, None).unwrap();
        let reference = reference_logits(&params, &spec, &x);
        for (a, b) in ours.iter().zip(&reference) {
            assert!(
                (a - b).abs() <= 1e-12 * (1.0 + b.abs()),
                "{spec:?}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for i in 0..NETWORKS {
        let spec = random_network(&mut rng, i % 2 == 1, MAX_PARAMS);
        assert!(spec.num_params() <= MAX_PARAMS);
        let params = random_params(&mut rng, &spec);
        let batch = rng.random_range(1..=4);
        let d = spec.input.len();
        let k = spec.num_classes;
        let xs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let ys: Vec<Vec<f64>> = (0..batch).map(|_| random_simplex(&mut rng, k)).collect();
        let ws: Vec<f64> = (0..batch).map(|_| rng.random_range(0.1..2.0)).collect();
        let flat_x: Vec<f64> = xs.concat();
        let flat_y: Vec<f64> = ys.concat();
        let (loss, analytic) = loss_and_grad(&params, &spec, &flat_x, &flat_y, &ws, None).unwrap();
        let reference = reference_loss(&params, &spec, &xs, &ys, &ws);
        assert!((loss - reference).abs() <= 1e-10 * (1.0 + reference.abs()));
        let err = max_relative_error(
            &params,
            &analytic,
            |p| reference_loss(p, &spec, &xs, &ys, &ws),
            1e-6,
            1e-6,
        );
        assert!(
            err < TOLERANCE,
            "network {i} {spec:?}: relative error {err}"
        );
        worst = worst.max(err);
    }
    eprintln!("worst relative gradient error over {NETWORKS} networks: {worst:.3e}");
}
