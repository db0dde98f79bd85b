//! DP-MP with a uniform base measure spreads uncertainty into empty regions
//! of the input space, so its grid uncertainty exceeds the Bayesian
//! bootstrap's on the same task.

use mpkit::datasets::{gen_synthetic_clusters, make_grid, Dataset};
use mpkit::metrics::predictive_uncertainty;
use mpkit::nn::{NetworkSpec, StopRule, TrainConfig};
use mpkit::posterior::{ensemble_predict_batch, train_ensemble, Algorithm};
use mpkit::predictive::BaseMeasure;

const MEMBERS: usize = 10;
const EPOCHS: usize = 1000;
const RESOLUTION: usize = 50;
const PADDING: f64 = 1.0;

fn mean_grid_uncertainty(ds: &Dataset, algorithm: &Algorithm) -> f64 {
    let spec = NetworkSpec::mlp(2, &[16, 32, 16], ds.num_classes, false);
    let cfg = TrainConfig {
        learning_rate: 0.5,
        momentum: 0.0,
        weight_decay: 0.0,
        stop: StopRule::Epochs { epochs: EPOCHS },
        minibatch_size: ds.len(),
        seed: 0,
    };
    let trained = train_ensemble(ds, &spec, &cfg, algorithm, MEMBERS, 1).unwrap();
    let grid = make_grid(ds, PADDING, RESOLUTION).unwrap();
    let inputs: Vec<f64> = grid.points.iter().flatten().copied().collect();
    let probs = ensemble_predict_batch(&trained.ensemble, &inputs, grid.len(), None).unwrap();
    let total: f64 = probs
        .iter()
        .map(|p| predictive_uncertainty(p, ds.num_classes).unwrap())
        .sum();
    total / probs.len() as f64
}

#[test]
fn uniform_box_dp_is_more_uncertain_than_bb() {
    let mut ds = gen_synthetic_clusters(0);
    ds.standardize();
    let (lower, upper) = ds
        .bounds()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(a, b)| {
            (lo.min(a), hi.max(b))
        });
    let bb = mean_grid_uncertainty(
        &ds,
        &Algorithm::Bb {
            stabilized: false,
            bound_m: None,
        },
    );
    let dp = mean_grid_uncertainty(
        &ds,
        &Algorithm::DpMp {
            base_measure: BaseMeasure::UniformBox {
                lower: lower - PADDING,
                upper: upper + PADDING,
            },
            c: 1.0,
            t: ds.len(),
        },
    );
    eprintln!("mean grid uncertainty: BB {bb:.4}, DP-MP {dp:.4}");
    assert!(dp > bb, "DP-MP {dp} should exceed BB {bb}");
}
