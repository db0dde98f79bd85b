//! WebAssembly bindings for a static demo page: uncertainty landscapes on the
//! five-cluster task, draws from the Mixup predictive and DP weight vectors.
//!
//! The `*_native` functions hold the logic and are tested on the host; the
//! `#[wasm_bindgen]` exports only convert errors.

use mpkit::datasets::{gen_synthetic_clusters, make_grid, Dataset};
use mpkit::metrics::predictive_uncertainty;
use mpkit::nn::{NetworkSpec, StopRule, TrainConfig};
use mpkit::posterior::{
    ensemble_predict_batch, member_rng, train_de, train_mixup_mp, Concentration, PredictiveConfig,
    Stream,
};
use mpkit::predictive::{sample_dp_weights, sample_pseudo_batch, AugmentationSet};
use wasm_bindgen::prelude::*;

/// Largest grid side accepted from the page.
pub const MAX_RESOLUTION: usize = 200;
/// Largest ensemble accepted from the page.
pub const MAX_MEMBERS: usize = 16;
const HIDDEN: [usize; 3] = [16, 32, 16];
const LEARNING_RATE: f64 = 0.5;
const GRID_PADDING: f64 = 1.0;

fn task(seed: u64) -> Dataset {
    let mut ds = gen_synthetic_clusters(seed);
    ds.standardize();
    ds
}

/// Uncertainty over a square grid around the standardized training data.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    resolution: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    uncertainty: Vec<f64>,
    observations: Vec<f64>,
}

#[wasm_bindgen]
impl Landscape {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// `[x1_min, x2_min]` of the grid.
    pub fn lower(&self) -> Vec<f64> {
        self.lower.clone()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.upper.clone()
    }

    /// Row-major values in `[0, 1]`, first coordinate varying slowest.
    pub fn uncertainty(&self) -> Vec<f64> {
        self.uncertainty.clone()
    }

    /// Training points as `x1, x2, class` triples.
    pub fn observations(&self) -> Vec<f64> {
        self.observations.clone()
    }

    pub fn mean_uncertainty(&self) -> f64 {
        self.uncertainty.iter().sum::<f64>() / self.uncertainty.len() as f64
    }
}

/// Trains `members` networks with concentration `r` (0 is a deep ensemble,
/// infinity is pure Mixup) and evaluates them on a grid.
pub fn landscape_native(
    r: f64,
    members: usize,
    epochs: usize,
    resolution: usize,
    seed: u64,
) -> Result<Landscape, String> {
    if members == 0 || members > MAX_MEMBERS {
        return Err(format!("members must be between 1 and {MAX_MEMBERS}"));
    }
    if !(2..=MAX_RESOLUTION).contains(&resolution) {
        return Err(format!("resolution must be between 2 and {MAX_RESOLUTION}"));
    }
    let r = Concentration::from_f64(r).map_err(|e| e.to_string())?;
    let ds = task(seed);
    let spec = NetworkSpec::mlp(2, &HIDDEN, ds.num_classes, false);
    let cfg = TrainConfig {
        learning_rate: LEARNING_RATE,
        momentum: 0.0,
        weight_decay: 0.0,
        stop: StopRule::Epochs { epochs },
        minibatch_size: ds.len(),
        seed,
    };
    let trained = if r.is_zero() {
        train_de(&ds, &spec, &cfg, members, 1)
    } else {
        let pcfg = PredictiveConfig {
            r,
            alpha: 1.0,
            t_mb: None,
            augment: AugmentationSet::none(),
        };
        train_mixup_mp(&ds, &spec, &cfg, &pcfg, members, 1)
    }
    .map_err(|e| e.to_string())?;
    let grid = make_grid(&ds, GRID_PADDING, resolution).map_err(|e| e.to_string())?;
    let inputs: Vec<f64> = grid.points.iter().flatten().copied().collect();
    let probs = ensemble_predict_batch(&trained.ensemble, &inputs, grid.len(), None)
        .map_err(|e| e.to_string())?;
    let uncertainty = probs
        .iter()
        .map(|p| predictive_uncertainty(p, ds.num_classes))
        .collect::<mpkit::error::Result<Vec<f64>>>()
        .map_err(|e| e.to_string())?;
    let observations = ds
        .examples
        .iter()
        .flat_map(|e| [e.features[0], e.features[1], e.class() as f64])
        .collect();
    Ok(Landscape {
        resolution,
        lower: grid.lower,
        upper: grid.upper,
        uncertainty,
        observations,
    })
}

/// Draws `count` pseudo-observations from the Mixup predictive as rows
/// `x1, x2, p0..p4` (soft labels over the five classes).
pub fn finf_samples_native(alpha: f64, count: usize, seed: u64) -> Result<Vec<f64>, String> {
    let ds = task(seed);
    let mut rng = member_rng(seed, 0, Stream::Pseudo);
    let batch =
        sample_pseudo_batch(&ds.examples, count, alpha, &mut rng).map_err(|e| e.to_string())?;
    Ok(batch
        .iter()
        .flat_map(|e| e.features.iter().chain(&e.label).copied())
        .collect())
}

/// `draws` DP weight vectors of length `n + n` (observations, then `n`
/// base-measure atoms), concatenated.
pub fn dp_weights_native(n: usize, c: f64, draws: usize, seed: u64) -> Result<Vec<f64>, String> {
    let mut rng = member_rng(seed, 0, Stream::Weights);
    let mut out = Vec::with_capacity(draws * 2 * n);
    for _ in 0..draws {
        let w = sample_dp_weights(n, c, n, &mut rng).map_err(|e| e.to_string())?;
        out.extend_from_slice(&w.weights);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn landscape(
    r: f64,
    members: usize,
    epochs: usize,
    resolution: usize,
    seed: u64,
) -> Result<Landscape, JsError> {
    landscape_native(r, members, epochs, resolution, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn finf_samples(alpha: f64, count: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    finf_samples_native(alpha, count, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn dp_weights(n: usize, c: f64, draws: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    dp_weights_native(n, c, draws, seed).map_err(|e| JsError::new(&e))
}

/// Observations of the demo task as `x1, x2, class` triples.
#[wasm_bindgen]
pub fn observations(seed: u64) -> Vec<f64> {
    task(seed)
        .examples
        .iter()
        .flat_map(|e| [e.features[0], e.features[1], e.class() as f64])
        .collect()
}
