//! Labeled datasets: synthetic generators, evaluation grids, file loaders and
//! the epoch-permuted minibatch loader.

mod idx;
mod tabular;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use idx::{load_idx, parse_idx};
pub use tabular::{load_csv, load_csv_with_classes, write_csv};

use crate::error::{Error, Result};
use crate::nn::{argmax, FeatureShape};

/// Tolerance on `sum(label) == 1` for soft labels.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Features plus a soft label (a probability vector over the classes).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: Vec<f64>,
}

impl LabeledExample {
    pub fn new(features: Vec<f64>, label: Vec<f64>) -> Self {
        LabeledExample { features, label }
    }

    pub fn one_hot(features: Vec<f64>, class: usize, num_classes: usize) -> Self {
        let mut label = vec![0.0; num_classes];
        label[class] = 1.0;
        LabeledExample { features, label }
    }

    /// Hard class of the label (lowest index on ties).
    pub fn class(&self) -> usize {
        argmax(&self.label)
    }
}

pub fn check_simplex(label: &[f64]) -> Result<()> {
    if let Some(bad) = label.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidLabel(format!(
            "entry {bad} is not a probability"
        )));
    }
    let total: f64 = label.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidLabel(format!(
            "entries sum to {total}, not 1"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub num_classes: usize,
    pub shape: FeatureShape,
}

impl Dataset {
    /// Builds a dataset and checks its invariants.
    pub fn new(
        examples: Vec<LabeledExample>,
        num_classes: usize,
        shape: FeatureShape,
    ) -> Result<Self> {
        let ds = Dataset {
            examples,
            num_classes,
            shape,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("a dataset needs at least 2 classes"));
        }
        let d = self.shape.len();
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.features.len() != d {
                return Err(Error::invalid(format!(
                    "example {i} has {} features, expected {d}",
                    ex.features.len()
                )));
            }
            if ex.label.len() != self.num_classes {
                return Err(Error::InvalidLabel(format!(
                    "example {i} has {} label entries, expected {}",
                    ex.label.len(),
                    self.num_classes
                )));
            }
            check_simplex(&ex.label)
                .map_err(|e| Error::InvalidLabel(format!("example {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.examples.iter().map(LabeledExample::class).collect()
    }

    pub fn features_flat(&self) -> Vec<f64> {
        self.examples
            .iter()
            .flat_map(|e| e.features.iter().copied())
            .collect()
    }

    /// Per-dimension (min, max) of the features.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let d = self.shape.len();
        let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for ex in &self.examples {
            for (bd, &v) in b.iter_mut().zip(&ex.features) {
                bd.0 = bd.0.min(v);
                bd.1 = bd.1.max(v);
            }
        }
        b
    }

    /// First `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            examples: self.examples.iter().take(n).cloned().collect(),
            num_classes: self.num_classes,
            shape: self.shape,
        }
    }

    /// Standardizes every feature with one global mean and standard deviation,
    /// returning the constants used.
    pub fn standardize(&mut self) -> (f64, f64) {
        let count = (self.len() * self.shape.len()) as f64;
        if count == 0.0 {
            return (0.0, 1.0);
        }
        let mean = self.examples.iter().flat_map(|e| &e.features).sum::<f64>() / count;
        let var = self
            .examples
            .iter()
            .flat_map(|e| &e.features)
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / count;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        self.apply_standardization(mean, std);
        (mean, std)
    }

    pub fn apply_standardization(&mut self, mean: f64, std: f64) {
        for ex in &mut self.examples {
            for v in &mut ex.features {
                *v = (*v - mean) / std;
            }
        }
    }
}

/// Splits off a held-out set: a seeded permutation puts
/// `round(holdout * n)` examples in the second part, order preserved
/// within each part.
pub fn train_test_split(dataset: &Dataset, holdout: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&holdout) {
        return Err(Error::invalid(format!(
            "holdout fraction {holdout} outside [0, 1)"
        )));
    }
    let n = dataset.len();
    let n_test = (holdout * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let pick = |want: bool| Dataset {
        examples: dataset
            .examples
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t == want)
            .map(|(e, _)| e.clone())
            .collect(),
        num_classes: dataset.num_classes,
        shape: dataset.shape,
    };
    Ok((pick(false), pick(true)))
}

/// Cluster sizes of the 2-D synthetic task.
pub const SYNTHETIC_CLUSTER_SIZES: [usize; 5] = [20, 50, 100, 200, 500];
/// Cluster centers are drawn uniformly from `[-CENTER_BOX, CENTER_BOX]^2`.
pub const SYNTHETIC_CENTER_BOX: f64 = 10.0;

/// Five 2-D Gaussian clusters with unit covariance, one class each, of sizes
/// 20, 50, 100, 200 and 500.
pub fn gen_synthetic_clusters(seed: u64) -> Dataset {
    let (ds, _) = gen_synthetic_clusters_with_centers(seed);
    ds
}

/// Same as [`gen_synthetic_clusters`], also returning the cluster centers.
pub fn gen_synthetic_clusters_with_centers(seed: u64) -> (Dataset, Vec<[f64; 2]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = SYNTHETIC_CLUSTER_SIZES.len();
    let centers: Vec<[f64; 2]> = (0..k)
        .map(|_| {
            [
                rng.random_range(-SYNTHETIC_CENTER_BOX..=SYNTHETIC_CENTER_BOX),
                rng.random_range(-SYNTHETIC_CENTER_BOX..=SYNTHETIC_CENTER_BOX),
            ]
        })
        .collect();
    let mut examples = Vec::with_capacity(SYNTHETIC_CLUSTER_SIZES.iter().sum());
    for (class, (&size, c)) in SYNTHETIC_CLUSTER_SIZES.iter().zip(&centers).enumerate() {
        for _ in 0..size {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            examples.push(LabeledExample::one_hot(
                vec![c[0] + dx, c[1] + dy],
                class,
                k,
            ));
        }
    }
    let ds = Dataset {
        examples,
        num_classes: k,
        shape: FeatureShape::Flat { dim: 2 },
    };
    (ds, centers)
}

/// A regular lattice of evaluation points.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub resolution: usize,
    /// Row-major: the first coordinate varies slowest.
    pub points: Vec<Vec<f64>>,
}

impl EvalGrid {
    pub fn from_bounds(lower: Vec<f64>, upper: Vec<f64>, resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::invalid("grid resolution must be at least 2"));
        }
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid(
                "grid bounds must have matching nonzero length",
            ));
        }
        let dims = lower.len();
        let axes: Vec<Vec<f64>> = lower
            .iter()
            .zip(&upper)
            .map(|(&lo, &hi)| {
                let step = (hi - lo) / (resolution - 1) as f64;
                (0..resolution)
                    .map(|i| {
                        if i + 1 == resolution {
                            hi
                        } else {
                            lo + step * i as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let total = resolution.pow(dims as u32);
        let mut points = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = vec![0.0; dims];
            for d in (0..dims).rev() {
                p[d] = axes[d][rem % resolution];
                rem /= resolution;
            }
            points.push(p);
        }
        Ok(EvalGrid {
            lower,
            upper,
            resolution,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Lattice over the data bounding box expanded by `padding` on every side.
pub fn make_grid(dataset: &Dataset, padding: f64, resolution: usize) -> Result<EvalGrid> {
    if dataset.is_empty() {
        return Err(Error::invalid(
            "cannot build a grid around an empty dataset",
        ));
    }
    let (lower, upper) = dataset
        .bounds()
        .into_iter()
        .map(|(lo, hi)| (lo - padding, hi + padding))
        .unzip();
    EvalGrid::from_bounds(lower, upper, resolution)
}

/// Minibatches of indices for one epoch: a permutation of `0..n` seeded by
/// `epoch_seed`, cut into contiguous chunks of `n_mb` (the last may be short).
pub fn dataloader(n: usize, n_mb: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_mb == 0 {
        return Err(Error::invalid("minibatch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    Ok(order.chunks(n_mb).map(<[usize]>::to_vec).collect())
}

/// Summary written alongside generated or converted datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub source: String,
    pub num_examples: usize,
    pub num_classes: usize,
    pub shape: FeatureShape,
    pub seed: Option<u64>,
    pub standardization: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cluster_centers: Vec<[f64; 2]>,
}
