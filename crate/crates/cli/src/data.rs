//! Loading the datasets a config describes.

use std::path::Path;

use mpkit::datasets::{
    gen_synthetic_clusters_with_centers, load_csv_with_classes, load_idx, train_test_split, Dataset,
};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, RunConfig, SourceKind};
use crate::{Failure, Outcome};

/// Name of the preprocessing record stored with an ensemble.
pub const PREPROCESSING_FILE: &str = "preprocessing.json";
const DEFAULT_LABEL_COLUMN: &str = "label";

/// Feature standardization applied before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocessing {
    pub standardization: Option<(f64, f64)>,
}

impl Preprocessing {
    pub fn apply(&self, ds: &mut Dataset) {
        if let Some((mean, std)) = self.standardization {
            ds.apply_standardization(mean, std);
        }
    }

    /// Maps a standardized coordinate back to raw feature units.
    pub fn raw(&self, v: f64) -> f64 {
        match self.standardization {
            Some((mean, std)) => v * std + mean,
            None => v,
        }
    }

    pub fn load(dir: &Path) -> Outcome<Self> {
        let path = dir.join(PREPROCESSING_FILE);
        if !path.exists() {
            return Ok(Preprocessing {
                standardization: None,
            });
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
    }
}

/// Raw train/test data before preprocessing.
#[derive(Debug, Clone)]
pub struct RawData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub seed: Option<u64>,
    pub cluster_centers: Vec<[f64; 2]>,
}

impl RawData {
    /// Standardization constants from the training set, if requested.
    pub fn preprocessing(&self, cfg: &DatasetConfig) -> Preprocessing {
        let standardization = cfg.standardize.then(|| self.train.clone().standardize());
        Preprocessing { standardization }
    }

    /// Train and test sets with preprocessing applied; a missing test set
    /// falls back to the training set.
    pub fn prepared(&self, pre: &Preprocessing) -> (Dataset, Dataset) {
        let mut train = self.train.clone();
        let mut test = self.test.clone().unwrap_or_else(|| self.train.clone());
        pre.apply(&mut train);
        pre.apply(&mut test);
        (train, test)
    }
}

pub fn load_raw(cfg: &RunConfig) -> Outcome<RawData> {
    let d = &cfg.dataset;
    d.validate()?;
    let label_column = d.label_column.as_deref().unwrap_or(DEFAULT_LABEL_COLUMN);
    let (mut train, mut test, seed, centers) = match d.source {
        SourceKind::Synthetic => {
            let seed = d.data_seed.unwrap_or(cfg.seed);
            let (ds, centers) = gen_synthetic_clusters_with_centers(seed);
            (ds, None, Some(seed), centers)
        }
        SourceKind::Csv => {
            let path = d.path.as_ref().expect("validated");
            let mut train = load_csv_with_classes(path, label_column, d.num_classes)?;
            let mut test = match &d.test_path {
                Some(p) => Some(load_csv_with_classes(p, label_column, d.num_classes)?),
                None => None,
            };
            // Both files must agree on K when it is inferred.
            if let Some(t) = &mut test {
                let k = train.num_classes.max(t.num_classes);
                train.num_classes = k;
                t.num_classes = k;
                for ex in train.examples.iter_mut().chain(t.examples.iter_mut()) {
                    ex.label.resize(k, 0.0);
                }
            }
            (train, test, None, Vec::new())
        }
        SourceKind::Idx => {
            let load = |images: &Path, labels: &Path| -> Outcome<Dataset> {
                let ds = load_idx(images, labels)?;
                Ok(match d.num_classes {
                    Some(k) => ds.with_num_classes(k)?,
                    None => ds,
                })
            };
            let train = load(d.images.as_ref().unwrap(), d.labels.as_ref().unwrap())?;
            let test = match (&d.test_images, &d.test_labels) {
                (Some(i), Some(l)) => Some(load(i, l)?),
                _ => None,
            };
            (train, test, None, Vec::new())
        }
    };
    if let Some(limit) = d.limit {
        train = train.head(limit);
    }
    if let Some(h) = d.holdout {
        let (a, b) = train_test_split(&train, h, cfg.seed)?;
        train = a;
        test = Some(b);
    }
    if let (Some(limit), Some(t)) = (d.test_limit, test.as_mut()) {
        *t = t.head(limit);
    }
    if train.is_empty() {
        return Err(Failure::Config("training set is empty".into()));
    }
    Ok(RawData {
        train,
        test,
        seed,
        cluster_centers: centers,
    })
}
