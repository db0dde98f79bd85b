//! The TOML run configuration.

use std::path::{Path, PathBuf};

use mpkit::datasets::Dataset;
use mpkit::margin::{EquivalencyMode, DEFAULT_CHECKPOINT_EVERY};
use mpkit::nn::{Layer, NetworkSpec, StopRule, TrainConfig};
use mpkit::posterior::{
    Algorithm, Concentration, PredictiveConfig, DEFAULT_MC_PASSES, DEFAULT_MEMBERS,
};
use mpkit::predictive::{AugmentationSet, BaseMeasure};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Weight decay used when `[train]` leaves it unset, except in margin
/// experiments where it defaults to zero.
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub predictive: PredictiveSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Synthetic,
    Csv,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: SourceKind,
    /// Seed of the synthetic generator (defaults to the master seed).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// Keep only the first `limit` training examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    /// Fraction of the data held out as a test set when no test files are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<f64>,
    /// Standardize features with the training mean and standard deviation.
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    #[default]
    Mlp,
    Cnn,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default)]
    pub kind: NetworkKind,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub bias: bool,
    /// Dropout rate after every hidden layer (0 disables dropout).
    #[serde(default)]
    pub dropout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<Layer>>,
}

fn default_hidden() -> Vec<usize> {
    vec![16, 32, 16]
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            kind: NetworkKind::Mlp,
            hidden: default_hidden(),
            bias: false,
            dropout: 0.0,
            layers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    /// Minibatch size; full batch when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minibatch_size: Option<usize>,
    /// Shorthand for `stop = { rule = "epochs", epochs = N }`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    De,
    Bb,
    DpMp,
    MixupMp,
    Mixup,
    McDropout,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictiveSection {
    #[serde(default)]
    pub method: Method,
    /// Ensemble size B.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Concentration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_mb: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentationSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stabilized: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_measure: Option<BaseMeasure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    /// Stochastic forward passes per member at prediction time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_passes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_mode")]
    pub mode: EquivalencyMode,
    /// BB epochs after the DE solution in de-init mode.
    #[serde(default = "default_bb_epochs")]
    pub bb_epochs: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_resolution")]
    pub grid_resolution: usize,
    /// Grid padding around the data, in (possibly standardized) feature units.
    #[serde(default = "default_padding")]
    pub grid_padding: f64,
}

fn default_mode() -> EquivalencyMode {
    EquivalencyMode::DeInit
}
fn default_bb_epochs() -> usize {
    50
}
fn default_checkpoint_every() -> usize {
    DEFAULT_CHECKPOINT_EVERY
}
fn default_resolution() -> usize {
    100
}
fn default_padding() -> f64 {
    1.0
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            mode: default_mode(),
            bb_epochs: default_bb_epochs(),
            checkpoint_every: default_checkpoint_every(),
            grid_resolution: default_resolution(),
            grid_padding: default_padding(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| config_err(format!("config: {e}")))
    }

    /// Reads a config and makes its relative paths relative to the file.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        cfg.dataset.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| config_err(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.dataset.validate()?;
        self.train.validate()?;
        let n = &self.network;
        if !(0.0..1.0).contains(&n.dropout) {
            return Err(config_err(format!(
                "network.dropout {} outside [0, 1)",
                n.dropout
            )));
        }
        if n.kind == NetworkKind::Custom && n.layers.is_none() {
            return Err(config_err("network.kind = \"custom\" needs network.layers"));
        }
        if n.kind != NetworkKind::Custom && n.layers.is_some() {
            return Err(config_err(
                "network.layers is only used with kind = \"custom\"",
            ));
        }
        Ok(())
    }

    /// Weight decay with the documented defaults applied.
    pub fn weight_decay(&self, margin_experiment: bool) -> f64 {
        self.train.weight_decay.unwrap_or(if margin_experiment {
            0.0
        } else {
            DEFAULT_WEIGHT_DECAY
        })
    }

    pub fn train_config(&self, n: usize, margin_experiment: bool) -> Result<TrainConfig, Failure> {
        let t = &self.train;
        let stop = match (t.epochs, t.stop) {
            (Some(epochs), None) => StopRule::Epochs { epochs },
            (None, Some(stop)) => stop,
            _ => {
                return Err(config_err(
                    "[train] needs exactly one of `epochs` or `stop`",
                ))
            }
        };
        let cfg = TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: self.weight_decay(margin_experiment),
            stop,
            minibatch_size: t.minibatch_size.unwrap_or(n),
            seed: self.seed,
        };
        cfg.validate()
            .map_err(|e| config_err(format!("[train]: {e}")))?;
        Ok(cfg)
    }

    pub fn network_spec(&self, data: &Dataset) -> Result<NetworkSpec, Failure> {
        let n = &self.network;
        let k = data.num_classes;
        let spec = match n.kind {
            NetworkKind::Mlp => {
                if n.dropout > 0.0 {
                    NetworkSpec::mlp_with_dropout(data.shape.len(), &n.hidden, k, n.bias, n.dropout)
                } else {
                    NetworkSpec::mlp(data.shape.len(), &n.hidden, k, n.bias)
                }
            }
            NetworkKind::Cnn => match data.shape {
                mpkit::nn::FeatureShape::Image {
                    channels,
                    height,
                    width,
                } if height >= 16 && width >= 16 => {
                    NetworkSpec::small_cnn(channels, height, width, k, n.bias, n.dropout)
                }
                other => {
                    return Err(config_err(format!(
                    "network.kind = \"cnn\" needs images of at least 16x16, dataset has {other:?}"
                )))
                }
            },
            NetworkKind::Custom => NetworkSpec {
                input: data.shape,
                num_classes: k,
                layers: n.layers.clone().unwrap_or_default(),
            },
        };
        spec.validate()
            .map_err(|e| config_err(format!("[network]: {e}")))?;
        Ok(spec)
    }

    pub fn members(&self) -> usize {
        self.predictive
            .members
            .unwrap_or(match self.predictive.method {
                Method::McDropout => 1,
                _ => DEFAULT_MEMBERS,
            })
    }

    /// The algorithm selected by `[predictive]` for a training set of size `n`,
    /// plus the MC-dropout pass count if predictions are stochastic.
    pub fn algorithm(&self, n: usize) -> Result<(Algorithm, Option<usize>), Failure> {
        let p = &self.predictive;
        let name = format!("{:?}", p.method).to_lowercase();
        let unused = |field: &str, set: bool| -> Result<(), Failure> {
            if set {
                Err(config_err(format!(
                    "predictive.{field} is not used by method {name}"
                )))
            } else {
                Ok(())
            }
        };
        let dp_fields = p.base_measure.is_some() || p.c.is_some() || p.t.is_some();
        let bb_fields = p.stabilized.is_some() || p.bound_m.is_some();
        let mixup_fields = p.r.is_some() || p.t_mb.is_some();
        if self.members() == 0 {
            return Err(config_err("predictive.members must be at least 1"));
        }
        let has_dropout = self.network.dropout > 0.0
            || self
                .network
                .layers
                .iter()
                .flatten()
                .any(|l| matches!(l, Layer::Dropout { .. }));
        if let Some(passes) = p.mc_passes {
            if passes == 0 {
                return Err(config_err("predictive.mc_passes must be at least 1"));
            }
            if !has_dropout {
                return Err(config_err(
                    "predictive.mc_passes needs a network with dropout",
                ));
            }
        }
        let algo = match p.method {
            Method::De => {
                unused("alpha", p.alpha.is_some())?;
                unused("augment", p.augment.is_some())?;
                unused("r/t_mb", mixup_fields)?;
                unused("stabilized/bound_m", bb_fields)?;
                unused("base_measure/c/t", dp_fields)?;
                Algorithm::De
            }
            Method::Bb => {
                unused("alpha", p.alpha.is_some())?;
                unused("augment", p.augment.is_some())?;
                unused("r/t_mb", mixup_fields)?;
                unused("base_measure/c/t", dp_fields)?;
                Algorithm::Bb {
                    stabilized: p.stabilized.unwrap_or(false),
                    bound_m: p.bound_m,
                }
            }
            Method::DpMp => {
                unused("alpha", p.alpha.is_some())?;
                unused("augment", p.augment.is_some())?;
                unused("r/t_mb", mixup_fields)?;
                unused("stabilized/bound_m", bb_fields)?;
                let base_measure = p
                    .base_measure
                    .clone()
                    .ok_or_else(|| config_err("dp-mp needs predictive.base_measure"))?;
                let c = p.c.ok_or_else(|| config_err("dp-mp needs predictive.c"))?;
                Algorithm::DpMp {
                    base_measure,
                    c,
                    t: p.t.unwrap_or(n),
                }
            }
            Method::MixupMp => {
                unused("stabilized/bound_m", bb_fields)?;
                unused("base_measure/c/t", dp_fields)?;
                let r =
                    p.r.ok_or_else(|| config_err("mixup-mp needs predictive.r"))?;
                Algorithm::MixupMp {
                    predictive: PredictiveConfig {
                        r,
                        alpha: p.alpha.unwrap_or(1.0),
                        t_mb: p.t_mb,
                        augment: p.augment.clone().unwrap_or_default(),
                    },
                }
            }
            Method::Mixup => {
                unused("r/t_mb", mixup_fields)?;
                unused("stabilized/bound_m", bb_fields)?;
                unused("base_measure/c/t", dp_fields)?;
                Algorithm::Mixup {
                    alpha: p.alpha.unwrap_or(1.0),
                    augment: p.augment.clone().unwrap_or_default(),
                }
            }
            Method::McDropout => {
                unused("alpha", p.alpha.is_some())?;
                unused("augment", p.augment.is_some())?;
                unused("r/t_mb", mixup_fields)?;
                unused("stabilized/bound_m", bb_fields)?;
                unused("base_measure/c/t", dp_fields)?;
                if !has_dropout {
                    return Err(config_err("mc-dropout needs network.dropout > 0"));
                }
                Algorithm::McDropout {
                    passes: p.mc_passes.unwrap_or(DEFAULT_MC_PASSES),
                }
            }
        };
        let passes = match &algo {
            Algorithm::McDropout { passes } => Some(*passes),
            _ => p.mc_passes,
        };
        Ok((algo, passes))
    }

    /// A copy with every default made explicit, suitable for re-running.
    pub fn resolved(&self, n: usize, margin_experiment: bool) -> Result<RunConfig, Failure> {
        let mut out = self.clone();
        out.train.weight_decay = Some(self.weight_decay(margin_experiment));
        out.train.minibatch_size = Some(self.train.minibatch_size.unwrap_or(n));
        out.predictive.members = Some(self.members());
        if let Ok((algo, passes)) = self.algorithm(n) {
            out.predictive.mc_passes = passes;
            match algo {
                Algorithm::DpMp { t, .. } => out.predictive.t = Some(t),
                Algorithm::MixupMp { predictive } => out.predictive.alpha = Some(predictive.alpha),
                Algorithm::Mixup { alpha, .. } => out.predictive.alpha = Some(alpha),
                _ => {}
            }
        }
        if self.dataset.source == SourceKind::Synthetic {
            out.dataset.data_seed = Some(self.dataset.data_seed.unwrap_or(self.seed));
        }
        Ok(out)
    }
}

impl DatasetConfig {
    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.path,
            &mut self.test_path,
            &mut self.images,
            &mut self.labels,
            &mut self.test_images,
            &mut self.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let need = |field: &str, v: bool| -> Result<(), Failure> {
            if v {
                Ok(())
            } else {
                Err(config_err(format!(
                    "dataset.{field} is required for source {:?}",
                    self.source
                )))
            }
        };
        let forbid = |field: &str, v: bool| -> Result<(), Failure> {
            if v {
                Err(config_err(format!(
                    "dataset.{field} is not used by source {:?}",
                    self.source
                )))
            } else {
                Ok(())
            }
        };
        let csv_fields =
            self.path.is_some() || self.test_path.is_some() || self.label_column.is_some();
        let idx_fields = self.images.is_some()
            || self.labels.is_some()
            || self.test_images.is_some()
            || self.test_labels.is_some();
        match self.source {
            SourceKind::Synthetic => {
                forbid("path/test_path/label_column", csv_fields)?;
                forbid("images/labels", idx_fields)?;
                forbid("num_classes", self.num_classes.is_some())?;
            }
            SourceKind::Csv => {
                need("path", self.path.is_some())?;
                forbid("images/labels", idx_fields)?;
                forbid("data_seed", self.data_seed.is_some())?;
            }
            SourceKind::Idx => {
                need("images", self.images.is_some())?;
                need("labels", self.labels.is_some())?;
                need(
                    "test_images and test_labels together",
                    self.test_images.is_some() == self.test_labels.is_some(),
                )?;
                forbid("path/test_path/label_column", csv_fields)?;
                forbid("data_seed", self.data_seed.is_some())?;
            }
        }
        if let Some(h) = self.holdout {
            if !(h > 0.0 && h < 1.0) {
                return Err(config_err(format!("dataset.holdout {h} outside (0, 1)")));
            }
            if self.test_path.is_some() || self.test_images.is_some() {
                return Err(config_err(
                    "dataset.holdout conflicts with explicit test files",
                ));
            }
        }
        Ok(())
    }
}

impl TrainSection {
    fn validate(&self) -> Result<(), Failure> {
        if self.epochs.is_some() == self.stop.is_some() {
            return Err(config_err(
                "[train] needs exactly one of `epochs` or `stop`",
            ));
        }
        Ok(())
    }
}
