//! Posterior sampling by ensembles of weighted-loss minimizers: deep
//! ensembles, Bayesian bootstrap, Dirichlet-process and Mixup martingale
//! posteriors, plain Mixup and MC dropout, plus ensemble prediction.
//!
//! Every member draws its randomness from independent ChaCha streams keyed
//! by `(seed, member, purpose)`, so member `b` of a run does not depend on
//! the ensemble size or on the order in which members are trained.

mod predict;
mod store;
mod train;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::nn::{FeatureShape, ModelParams, NetworkSpec, TrainConfig};
use crate::predictive::{AugmentationSet, BaseMeasure};

pub use predict::{ensemble_predict, ensemble_predict_batch, mean_probabilities, McDropout};
pub use store::MANIFEST_FILE;
pub use train::{
    accuracy, bb_member, dp_mp_member, mixup_member, mixup_mp_member, train_bb, train_de,
    train_dp_mp, train_ensemble, train_member_erm, train_member_erm_observed, train_mixup,
    train_mixup_mp, BbOptions, InitMode, Observer, TrainLog, Trained,
};

/// Default number of ensemble members.
pub const DEFAULT_MEMBERS: usize = 4;
/// Default number of stochastic forward passes for MC-dropout inference.
pub const DEFAULT_MC_PASSES: usize = 20;

/// Purpose of a per-member random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Weights = 1,
    Loader = 2,
    Augment = 3,
    Pseudo = 4,
    Dropout = 5,
}

/// The random stream used by `member` for `purpose` under master `seed`.
pub fn member_rng(seed: u64, member: usize, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64 * 16 + purpose as u64);
    rng
}

/// Concentration ratio `r = c / n`, with infinity as its own state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Concentration {
    Finite(f64),
    Infinite,
}

impl Concentration {
    pub fn from_f64(r: f64) -> Result<Self> {
        if r == f64::INFINITY {
            Ok(Concentration::Infinite)
        } else if r >= 0.0 && r.is_finite() {
            Ok(Concentration::Finite(r))
        } else {
            Err(Error::invalid(format!(
                "concentration ratio must be >= 0, got {r}"
            )))
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Concentration::Finite(r) if *r == 0.0)
    }
}

impl fmt::Display for Concentration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Concentration::Finite(r) => write!(f, "{r}"),
            Concentration::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Concentration {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Concentration::Finite(r) => s.serialize_f64(*r),
            Concentration::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Concentration {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        let r = match Raw::deserialize(d)? {
            Raw::Num(v) => v,
            Raw::Int(v) => v as f64,
            Raw::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "+inf" => f64::INFINITY,
                other => other
                    .parse()
                    .map_err(|_| serde::de::Error::custom(format!("bad concentration {s:?}")))?,
            },
        };
        Concentration::from_f64(r).map_err(serde::de::Error::custom)
    }
}

/// Settings of the Mixup martingale posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictiveConfig {
    pub r: Concentration,
    pub alpha: f64,
    /// Pseudo-observations per minibatch; defaults to the minibatch length.
    #[serde(default)]
    pub t_mb: Option<usize>,
    #[serde(default)]
    pub augment: AugmentationSet,
}

impl PredictiveConfig {
    pub fn validate(&self, shape: &FeatureShape) -> Result<()> {
        if !self.r.is_zero() && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.t_mb == Some(0) && !self.r.is_zero() {
            return Err(Error::invalid("t_mb must be at least 1 when r > 0"));
        }
        self.augment.validate(shape)
    }
}

/// The posterior-sampling algorithm behind an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Algorithm {
    De,
    Bb {
        #[serde(default)]
        stabilized: bool,
        #[serde(default)]
        bound_m: Option<f64>,
    },
    DpMp {
        base_measure: BaseMeasure,
        c: f64,
        t: usize,
    },
    MixupMp {
        predictive: PredictiveConfig,
    },
    Mixup {
        alpha: f64,
        #[serde(default)]
        augment: AugmentationSet,
    },
    /// Members trained as a deep ensemble with dropout active; predictions
    /// average `passes` masked forward passes per member.
    McDropout {
        passes: usize,
    },
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::De => "de",
            Algorithm::Bb { .. } => "bb",
            Algorithm::DpMp { .. } => "dp-mp",
            Algorithm::MixupMp { .. } => "mixup-mp",
            Algorithm::Mixup { .. } => "mixup",
            Algorithm::McDropout { .. } => "mc-dropout",
        }
    }
}

/// How an ensemble was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub algorithm: Algorithm,
    pub train: TrainConfig,
    /// Master seed; member `b` uses streams `16 b + purpose` of ChaCha8 seeded with it.
    pub seed: u64,
    /// Stochastic forward passes per member at prediction time (MC dropout).
    #[serde(default)]
    pub mc_passes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub spec: NetworkSpec,
    pub members: Vec<ModelParams>,
    pub provenance: Provenance,
}

impl Ensemble {
    pub fn new(
        spec: NetworkSpec,
        members: Vec<ModelParams>,
        provenance: Provenance,
    ) -> Result<Self> {
        let ens = Ensemble {
            spec,
            members,
            provenance,
        };
        ens.validate()?;
        Ok(ens)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one member"));
        }
        for (i, m) in self.members.iter().enumerate() {
            m.check(&self.spec)
                .map_err(|e| Error::invalid(format!("member {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// MC-dropout settings implied by the provenance, if any.
    pub fn mc_dropout(&self) -> Option<McDropout> {
        let passes = self.provenance.mc_passes?;
        let rate = self.spec.dropout_rate()?;
        Some(McDropout { rate, passes })
    }
}

/// Runs `f(0..count)` on up to `jobs` threads and returns results in index
/// order. The first error by index wins.
pub fn parallel_map<T, F>(count: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let jobs = jobs.max(1).min(count.max(1));
    if jobs == 1 {
        return (0..count).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let out = f(i);
                slots.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}
