use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use crate::error::{Error, Result};

/// When a member stops training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StopRule {
    /// A fixed number of epochs.
    Epochs { epochs: usize },
    /// Train until every training example is classified correctly, then for
    /// `extra` further epochs. Fails if separation is not reached within `cap` epochs.
    SeparatedPlus { extra: usize, cap: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub stop: StopRule,
    pub minibatch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.minibatch_size == 0 {
            return Err(Error::invalid("minibatch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        Ok(())
    }
}

/// One SGD step with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + g + weight_decay * theta`, `theta <- theta - lr * v`.
///
/// `velocity` is created on first use. `epoch` only labels the error.
pub fn sgd_step(
    params: &mut ModelParams,
    gradient: &ModelParams,
    cfg: &TrainConfig,
    velocity: &mut Option<ModelParams>,
    epoch: usize,
) -> Result<()> {
    if params.tensors.len() != gradient.tensors.len()
        || params
            .tensors
            .iter()
            .zip(&gradient.tensors)
            .any(|(p, g)| p.shape != g.shape)
    {
        return Err(Error::invalid("gradient shape does not match parameters"));
    }
    if !gradient.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient",
            epoch,
        });
    }
    let v = velocity.get_or_insert_with(|| {
        let mut z = gradient.clone();
        z.scale(0.0);
        z
    });
    for ((p, g), v) in params
        .tensors
        .iter_mut()
        .zip(&gradient.tensors)
        .zip(v.tensors.iter_mut())
    {
        for ((theta, &g), v) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *theta;
            *theta -= cfg.learning_rate * *v;
        }
    }
    Ok(())
}
