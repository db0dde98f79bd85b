//! A small deterministic neural-network engine: dense, convolutional,
//! pooling, ReLU and dropout layers with reverse-mode gradients and SGD.

mod engine;
mod optim;
mod params;
mod spec;

#[cfg(test)]
pub(crate) use engine::log_sum_exp;
pub use engine::{
    forward, forward_batch, grad, loss_and_grad, sample_dropout_mask, soft_cross_entropy, softmax,
    DropoutMask,
};
pub use optim::{sgd_step, StopRule, TrainConfig};
pub use params::{ModelParams, Tensor};
pub use spec::{FeatureShape, Layer, NetworkSpec};

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
