//! Independent reference implementations used as test oracles. Nothing here
//! calls into the engine or the metrics code it checks.

#![allow(dead_code)]

pub mod invariants;

use mpkit::nn::{FeatureShape, Layer, ModelParams, NetworkSpec};
use rand::Rng;

/// Activation tensor of the reference network: channels x height x width,
/// with flat vectors stored as `c = len, h = w = 1`.
#[derive(Clone, Debug)]
struct Act {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

/// Straightforward loop-based forward pass (dropout is the identity).
pub fn reference_logits(params: &ModelParams, spec: &NetworkSpec, x: &[f64]) -> Vec<f64> {
    let (c, h, w) = match spec.input {
        FeatureShape::Flat { dim } => (dim, 1, 1),
        FeatureShape::Image {
            channels,
            height,
            width,
        } => (channels, height, width),
    };
    let mut a = Act {
        c,
        h,
        w,
        v: x.to_vec(),
    };
    let mut t = 0;
    for layer in &spec.layers {
        a = match *layer {
            Layer::Dense {
                inputs,
                outputs,
                bias,
            } => {
                let wt = &params.tensors[t].data;
                t += 1;
                let b = if bias {
                    t += 1;
                    Some(&params.tensors[t - 1].data)
                } else {
                    None
                };
                let mut out = vec![0.0; outputs];
                for (o, slot) in out.iter_mut().enumerate() {
                    let mut s = b.map_or(0.0, |b| b[o]);
                    for i in 0..inputs {
                        s += wt[o * inputs + i] * a.v[i];
                    }
                    *slot = s;
                }
                Act {
                    c: outputs,
                    h: 1,
                    w: 1,
                    v: out,
                }
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
            } => {
                let wt = &params.tensors[t].data;
                t += 1;
                let b = if bias {
                    t += 1;
                    Some(&params.tensors[t - 1].data)
                } else {
                    None
                };
                let (oh, ow) = (a.h - kernel + 1, a.w - kernel + 1);
                let mut out = vec![0.0; out_channels * oh * ow];
                for oc in 0..out_channels {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut s = b.map_or(0.0, |b| b[oc]);
                            for ic in 0..in_channels {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let wi =
                                            ((oc * in_channels + ic) * kernel + ky) * kernel + kx;
                                        let ai = (ic * a.h + y + ky) * a.w + xx + kx;
                                        s += wt[wi] * a.v[ai];
                                    }
                                }
                            }
                            out[(oc * oh + y) * ow + xx] = s;
                        }
                    }
                }
                Act {
                    c: out_channels,
                    h: oh,
                    w: ow,
                    v: out,
                }
            }
            Layer::MaxPool2x2 => {
                let (oh, ow) = (a.h / 2, a.w / 2);
                let mut out = vec![0.0; a.c * oh * ow];
                for ch in 0..a.c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let at = |dy: usize, dx: usize| {
                                a.v[(ch * a.h + 2 * y + dy) * a.w + 2 * xx + dx]
                            };
                            out[(ch * oh + y) * ow + xx] =
                                at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                        }
                    }
                }
                Act {
                    c: a.c,
                    h: oh,
                    w: ow,
                    v: out,
                }
            }
            Layer::Relu => Act {
                v: a.v.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect(),
                ..a
            },
            Layer::Flatten => Act {
                c: a.v.len(),
                h: 1,
                w: 1,
                v: a.v,
            },
            Layer::Dropout { .. } => a,
        };
    }
    a.v
}

/// `-sum_k y_k log softmax(l)_k`, written out directly.
pub fn reference_cross_entropy(logits: &[f64], label: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let log_z = m + z.ln();
    -logits
        .iter()
        .zip(label)
        .map(|(l, y)| y * (l - log_z))
        .sum::<f64>()
}

pub fn reference_loss(
    params: &ModelParams,
    spec: &NetworkSpec,
    inputs: &[Vec<f64>],
    labels: &[Vec<f64>],
    weights: &[f64],
) -> f64 {
    inputs
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((x, y), w)| w * reference_cross_entropy(&reference_logits(params, spec, x), y))
        .sum()
}

fn dense(inputs: usize, outputs: usize, bias: bool) -> Layer {
    Layer::Dense {
        inputs,
        outputs,
        bias,
    }
}

/// A random MLP or CNN with at most `max_params` parameters.
pub fn random_network<R: Rng>(rng: &mut R, conv: bool, max_params: usize) -> NetworkSpec {
    loop {
        let k = rng.random_range(2..=5);
        let bias = rng.random_bool(0.5);
        let spec = if conv {
            let c = rng.random_range(1..=2);
            let h = rng.random_range(5..=8);
            let w = rng.random_range(5..=8);
            let kernel = rng.random_range(2..=3);
            let oc = rng.random_range(1..=3);
            let mut layers = vec![
                Layer::Conv2d {
                    in_channels: c,
                    out_channels: oc,
                    kernel,
                    bias,
                },
                Layer::Relu,
            ];
            let (mut oh, mut ow) = (h - kernel + 1, w - kernel + 1);
            if rng.random_bool(0.7) {
                layers.push(Layer::MaxPool2x2);
                oh /= 2;
                ow /= 2;
            }
            layers.push(Layer::Flatten);
            layers.push(dense(oc * oh * ow, k, bias));
            NetworkSpec {
                input: FeatureShape::Image {
                    channels: c,
                    height: h,
                    width: w,
                },
                num_classes: k,
                layers,
            }
        } else {
            let d = rng.random_range(1..=6);
            let depth = rng.random_range(0..=3);
            let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=10)).collect();
            NetworkSpec::mlp(d, &hidden, k, bias)
        };
        if spec.num_params() <= max_params && spec.validate().is_ok() {
            return spec;
        }
    }
}

/// Parameters with nonzero biases so bias gradients are exercised.
pub fn random_params<R: Rng>(rng: &mut R, spec: &NetworkSpec) -> ModelParams {
    let mut p = ModelParams::init_with(spec, rng);
    for v in p.iter_mut() {
        if *v == 0.0 {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    p
}

/// A random point on the probability simplex.
pub fn random_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|_| -rng.random::<f64>().max(1e-300).ln())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Largest central-difference discrepancy of the analytic gradient:
/// `max_j |a_j - n_j| / max(|a_j|, |n_j|, floor)`.
pub fn max_relative_error(
    params: &ModelParams,
    analytic: &ModelParams,
    loss: impl Fn(&ModelParams) -> f64,
    step: f64,
    floor: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let flat_a: Vec<f64> = analytic.iter().copied().collect();
    for (j, &a) in flat_a.iter().enumerate() {
        let mut plus = params.clone();
        let mut minus = params.clone();
        *plus.iter_mut().nth(j).unwrap() += step;
        *minus.iter_mut().nth(j).unwrap() -= step;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

/// Calibration summary computed by scanning every bin over every example.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteReport {
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
    pub oe: f64,
    pub ue: f64,
    /// (count, mean confidence, accuracy) per bin, zeros when empty.
    pub bins: Vec<(usize, f64, f64)>,
}

pub fn brute_force_calibration(probs: &[Vec<f64>], labels: &[usize], m: usize) -> BruteReport {
    let n = probs.len();
    let mut conf = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    for (p, &y) in probs.iter().zip(labels) {
        let mut best = 0;
        for j in 1..p.len() {
            if p[j] > p[best] {
                best = j;
            }
        }
        conf.push(p[best]);
        correct.push(best == y);
    }
    let mut bins = Vec::with_capacity(m);
    let (mut ece, mut oe, mut ue) = (0.0, 0.0, 0.0);
    for bin in 1..=m {
        let lo = (bin - 1) as f64 / m as f64;
        let hi = bin as f64 / m as f64;
        let members: Vec<usize> = (0..n)
            .filter(|&i| (conf[i] > lo && conf[i] <= hi) || (bin == 1 && conf[i] == 0.0))
            .collect();
        if members.is_empty() {
            bins.push((0, 0.0, 0.0));
            continue;
        }
        let c = members.len() as f64;
        let mean_conf = members.iter().map(|&i| conf[i]).sum::<f64>() / c;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / c;
        ece += c / n as f64 * (acc - mean_conf).abs();
        oe += c / n as f64 * (mean_conf - acc).max(0.0);
        ue += c / n as f64 * (acc - mean_conf).max(0.0);
        bins.push((members.len(), mean_conf, acc));
    }
    let acc = correct.iter().filter(|&&c| c).count() as f64 / n as f64;
    let nll = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -(p[y].max(1e-12)).ln())
        .sum::<f64>()
        / n as f64;
    BruteReport {
        acc,
        nll,
        ece,
        oe,
        ue,
        bins,
    }
}

/// A random prediction set mixing smooth, one-hot and bin-edge confidences.
pub fn random_prediction_set<R: Rng>(rng: &mut R, m: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = rng.random_range(1..=300);
    let k = rng.random_range(2..=10);
    let mut probs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let p = match rng.random_range(0..4) {
            0 => {
                let mut p = vec![0.0; k];
                p[rng.random_range(0..k)] = 1.0;
                p
            }
            1 => {
                // Confidence exactly on a bin edge (when it is a valid max).
                let edge = rng.random_range(1..=m) as f64 / m as f64;
                let top = edge.max(1.0 / k as f64);
                let rest = (1.0 - top) / (k - 1) as f64;
                let mut p = vec![rest; k];
                p[rng.random_range(0..k)] = top;
                p
            }
            2 => vec![1.0 / k as f64; k],
            _ => random_simplex(rng, k),
        };
        probs.push(p);
        labels.push(rng.random_range(0..k));
    }
    (probs, labels)
}
