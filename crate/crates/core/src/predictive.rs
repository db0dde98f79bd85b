//! Samplers for the ingredients of predictive distributions over future
//! data: Dirichlet loss weights, Mixup, label-preserving augmentations and
//! the base measures that supply pseudo-observations.
//!
//! Every sampler is a pure function of its inputs and the caller's RNG.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::nn::FeatureShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    SumsToOne,
    /// Rescaled loss weights (e.g. mean one); not a probability vector.
    LossWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub normalization: Normalization,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Multiplies every weight by `factor`, producing loss weights.
    pub fn into_loss_weights(self, factor: f64) -> WeightVector {
        WeightVector {
            weights: self.weights.into_iter().map(|w| w * factor).collect(),
            normalization: Normalization::LossWeights,
        }
    }
}

fn normalized(raw: Vec<f64>) -> WeightVector {
    let total: f64 = raw.iter().sum();
    WeightVector {
        weights: raw.into_iter().map(|v| v / total).collect(),
        normalization: Normalization::SumsToOne,
    }
}

/// Flat Dirichlet(1, ..., 1) weights: `n` unit-exponential draws divided by
/// their sum.
pub fn sample_bb_weights<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<WeightVector> {
    if n == 0 {
        return Err(Error::invalid("Bayesian bootstrap needs n >= 1"));
    }
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    Ok(normalized(raw))
}

/// Bootstrap weights bounded away from zero: with `eta = 1 / (bound_m - n)`,
/// each flat-Dirichlet weight is shifted to `(w + eta) / (n + eta)` and the
/// result renormalized to sum to one, so every weight is at least
/// `eta / (1 + n * eta)`.
pub fn sample_stabilized_bb_weights<R: Rng + ?Sized>(
    n: usize,
    bound_m: f64,
    rng: &mut R,
) -> Result<WeightVector> {
    if !(bound_m > n as f64) {
        return Err(Error::invalid(format!(
            "stabilized weights need bound_M > n (got M = {bound_m}, n = {n})"
        )));
    }
    let base = sample_bb_weights(n, rng)?;
    let eta = 1.0 / (bound_m - n as f64);
    let shifted: Vec<f64> = base
        .weights
        .iter()
        .map(|w| (w + eta) / (n as f64 + eta))
        .collect();
    Ok(normalized(shifted))
}

/// Lower bound on every stabilized weight for a given `n` and `bound_m`.
pub fn stabilized_weight_floor(n: usize, bound_m: f64) -> f64 {
    let eta = 1.0 / (bound_m - n as f64);
    eta / (1.0 + n as f64 * eta)
}

/// Dirichlet(1, ..., 1, c/T, ..., c/T) weights of length `n + t`: the first
/// `n` belong to the observations, the last `t` to pseudo-observations.
/// With `c = 0` the tail is exactly zero and the head equals a
/// [`sample_bb_weights`] draw from the same RNG state.
pub fn sample_dp_weights<R: Rng + ?Sized>(
    n: usize,
    c: f64,
    t: usize,
    rng: &mut R,
) -> Result<WeightVector> {
    if n == 0 || t == 0 {
        return Err(Error::invalid("DP weights need n >= 1 and T >= 1"));
    }
    if !(c >= 0.0) || !c.is_finite() {
        return Err(Error::invalid(format!(
            "concentration must be finite and >= 0, got {c}"
        )));
    }
    let mut raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    if c == 0.0 {
        raw.resize(n + t, 0.0);
    } else {
        let shape = c / t as f64;
        raw.extend((0..t).map(|_| sample_log_gamma(shape, rng).exp()));
    }
    Ok(normalized(raw))
}

/// `ln X` for `X ~ Gamma(shape, 1)`. Shapes below one use the boost
/// `Gamma(a) = Gamma(a + 1) * U^(1/a)`, carried out in log space so tiny
/// shapes do not underflow.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0);
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("shape checked positive");
        g.sample(rng).ln()
    } else {
        let g = Gamma::new(shape + 1.0, 1.0).expect("shape checked positive");
        let base: f64 = g.sample(rng);
        let u: f64 = 1.0 - rng.random::<f64>();
        base.ln() + u.ln() / shape
    }
}

/// `lambda ~ Beta(alpha, alpha)` as `X / (X + Y)` with independent
/// `Gamma(alpha, 1)` draws.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!(
            "Beta parameter must be > 0, got {alpha}"
        )));
    }
    let lx = sample_log_gamma(alpha, rng);
    let ly = sample_log_gamma(alpha, rng);
    // x / (x + y) = 1 / (1 + exp(ly - lx))
    Ok(1.0 / (1.0 + (ly - lx).exp()))
}

fn lerp(lambda: f64, a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else {
        lambda * a + (1.0 - lambda) * b
    }
}

/// Convex combination `lambda * z_i + (1 - lambda) * z_j` of features and labels.
pub fn mixup_pair(zi: &LabeledExample, zj: &LabeledExample, lambda: f64) -> Result<LabeledExample> {
    if zi.features.len() != zj.features.len() || zi.label.len() != zj.label.len() {
        return Err(Error::invalid("mixup of examples with different shapes"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "mixup weight {lambda} outside [0, 1]"
        )));
    }
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| lerp(lambda, x, y)).collect()
    };
    Ok(LabeledExample {
        features: mix(&zi.features, &zj.features),
        label: mix(&zi.label, &zj.label),
    })
}

/// One Mixup draw: `i, j` uniform with replacement, a fresh
/// `lambda ~ Beta(alpha, alpha)`.
pub fn sample_mixup<R: Rng + ?Sized>(
    examples: &[LabeledExample],
    alpha: f64,
    rng: &mut R,
) -> Result<LabeledExample> {
    if examples.is_empty() {
        return Err(Error::invalid("mixup needs a nonempty dataset"));
    }
    let i = rng.random_range(0..examples.len());
    let j = rng.random_range(0..examples.len());
    let lambda = sample_beta(alpha, rng)?;
    mixup_pair(&examples[i], &examples[j], lambda)
}

/// `t_mb` independent Mixup draws over an (already augmented) minibatch.
pub fn sample_pseudo_batch<R: Rng + ?Sized>(
    aug_batch: &[LabeledExample],
    t_mb: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<LabeledExample>> {
    if t_mb == 0 {
        return Ok(Vec::new());
    }
    (0..t_mb)
        .map(|_| sample_mixup(aug_batch, alpha, rng))
        .collect()
}

/// A label-preserving, shape-preserving feature transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Augmentation {
    /// Zero-pad every side by `pad` pixels, then crop back to the original
    /// size at a uniformly random offset.
    PadCrop {
        pad: usize,
    },
    HorizontalFlip {
        p: f64,
    },
    GaussianJitter {
        variance: f64,
    },
    Identity,
}

impl Augmentation {
    pub fn validate(&self, shape: &FeatureShape) -> Result<()> {
        match (self, shape) {
            (
                Augmentation::PadCrop { .. } | Augmentation::HorizontalFlip { .. },
                FeatureShape::Flat { .. },
            ) => Err(Error::invalid(format!(
                "{self:?} needs image-shaped features"
            ))),
            (Augmentation::HorizontalFlip { p }, _) if !(0.0..=1.0).contains(p) => Err(
                Error::invalid(format!("flip probability {p} outside [0, 1]")),
            ),
            (Augmentation::GaussianJitter { variance }, _) if !(*variance >= 0.0) => Err(
                Error::invalid(format!("jitter variance {variance} is negative")),
            ),
            _ => Ok(()),
        }
    }

    pub fn apply<R: Rng + ?Sized>(
        &self,
        features: &mut Vec<f64>,
        shape: &FeatureShape,
        rng: &mut R,
    ) {
        match *self {
            Augmentation::Identity => {}
            Augmentation::GaussianJitter { variance } => {
                let sd = variance.sqrt();
                for v in features.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += sd * z;
                }
            }
            Augmentation::HorizontalFlip { p } => {
                if rng.random::<f64>() < p {
                    let (_, _, w) = image_dims(shape);
                    for row in features.chunks_exact_mut(w) {
                        row.reverse();
                    }
                }
            }
            Augmentation::PadCrop { pad } => {
                let oy = rng.random_range(0..=2 * pad);
                let ox = rng.random_range(0..=2 * pad);
                *features = shift_image(
                    features,
                    shape,
                    oy as isize - pad as isize,
                    ox as isize - pad as isize,
                );
            }
        }
    }
}

fn image_dims(shape: &FeatureShape) -> (usize, usize, usize) {
    match *shape {
        FeatureShape::Image {
            channels,
            height,
            width,
        } => (channels, height, width),
        FeatureShape::Flat { dim } => (1, 1, dim),
    }
}

/// `out[c][y][x] = in[c][y + dy][x + dx]`, zero outside the input.
pub fn shift_image(features: &[f64], shape: &FeatureShape, dy: isize, dx: isize) -> Vec<f64> {
    let (c, h, w) = image_dims(shape);
    let mut out = vec![0.0; features.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[ch * h * w + y * w + x] = features[ch * h * w + sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// Ordered list of transforms applied in sequence. Empty means identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugmentationSet(pub Vec<Augmentation>);

impl AugmentationSet {
    pub fn none() -> Self {
        AugmentationSet(Vec::new())
    }

    /// Random crop with 4-pixel padding plus a horizontal flip with probability 0.5.
    pub fn standard_image() -> Self {
        AugmentationSet(vec![
            Augmentation::PadCrop { pad: 4 },
            Augmentation::HorizontalFlip { p: 0.5 },
        ])
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, shape: &FeatureShape) -> Result<()> {
        self.0.iter().try_for_each(|a| a.validate(shape))
    }
}

/// Draw from the augmentation distribution centred on `z`: the features are
/// transformed and the label is copied unchanged.
pub fn sample_h_aug<R: Rng + ?Sized>(
    z: &LabeledExample,
    aug: &AugmentationSet,
    shape: &FeatureShape,
    rng: &mut R,
) -> LabeledExample {
    let mut features = z.features.clone();
    for a in &aug.0 {
        a.apply(&mut features, shape, rng);
    }
    LabeledExample {
        features,
        label: z.label.clone(),
    }
}

/// Source of pseudo-observations for Dirichlet-process posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BaseMeasure {
    /// A uniformly chosen observation with `N(0, variance)` noise on every
    /// feature; the label is kept.
    PerturbedEmpirical { variance: f64 },
    /// Features uniform on `[lower, upper]^d`, label uniform over the one-hot classes.
    UniformBox { lower: f64, upper: f64 },
    /// Mixup of two augmented observations.
    Mixup {
        alpha: f64,
        #[serde(default)]
        augment: AugmentationSet,
    },
}

impl BaseMeasure {
    pub fn validate(&self, shape: &FeatureShape) -> Result<()> {
        match self {
            BaseMeasure::PerturbedEmpirical { variance } if !(*variance >= 0.0) => {
                Err(Error::invalid("perturbation variance must be >= 0"))
            }
            BaseMeasure::UniformBox { lower, upper } if !(lower < upper) => {
                Err(Error::invalid("uniform box needs lower < upper"))
            }
            BaseMeasure::Mixup { alpha, augment } => {
                if !(*alpha > 0.0) {
                    return Err(Error::invalid("mixup alpha must be > 0"));
                }
                augment.validate(shape)
            }
            _ => Ok(()),
        }
    }
}

pub fn sample_base_measure<R: Rng + ?Sized>(
    bm: &BaseMeasure,
    dataset: &Dataset,
    rng: &mut R,
) -> Result<LabeledExample> {
    match bm {
        BaseMeasure::PerturbedEmpirical { variance } => {
            if dataset.is_empty() {
                return Err(Error::invalid("perturbed base measure needs observations"));
            }
            let src = &dataset.examples[rng.random_range(0..dataset.len())];
            let sd = variance.sqrt();
            let features = src
                .features
                .iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v + sd * z
                })
                .collect();
            Ok(LabeledExample {
                features,
                label: src.label.clone(),
            })
        }
        BaseMeasure::UniformBox { lower, upper } => {
            let features = (0..dataset.shape.len())
                .map(|_| rng.random_range(*lower..=*upper))
                .collect();
            let class = rng.random_range(0..dataset.num_classes);
            Ok(LabeledExample::one_hot(
                features,
                class,
                dataset.num_classes,
            ))
        }
        BaseMeasure::Mixup { alpha, augment } => {
            if dataset.is_empty() {
                return Err(Error::invalid("mixup base measure needs observations"));
            }
            let i = rng.random_range(0..dataset.len());
            let j = rng.random_range(0..dataset.len());
            let zi = sample_h_aug(&dataset.examples[i], augment, &dataset.shape, rng);
            let zj = sample_h_aug(&dataset.examples[j], augment, &dataset.shape, rng);
            let lambda = sample_beta(*alpha, rng)?;
            mixup_pair(&zi, &zj, lambda)
        }
    }
}

#[cfg(test)]
mod tests;
