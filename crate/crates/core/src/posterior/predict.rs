use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::Ensemble;
use crate::error::{Error, Result};
use crate::nn::{forward_batch, sample_dropout_mask, softmax};

/// Stochastic inference: every member contributes `passes` forward passes
/// with fresh dropout masks at `rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McDropout {
    pub rate: f64,
    pub passes: usize,
}

fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Classwise mean of probability vectors. Values are sorted before a
/// pairwise sum, so the result does not depend on the order of `probs`, and
/// it is clamped to the observed range so identical inputs average exactly.
pub fn mean_probabilities(probs: &[&[f64]]) -> Vec<f64> {
    let k = probs.first().map_or(0, |p| p.len());
    let mut column = Vec::with_capacity(probs.len());
    (0..k)
        .map(|j| {
            column.clear();
            column.extend(probs.iter().map(|p| p[j]));
            column.sort_by(f64::total_cmp);
            let mean = pairwise_sum(&column) / column.len() as f64;
            mean.clamp(column[0], column[column.len() - 1])
        })
        .collect()
}

/// Mean predictive probabilities of the ensemble at one input.
pub fn ensemble_predict(
    ens: &Ensemble,
    x: &[f64],
    dropout: Option<(McDropout, &mut dyn RngCore)>,
) -> Result<Vec<f64>> {
    Ok(ensemble_predict_batch(ens, x, 1, dropout)?
        .pop()
        .expect("one row"))
}

/// Mean predictive probabilities for `n` inputs stored back to back.
pub fn ensemble_predict_batch(
    ens: &Ensemble,
    inputs: &[f64],
    n: usize,
    dropout: Option<(McDropout, &mut dyn RngCore)>,
) -> Result<Vec<Vec<f64>>> {
    ens.validate()?;
    let d = ens.spec.input.len();
    let k = ens.spec.num_classes;
    if inputs.len() != n * d {
        return Err(Error::Shape {
            layer: 0,
            kind: "input",
            detail: format!("{} values for {n} inputs of size {d}", inputs.len()),
        });
    }
    if let Some((mc, _)) = &dropout {
        if !(0.0..1.0).contains(&mc.rate) || mc.passes == 0 {
            return Err(Error::invalid(format!(
                "MC dropout needs rate in [0, 1) and passes >= 1, got {mc:?}"
            )));
        }
    }
    let mut dropout = dropout;
    let mut contributions: Vec<Vec<f64>> = Vec::new();
    for member in &ens.members {
        let passes = dropout.as_ref().map_or(1, |(mc, _)| mc.passes);
        for _ in 0..passes {
            let mut probs = Vec::with_capacity(n * k);
            for start in (0..n).step_by(1024) {
                let len = (n - start).min(1024);
                let chunk = &inputs[start * d..(start + len) * d];
                let logits = match &mut dropout {
                    Some((mc, rng)) => {
                        let masks = (0..len)
                            .map(|_| sample_dropout_mask(&ens.spec, mc.rate, &mut **rng))
                            .collect::<Result<Vec<_>>>()?;
                        forward_batch(member, &ens.spec, chunk, len, Some(&masks))?
                    }
                    None => forward_batch(member, &ens.spec, chunk, len, None)?,
                };
                for l in logits.chunks_exact(k) {
                    probs.extend(softmax(l));
                }
            }
            contributions.push(probs);
        }
    }
    Ok((0..n)
        .map(|e| {
            let rows: Vec<&[f64]> = contributions
                .iter()
                .map(|c| &c[e * k..(e + 1) * k])
                .collect();
            mean_probabilities(&rows)
        })
        .collect())
}
