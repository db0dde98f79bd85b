//! Normalized-margin diagnostics and the paired deep-ensemble versus
//! Bayesian-bootstrap experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, CalibrationReport, DEFAULT_BIN_COUNT};
use crate::nn::{argmax, forward_batch, softmax, ModelParams, NetworkSpec, StopRule, TrainConfig};
use crate::posterior::{
    bb_member, ensemble_predict_batch, member_rng, parallel_map, train_member_erm_observed,
    Algorithm, BbOptions, Ensemble, Provenance, Stream, TrainLog,
};

/// Default spacing of margin checkpoints, in epochs.
pub const DEFAULT_CHECKPOINT_EVERY: usize = 10;

/// Smallest multiclass margin `f_y(x) - max_{k != y} f_k(x)` over the data,
/// together with the training accuracy.
fn margin_and_accuracy(
    params: &ModelParams,
    spec: &NetworkSpec,
    dataset: &Dataset,
) -> Result<(f64, f64)> {
    let k = spec.num_classes;
    let mut gamma = f64::INFINITY;
    let mut hits = 0usize;
    for chunk in dataset.examples.chunks(512) {
        let inputs: Vec<f64> = chunk
            .iter()
            .flat_map(|e| e.features.iter().copied())
            .collect();
        let logits = forward_batch(params, spec, &inputs, chunk.len(), None)?;
        for (ex, l) in chunk.iter().zip(logits.chunks_exact(k)) {
            let y = ex.class();
            let other = l
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            gamma = gamma.min(l[y] - other);
            if argmax(l) == y {
                hits += 1;
            }
        }
    }
    Ok((gamma, hits as f64 / dataset.len() as f64))
}

fn check_homogeneous(spec: &NetworkSpec, dataset: &Dataset) -> Result<()> {
    if !spec.is_homogeneous() {
        return Err(Error::invalid(
            "normalized margin needs a bias-free (homogeneous) network",
        ));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("normalized margin needs a nonempty dataset"));
    }
    Ok(())
}

/// `min_i gamma_i / ||theta||_2^L` with `L` the number of dense and
/// convolutional layers.
pub fn normalized_margin(
    params: &ModelParams,
    spec: &NetworkSpec,
    dataset: &Dataset,
) -> Result<f64> {
    check_homogeneous(spec, dataset)?;
    let (gamma, _) = margin_and_accuracy(params, spec, dataset)?;
    Ok(gamma / params.l2_norm().powi(spec.degree() as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub gamma_min: f64,
    pub norm: f64,
    pub normalized: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MarginTrace {
    pub checkpoints: Vec<Checkpoint>,
}

impl MarginTrace {
    pub fn record(
        &mut self,
        epoch: usize,
        params: &ModelParams,
        spec: &NetworkSpec,
        dataset: &Dataset,
    ) -> Result<()> {
        check_homogeneous(spec, dataset)?;
        let (gamma_min, train_accuracy) = margin_and_accuracy(params, spec, dataset)?;
        let norm = params.l2_norm();
        self.checkpoints.push(Checkpoint {
            epoch,
            gamma_min,
            norm,
            normalized: gamma_min / norm.powi(spec.degree() as i32),
            train_accuracy,
        });
        Ok(())
    }

    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    /// Number of decreases of the normalized margin between consecutive
    /// checkpoints taken after the training set was separated.
    pub fn separated_decreases(&self) -> usize {
        let sep: Vec<f64> = self
            .checkpoints
            .iter()
            .filter(|c| c.train_accuracy == 1.0)
            .map(|c| c.normalized)
            .collect();
        sep.windows(2).filter(|w| w[1] < w[0]).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquivalencyMode {
    /// DE and BB members start from identical per-index initializations.
    RandomPaired,
    /// BB member `b` starts from trained DE member `b`.
    DeInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalencyOptions {
    pub mode: EquivalencyMode,
    pub members: usize,
    /// Further BB epochs after the DE solution (de-init mode).
    pub bb_epochs: usize,
    pub checkpoint_every: usize,
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRow {
    pub member: usize,
    pub method: String,
    pub test_acc: f64,
    pub test_nll: f64,
    pub train_accuracy: f64,
    pub epochs: usize,
    pub separated_at: Option<usize>,
    pub normalized_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalencyReport {
    pub mode: EquivalencyMode,
    pub members: usize,
    pub rows: Vec<MemberRow>,
    pub de: CalibrationReport,
    pub bb: CalibrationReport,
    /// `|ACC(DE) - ACC(BB)|` of the ensemble predictions.
    pub ensemble_acc_gap: f64,
    /// Largest `|ACC(DE_b) - ACC(BB_b)|` over paired members.
    pub max_member_acc_gap: f64,
    pub de_traces: Vec<MarginTrace>,
    pub bb_traces: Vec<MarginTrace>,
}

/// Paired DE/BB members plus the experiment report.
#[derive(Debug, Clone)]
pub struct EquivalencyRun {
    pub report: EquivalencyReport,
    pub de: Ensemble,
    pub bb: Ensemble,
}

type MemberResult = (ModelParams, TrainLog, MarginTrace);

fn traced<F>(spec: &NetworkSpec, train: &Dataset, every: usize, f: F) -> Result<MemberResult>
where
    F: FnOnce(&mut dyn FnMut(usize, &ModelParams)) -> Result<(ModelParams, TrainLog)>,
{
    let homogeneous = spec.is_homogeneous() && every > 0;
    let mut trace = MarginTrace::default();
    let mut failure = None;
    let (params, log) = f(&mut |epoch, p| {
        if homogeneous && epoch % every == 0 && failure.is_none() {
            if let Err(e) = trace.record(epoch, p, spec, train) {
                failure = Some(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    if homogeneous && trace.last().is_none_or(|c| c.epoch != log.epochs) {
        trace.record(log.epochs, &params, spec, train)?;
    }
    Ok((params, log, trace))
}

fn member_report(
    params: &ModelParams,
    spec: &NetworkSpec,
    test: &Dataset,
) -> Result<CalibrationReport> {
    let probs = predict_single(params, spec, test)?;
    evaluate(&probs, &test.classes(), DEFAULT_BIN_COUNT)
}

fn predict_single(params: &ModelParams, spec: &NetworkSpec, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let k = spec.num_classes;
    let logits = forward_batch(params, spec, &ds.features_flat(), ds.len(), None)?;
    Ok(logits.chunks_exact(k).map(softmax).collect())
}

fn ensemble_report(ens: &Ensemble, test: &Dataset) -> Result<CalibrationReport> {
    let probs = ensemble_predict_batch(ens, &test.features_flat(), test.len(), None)?;
    evaluate(&probs, &test.classes(), DEFAULT_BIN_COUNT)
}

/// Trains `B` deep-ensemble members with `cfg` and `B` paired Bayesian
/// bootstrap members, then compares them on `test`.
///
/// In random-paired mode BB member `b` shares DE member `b`'s initialization
/// and data order and uses the same stop rule. In de-init mode BB member `b`
/// starts from trained DE member `b` and runs `bb_epochs` further epochs.
pub fn run_equivalency_experiment(
    train: &Dataset,
    test: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    opts: &EquivalencyOptions,
) -> Result<EquivalencyRun> {
    if opts.members == 0 {
        return Err(Error::invalid("equivalency needs at least one member"));
    }
    if matches!(opts.mode, EquivalencyMode::RandomPaired)
        && !matches!(cfg.stop, StopRule::SeparatedPlus { .. })
    {
        return Err(Error::invalid(
            "random-paired equivalency needs the separated-plus stop rule",
        ));
    }
    let every = opts.checkpoint_every;
    let init = |m: usize| ModelParams::init_with(spec, &mut member_rng(cfg.seed, m, Stream::Init));

    let de: Vec<MemberResult> = parallel_map(opts.members, opts.jobs, |m| {
        traced(spec, train, every, |obs| {
            train_member_erm_observed(train, spec, cfg, None, init(m), m, obs)
        })
    })?;
    if let Some((m, (_, log, _))) = de
        .iter()
        .enumerate()
        .find(|(_, r)| r.1.train_accuracy < 1.0)
    {
        if matches!(opts.mode, EquivalencyMode::DeInit) {
            return Err(Error::invalid(format!(
                "DE member {m} ended at train accuracy {} instead of 1",
                log.train_accuracy
            )));
        }
    }

    let bb_cfg = match opts.mode {
        EquivalencyMode::RandomPaired => cfg.clone(),
        EquivalencyMode::DeInit => TrainConfig {
            stop: StopRule::Epochs {
                epochs: opts.bb_epochs,
            },
            ..cfg.clone()
        },
    };
    let bb: Vec<MemberResult> = parallel_map(opts.members, opts.jobs, |m| {
        let start = match opts.mode {
            EquivalencyMode::RandomPaired => init(m),
            EquivalencyMode::DeInit => de[m].0.clone(),
        };
        traced(spec, train, every, |obs| {
            bb_member(train, spec, &bb_cfg, &BbOptions::default(), start, m, obs)
        })
    })?;

    let make = |results: &[MemberResult], algorithm: Algorithm, c: &TrainConfig| {
        Ensemble::new(
            spec.clone(),
            results.iter().map(|r| r.0.clone()).collect(),
            Provenance {
                algorithm,
                train: c.clone(),
                seed: c.seed,
                mc_passes: None,
            },
        )
    };
    let de_ens = make(&de, Algorithm::De, cfg)?;
    let bb_ens = make(
        &bb,
        Algorithm::Bb {
            stabilized: false,
            bound_m: None,
        },
        &bb_cfg,
    )?;

    let mut rows = Vec::with_capacity(2 * opts.members);
    let mut max_gap: f64 = 0.0;
    for m in 0..opts.members {
        let mut accs = [0.0; 2];
        for (slot, (method, r)) in [("de", &de[m]), ("bb", &bb[m])].into_iter().enumerate() {
            let rep = member_report(&r.0, spec, test)?;
            accs[slot] = rep.acc;
            rows.push(MemberRow {
                member: m,
                method: method.into(),
                test_acc: rep.acc,
                test_nll: rep.nll,
                train_accuracy: r.1.train_accuracy,
                epochs: r.1.epochs,
                separated_at: r.1.separated_at,
                normalized_margin: r.2.last().map(|c| c.normalized),
            });
        }
        max_gap = max_gap.max((accs[0] - accs[1]).abs());
    }
    let de_rep = ensemble_report(&de_ens, test)?;
    let bb_rep = ensemble_report(&bb_ens, test)?;
    let report = EquivalencyReport {
        mode: opts.mode,
        members: opts.members,
        rows,
        ensemble_acc_gap: (de_rep.acc - bb_rep.acc).abs(),
        de: de_rep,
        bb: bb_rep,
        max_member_acc_gap: max_gap,
        de_traces: de.into_iter().map(|r| r.2).collect(),
        bb_traces: bb.into_iter().map(|r| r.2).collect(),
    };
    Ok(EquivalencyRun {
        report,
        de: de_ens,
        bb: bb_ens,
    })
}

#[derive(Debug, Serialize)]
struct ScatterRow {
    member: usize,
    de_acc: f64,
    bb_acc: f64,
    de_loss: f64,
    bb_loss: f64,
}

/// Paired per-member scatter data: `member,de_acc,bb_acc,de_loss,bb_loss`
/// where the losses are test NLLs.
pub fn write_scatter_csv(report: &EquivalencyReport, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        line: 0,
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for m in 0..report.members {
        let find = |method: &str| {
            report
                .rows
                .iter()
                .find(|r| r.member == m && r.method == method)
                .expect("paired rows")
        };
        let (de, bb) = (find("de"), find("bb"));
        w.serialize(ScatterRow {
            member: m,
            de_acc: de.test_acc,
            bb_acc: bb.test_acc,
            de_loss: de.test_nll,
            bb_loss: bb.test_nll,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
