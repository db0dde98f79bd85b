use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    member_rng, parallel_map, Algorithm, Concentration, Ensemble, PredictiveConfig, Provenance,
    Stream,
};
use crate::datasets::{dataloader, Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::nn::{
    argmax, forward_batch, loss_and_grad, sample_dropout_mask, sgd_step, ModelParams, NetworkSpec,
    StopRule, TrainConfig,
};
use crate::predictive::{
    sample_base_measure, sample_bb_weights, sample_dp_weights, sample_h_aug, sample_mixup,
    sample_pseudo_batch, sample_stabilized_bb_weights, AugmentationSet, BaseMeasure, WeightVector,
};

/// Called with `(epochs completed, params)` before the first epoch and after every epoch.
pub type Observer<'a> = dyn FnMut(usize, &ModelParams) + 'a;

/// Loss history of one member. Batch losses are the normalized objective
/// evaluated at the parameters before each step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub batch_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub epochs: usize,
    /// Epochs completed when the training set was first fully separated.
    pub separated_at: Option<usize>,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub ensemble: Ensemble,
    pub logs: Vec<TrainLog>,
}

/// Bootstrap weight options.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BbOptions {
    pub stabilized: bool,
    /// Weight bound for stabilized weights; defaults to `2 n`.
    pub bound_m: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum InitMode<'a> {
    Random,
    /// Start member `b` from member `b` of a trained ensemble.
    FromEnsemble(&'a Ensemble),
}

impl InitMode<'_> {
    fn params(&self, spec: &NetworkSpec, seed: u64, member: usize) -> Result<ModelParams> {
        match self {
            InitMode::Random => Ok(ModelParams::init_with(
                spec,
                &mut member_rng(seed, member, Stream::Init),
            )),
            InitMode::FromEnsemble(donor) => {
                if donor.spec != *spec {
                    return Err(Error::invalid("donor ensemble has a different network"));
                }
                donor.members.get(member).cloned().ok_or_else(|| {
                    Error::invalid(format!(
                        "donor ensemble has {} members, member {member} requested",
                        donor.len()
                    ))
                })
            }
        }
    }
}

#[derive(Default)]
struct Batch {
    inputs: Vec<f64>,
    labels: Vec<f64>,
    weights: Vec<f64>,
}

impl Batch {
    fn push(&mut self, ex: &LabeledExample, weight: f64) {
        self.inputs.extend_from_slice(&ex.features);
        self.labels.extend_from_slice(&ex.label);
        self.weights.push(weight);
    }
}

struct Trainer<'a> {
    spec: &'a NetworkSpec,
    cfg: &'a TrainConfig,
    params: ModelParams,
    velocity: Option<ModelParams>,
    dropout: Option<(f64, ChaCha8Rng)>,
    log: TrainLog,
    epoch_loss: f64,
    epoch_batches: usize,
}

impl Trainer<'_> {
    fn step(&mut self, batch: Batch, epoch: usize) -> Result<()> {
        let n = batch.weights.len();
        let masks = match &mut self.dropout {
            Some((rate, rng)) => Some(
                (0..n)
                    .map(|_| sample_dropout_mask(self.spec, *rate, rng))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let (loss, grad) = loss_and_grad(
            &self.params,
            self.spec,
            &batch.inputs,
            &batch.labels,
            &batch.weights,
            masks.as_deref(),
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                epoch,
            });
        }
        self.log.batch_losses.push(loss);
        self.epoch_loss += loss;
        self.epoch_batches += 1;
        sgd_step(&mut self.params, &grad, self.cfg, &mut self.velocity, epoch)
    }
}

/// Fraction of `dataset` whose hard label matches the arg-max logit
/// (dropout disabled).
pub fn accuracy(params: &ModelParams, spec: &NetworkSpec, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(1.0);
    }
    let k = spec.num_classes;
    let mut hits = 0usize;
    for chunk in dataset.examples.chunks(512) {
        let inputs: Vec<f64> = chunk
            .iter()
            .flat_map(|e| e.features.iter().copied())
            .collect();
        let logits = forward_batch(params, spec, &inputs, chunk.len(), None)?;
        hits += chunk
            .iter()
            .zip(logits.chunks_exact(k))
            .filter(|(ex, l)| argmax(l) == ex.class())
            .count();
    }
    Ok(hits as f64 / dataset.len() as f64)
}

fn check_inputs(dataset: &Dataset, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if spec.input.len() != dataset.shape.len() {
        return Err(Error::invalid(format!(
            "network expects {} input features, dataset has {}",
            spec.input.len(),
            dataset.shape.len()
        )));
    }
    if spec.num_classes != dataset.num_classes {
        return Err(Error::invalid(format!(
            "network has {} classes, dataset has {}",
            spec.num_classes, dataset.num_classes
        )));
    }
    Ok(())
}

/// Shared epoch loop: applies the stop rule, checks separation on `check`
/// and calls the observer. `epoch_fn` performs one epoch of steps.
fn run<F>(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    init: ModelParams,
    check: &Dataset,
    member: usize,
    observer: &mut Observer,
    mut epoch_fn: F,
) -> Result<(ModelParams, TrainLog)>
where
    F: FnMut(&mut Trainer, usize) -> Result<()>,
{
    init.check(spec)?;
    let dropout = spec
        .dropout_rate()
        .map(|rate| (rate, member_rng(cfg.seed, member, Stream::Dropout)));
    let mut t = Trainer {
        spec,
        cfg,
        params: init,
        velocity: None,
        dropout,
        log: TrainLog::default(),
        epoch_loss: 0.0,
        epoch_batches: 0,
    };
    let separated = |p: &ModelParams| -> Result<bool> { Ok(accuracy(p, spec, check)? == 1.0) };
    if matches!(cfg.stop, StopRule::SeparatedPlus { .. }) && separated(&t.params)? {
        t.log.separated_at = Some(0);
    }
    observer(0, &t.params);
    let mut epoch = 0;
    loop {
        match cfg.stop {
            StopRule::Epochs { epochs } if epoch >= epochs => break,
            StopRule::SeparatedPlus { extra, cap } => match t.log.separated_at {
                Some(s) if epoch >= s + extra => break,
                None if epoch >= cap => return Err(Error::NotSeparated { cap }),
                _ => {}
            },
            _ => {}
        }
        t.epoch_loss = 0.0;
        t.epoch_batches = 0;
        epoch_fn(&mut t, epoch)?;
        epoch += 1;
        let mean = t.epoch_loss / t.epoch_batches.max(1) as f64;
        t.log.epoch_losses.push(mean);
        if t.log.separated_at.is_none()
            && matches!(cfg.stop, StopRule::SeparatedPlus { .. })
            && separated(&t.params)?
        {
            t.log.separated_at = Some(epoch);
        }
        observer(epoch, &t.params);
    }
    t.log.epochs = epoch;
    t.log.train_accuracy = accuracy(&t.params, spec, check)?;
    Ok((t.params, t.log))
}

/// Weighted ERM over `train`: each minibatch minimizes
/// `sum_i w_i loss_i / |batch|`.
#[allow(clippy::too_many_arguments)]
fn erm(
    train: &[LabeledExample],
    weights: Option<&[f64]>,
    check: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    init: ModelParams,
    member: usize,
    observer: &mut Observer,
) -> Result<(ModelParams, TrainLog)> {
    if let Some(w) = weights {
        if w.len() != train.len() {
            return Err(Error::invalid(format!(
                "{} loss weights for {} examples",
                w.len(),
                train.len()
            )));
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(
                "loss weights must be finite and nonnegative",
            ));
        }
    }
    let mut loader = member_rng(cfg.seed, member, Stream::Loader);
    run(spec, cfg, init, check, member, observer, |t, epoch| {
        for idx in dataloader(train.len(), cfg.minibatch_size, loader.next_u64())? {
            let len = idx.len() as f64;
            let mut batch = Batch::default();
            for i in idx {
                let w = weights.map_or(1.0, |w| w[i]);
                batch.push(&train[i], w / len);
            }
            t.step(batch, epoch)?;
        }
        Ok(())
    })
}

pub fn train_member_erm(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    loss_weights: Option<&WeightVector>,
    init: ModelParams,
    member: usize,
) -> Result<(ModelParams, TrainLog)> {
    train_member_erm_observed(
        dataset,
        spec,
        cfg,
        loss_weights,
        init,
        member,
        &mut |_, _| {},
    )
}

/// SGD on `sum_i w_i loss(z_i)` (unit weights when absent), honouring the
/// stop rule. Randomness comes from the member's loader and dropout streams.
pub fn train_member_erm_observed(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    loss_weights: Option<&WeightVector>,
    init: ModelParams,
    member: usize,
    observer: &mut Observer,
) -> Result<(ModelParams, TrainLog)> {
    check_inputs(dataset, spec, cfg)?;
    let w = loss_weights.map(|w| w.weights.as_slice());
    erm(
        &dataset.examples,
        w,
        dataset,
        spec,
        cfg,
        init,
        member,
        observer,
    )
}

/// One Bayesian-bootstrap member: a fresh weight draw scaled by `n` (mean
/// one), then weighted ERM.
pub fn bb_member(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    opts: &BbOptions,
    init: ModelParams,
    member: usize,
    observer: &mut Observer,
) -> Result<(ModelParams, TrainLog)> {
    check_inputs(dataset, spec, cfg)?;
    let n = dataset.len();
    let mut rng = member_rng(cfg.seed, member, Stream::Weights);
    let w = if opts.stabilized {
        let bound = opts.bound_m.unwrap_or(2.0 * n as f64);
        sample_stabilized_bb_weights(n, bound, &mut rng)?
    } else {
        sample_bb_weights(n, &mut rng)?
    };
    let w = w.into_loss_weights(n as f64);
    erm(
        &dataset.examples,
        Some(&w.weights),
        dataset,
        spec,
        cfg,
        init,
        member,
        observer,
    )
}

/// One Dirichlet-process member: `t` pseudo-observations from the base
/// measure, Dirichlet(1, ..., 1, c/t, ..., c/t) weights scaled by `n + c`,
/// then weighted ERM over observations and pseudo-observations.
#[allow(clippy::too_many_arguments)]
pub fn dp_mp_member(
    dataset: &Dataset,
    bm: &BaseMeasure,
    c: f64,
    t: usize,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    init: ModelParams,
    member: usize,
    observer: &mut Observer,
) -> Result<(ModelParams, TrainLog)> {
    check_inputs(dataset, spec, cfg)?;
    bm.validate(&dataset.shape)?;
    let n = dataset.len();
    let w = sample_dp_weights(n, c, t, &mut member_rng(cfg.seed, member, Stream::Weights))?
        .into_loss_weights(n as f64 + c);
    let mut train = dataset.examples.clone();
    let mut weights = w.weights[..n].to_vec();
    if c > 0.0 {
        let mut rng = member_rng(cfg.seed, member, Stream::Pseudo);
        for &wj in &w.weights[n..] {
            let z = sample_base_measure(bm, dataset, &mut rng)?;
            if wj > 0.0 {
                train.push(z);
                weights.push(wj);
            }
        }
    }
    erm(
        &train,
        Some(&weights),
        dataset,
        spec,
        cfg,
        init,
        member,
        observer,
    )
}

/// One Mixup martingale-posterior member. Every epoch permutes the data
/// once; each minibatch augments its points, draws `t_mb` Mixup
/// pseudo-points from the augmented batch and steps on
/// `(sum real loss + r n_mb / t_mb * sum pseudo loss) / n_mb`. With `r = 0`
/// no pseudo-points are drawn; with `r = inf` only pseudo-points enter, each
/// with weight `1 / t_mb`.
pub fn mixup_mp_member(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    pcfg: &PredictiveConfig,
    init: ModelParams,
    member: usize,
    observer: &mut Observer,
) -> Result<(ModelParams, TrainLog)> {
    check_inputs(dataset, spec, cfg)?;
    pcfg.validate(&dataset.shape)?;
    let mut loader = member_rng(cfg.seed, member, Stream::Loader);
    let mut aug_rng = member_rng(cfg.seed, member, Stream::Augment);
    let mut pseudo_rng = member_rng(cfg.seed, member, Stream::Pseudo);
    let data = &dataset.examples;
    run(spec, cfg, init, dataset, member, observer, |tr, epoch| {
        for idx in dataloader(data.len(), cfg.minibatch_size, loader.next_u64())? {
            let len = idx.len() as f64;
            let augmented: Vec<LabeledExample> = idx
                .iter()
                .map(|&i| sample_h_aug(&data[i], &pcfg.augment, &dataset.shape, &mut aug_rng))
                .collect();
            let t_mb = pcfg.t_mb.unwrap_or(idx.len());
            let mut batch = Batch::default();
            match pcfg.r {
                Concentration::Finite(r) => {
                    for z in &augmented {
                        batch.push(z, 1.0 / len);
                    }
                    if r > 0.0 {
                        let coef = r * len / t_mb as f64;
                        for z in sample_pseudo_batch(&augmented, t_mb, pcfg.alpha, &mut pseudo_rng)?
                        {
                            batch.push(&z, coef / len);
                        }
                    }
                }
                Concentration::Infinite => {
                    for z in sample_pseudo_batch(&augmented, t_mb, pcfg.alpha, &mut pseudo_rng)? {
                        batch.push(&z, 1.0 / t_mb as f64);
                    }
                }
            }
            tr.step(batch, epoch)?;
        }
        Ok(())
    })
}

/// One member of plain Mixup training: every minibatch slot is replaced by
/// a Mixup draw over the augmented minibatch and the batch mean is minimized.
#[allow(clippy::too_many_arguments)]
pub fn mixup_member(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    alpha: f64,
    augment: &AugmentationSet,
    init: ModelParams,
    member: usize,
    observer: &mut Observer,
) -> Result<(ModelParams, TrainLog)> {
    check_inputs(dataset, spec, cfg)?;
    augment.validate(&dataset.shape)?;
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
    }
    let mut loader = member_rng(cfg.seed, member, Stream::Loader);
    let mut aug_rng = member_rng(cfg.seed, member, Stream::Augment);
    let mut mix_rng = member_rng(cfg.seed, member, Stream::Pseudo);
    let data = &dataset.examples;
    run(spec, cfg, init, dataset, member, observer, |tr, epoch| {
        for idx in dataloader(data.len(), cfg.minibatch_size, loader.next_u64())? {
            let mut augmented = Vec::with_capacity(idx.len());
            for &i in &idx {
                augmented.push(sample_h_aug(
                    &data[i],
                    augment,
                    &dataset.shape,
                    &mut aug_rng,
                ));
            }
            let mut batch = Batch::default();
            for _ in 0..idx.len() {
                let z = sample_mixup(&augmented, alpha, &mut mix_rng)?;
                batch.push(&z, 1.0 / idx.len() as f64);
            }
            tr.step(batch, epoch)?;
        }
        Ok(())
    })
}

fn ensemble_of(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    algorithm: Algorithm,
    results: Vec<(ModelParams, TrainLog)>,
) -> Result<Trained> {
    let (members, logs) = results.into_iter().unzip();
    let mc_passes = match algorithm {
        Algorithm::McDropout { passes } => Some(passes),
        _ => None,
    };
    let provenance = Provenance {
        algorithm,
        train: cfg.clone(),
        seed: cfg.seed,
        mc_passes,
    };
    Ok(Trained {
        ensemble: Ensemble::new(spec.clone(), members, provenance)?,
        logs,
    })
}

fn check_members(b: usize) -> Result<()> {
    if b == 0 {
        Err(Error::invalid("ensemble size B must be at least 1"))
    } else {
        Ok(())
    }
}

fn random_init(spec: &NetworkSpec, cfg: &TrainConfig, member: usize) -> ModelParams {
    ModelParams::init_with(spec, &mut member_rng(cfg.seed, member, Stream::Init))
}

/// Deep ensemble: `b` independently initialized members on the unweighted loss.
pub fn train_de(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    b: usize,
    jobs: usize,
) -> Result<Trained> {
    check_members(b)?;
    let results = parallel_map(b, jobs, |m| {
        train_member_erm(dataset, spec, cfg, None, random_init(spec, cfg, m), m)
    })?;
    ensemble_of(spec, cfg, Algorithm::De, results)
}

pub fn train_bb(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    b: usize,
    opts: BbOptions,
    init: InitMode,
    jobs: usize,
) -> Result<Trained> {
    check_members(b)?;
    let results = parallel_map(b, jobs, |m| {
        let start = init.params(spec, cfg.seed, m)?;
        bb_member(dataset, spec, cfg, &opts, start, m, &mut |_, _| {})
    })?;
    let algorithm = Algorithm::Bb {
        stabilized: opts.stabilized,
        bound_m: opts.bound_m,
    };
    ensemble_of(spec, cfg, algorithm, results)
}

#[allow(clippy::too_many_arguments)]
pub fn train_dp_mp(
    dataset: &Dataset,
    bm: &BaseMeasure,
    c: f64,
    t: usize,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    b: usize,
    jobs: usize,
) -> Result<Trained> {
    check_members(b)?;
    let results = parallel_map(b, jobs, |m| {
        dp_mp_member(
            dataset,
            bm,
            c,
            t,
            spec,
            cfg,
            random_init(spec, cfg, m),
            m,
            &mut |_, _| {},
        )
    })?;
    let algorithm = Algorithm::DpMp {
        base_measure: bm.clone(),
        c,
        t,
    };
    ensemble_of(spec, cfg, algorithm, results)
}

pub fn train_mixup_mp(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    pcfg: &PredictiveConfig,
    b: usize,
    jobs: usize,
) -> Result<Trained> {
    check_members(b)?;
    let results = parallel_map(b, jobs, |m| {
        mixup_mp_member(
            dataset,
            spec,
            cfg,
            pcfg,
            random_init(spec, cfg, m),
            m,
            &mut |_, _| {},
        )
    })?;
    let algorithm = Algorithm::MixupMp {
        predictive: pcfg.clone(),
    };
    ensemble_of(spec, cfg, algorithm, results)
}

#[allow(clippy::too_many_arguments)]
pub fn train_mixup(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    alpha: f64,
    augment: &AugmentationSet,
    b: usize,
    jobs: usize,
) -> Result<Trained> {
    check_members(b)?;
    let results = parallel_map(b, jobs, |m| {
        mixup_member(
            dataset,
            spec,
            cfg,
            alpha,
            augment,
            random_init(spec, cfg, m),
            m,
            &mut |_, _| {},
        )
    })?;
    let algorithm = Algorithm::Mixup {
        alpha,
        augment: augment.clone(),
    };
    ensemble_of(spec, cfg, algorithm, results)
}

/// Trains `b` members with any algorithm from random initializations.
pub fn train_ensemble(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    algorithm: &Algorithm,
    b: usize,
    jobs: usize,
) -> Result<Trained> {
    match algorithm {
        Algorithm::De => train_de(dataset, spec, cfg, b, jobs),
        Algorithm::Bb {
            stabilized,
            bound_m,
        } => {
            let opts = BbOptions {
                stabilized: *stabilized,
                bound_m: *bound_m,
            };
            train_bb(dataset, spec, cfg, b, opts, InitMode::Random, jobs)
        }
        Algorithm::DpMp { base_measure, c, t } => {
            train_dp_mp(dataset, base_measure, *c, *t, spec, cfg, b, jobs)
        }
        Algorithm::MixupMp { predictive } => {
            train_mixup_mp(dataset, spec, cfg, predictive, b, jobs)
        }
        Algorithm::Mixup { alpha, augment } => {
            train_mixup(dataset, spec, cfg, *alpha, augment, b, jobs)
        }
        Algorithm::McDropout { passes } => {
            if !spec.has_dropout() {
                return Err(Error::invalid(
                    "mc-dropout needs a network with dropout layers",
                ));
            }
            if *passes == 0 {
                return Err(Error::invalid("mc-dropout needs at least one pass"));
            }
            let trained = train_de(dataset, spec, cfg, b, jobs)?;
            ensemble_of(
                spec,
                cfg,
                algorithm.clone(),
                trained
                    .ensemble
                    .members
                    .into_iter()
                    .zip(trained.logs)
                    .collect(),
            )
        }
    }
}
