//! The five subcommands.

use std::path::{Path, PathBuf};

use mpkit::datasets::{load_csv_with_classes, make_grid, write_csv, Dataset, DatasetManifest};
use mpkit::margin::{run_equivalency_experiment, write_scatter_csv, EquivalencyOptions};
use mpkit::metrics::{evaluate, predictive_entropy, predictive_uncertainty, DEFAULT_BIN_COUNT};
use mpkit::nn::argmax;
use mpkit::posterior::{
    ensemble_predict_batch, member_rng, train_ensemble, Algorithm, Ensemble, Stream,
};
use mpkit::predictive::{sample_base_measure, BaseMeasure};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Method, RunConfig};
use crate::data::{load_raw, Preprocessing, PREPROCESSING_FILE};
use crate::{
    csv_io, csv_writer, num, prepare_out_dir, write_json, write_text, Failure, Global, Outcome,
    RESOLVED_CONFIG,
};

/// Stream reserved for dropout masks drawn at prediction time.
const EVAL_STREAM: u64 = u64::MAX;

fn with_seed(cfg: &RunConfig, g: &Global) -> RunConfig {
    let mut cfg = cfg.clone();
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg
}

fn write_resolved(out: &Path, cfg: &RunConfig, n: usize, margin: bool) -> Outcome<()> {
    let text = cfg.resolved(n, margin)?.to_toml()?;
    write_text(&out.join(RESOLVED_CONFIG), &text)
}

const GEN_DATA_FILES: &[&str] = &[
    "train.csv",
    "test.csv",
    "manifest.json",
    "predictive_samples.csv",
    RESOLVED_CONFIG,
];

/// Writes the configured dataset as CSV with a manifest. For `dp-mp` and
/// `mixup-mp` configs it also writes draws from the base measure next to
/// the observations.
pub fn cmd_gen_data(cfg: &RunConfig, g: &Global) -> Outcome<()> {
    let cfg = with_seed(cfg, g);
    cfg.validate()?;
    let raw = load_raw(&cfg)?;
    let pre = raw.preprocessing(&cfg.dataset);
    let pseudo = pseudo_measure(&cfg)?;
    prepare_out_dir(&g.out, g.force, GEN_DATA_FILES)?;
    write_csv(&raw.train, &g.out.join("train.csv"))?;
    if let Some(test) = &raw.test {
        write_csv(test, &g.out.join("test.csv"))?;
    }
    let manifest = DatasetManifest {
        source: format!("{:?}", cfg.dataset.source).to_lowercase(),
        num_examples: raw.train.len(),
        num_classes: raw.train.num_classes,
        shape: raw.train.shape,
        seed: raw.seed,
        standardization: pre.standardization,
        cluster_centers: raw.cluster_centers.clone(),
    };
    write_json(&g.out.join("manifest.json"), &manifest)?;
    if let Some(bm) = pseudo {
        let (train, _) = raw.prepared(&pre);
        write_predictive_samples(
            &g.out.join("predictive_samples.csv"),
            &train,
            &bm,
            &pre,
            cfg.seed,
        )?;
    }
    write_resolved(&g.out, &cfg, raw.train.len(), false)
}

/// Base measure whose draws illustrate the configured predictive, if any.
fn pseudo_measure(cfg: &RunConfig) -> Outcome<Option<BaseMeasure>> {
    let p = &cfg.predictive;
    Ok(match p.method {
        Method::DpMp => Some(
            p.base_measure
                .clone()
                .ok_or_else(|| Failure::Config("dp-mp needs predictive.base_measure".into()))?,
        ),
        Method::MixupMp => Some(BaseMeasure::Mixup {
            alpha: p.alpha.unwrap_or(1.0),
            augment: p.augment.clone().unwrap_or_default(),
        }),
        _ => None,
    })
}

/// Rows `kind, x0.., p0..`: every observation, then as many base-measure draws.
fn write_predictive_samples(
    path: &Path,
    data: &Dataset,
    bm: &BaseMeasure,
    pre: &Preprocessing,
    seed: u64,
) -> Outcome<()> {
    bm.validate(&data.shape)?;
    let mut rng = member_rng(seed, 0, Stream::Pseudo);
    let mut w = csv_writer(path)?;
    let io = csv_io(path);
    let d = data.shape.len();
    let k = data.num_classes;
    let mut header = vec!["kind".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    header.extend((0..k).map(|j| format!("p{j}")));
    w.write_record(&header).map_err(&io)?;
    let mut row = |kind: &str, ex: &mpkit::datasets::LabeledExample| -> Outcome<()> {
        let mut r = vec![kind.to_string()];
        r.extend(ex.features.iter().map(|&v| num(pre.raw(v))));
        r.extend(ex.label.iter().map(|&v| num(v)));
        w.write_record(&r).map_err(&io)
    };
    for ex in &data.examples {
        row("observed", ex)?;
    }
    for _ in 0..data.len() {
        let ex = sample_base_measure(bm, data, &mut rng)?;
        row("pseudo", &ex)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct MemberSummary {
    member: usize,
    epochs: usize,
    separated_at: Option<usize>,
    train_accuracy: f64,
    final_loss: Option<f64>,
}

/// Trains the configured posterior and writes the ensemble into `out`, with
/// per-epoch loss logs under `logs/`.
pub fn cmd_train(cfg: &RunConfig, g: &Global) -> Outcome<Ensemble> {
    let cfg = with_seed(cfg, g);
    cfg.validate()?;
    let raw = load_raw(&cfg)?;
    let pre = raw.preprocessing(&cfg.dataset);
    let (train, _) = raw.prepared(&pre);
    let tc = cfg.train_config(train.len(), false)?;
    let spec = cfg.network_spec(&train)?;
    let (algo, passes) = cfg.algorithm(train.len())?;
    let members = cfg.members();
    let mut files: Vec<String> = vec![
        mpkit::posterior::MANIFEST_FILE.into(),
        PREPROCESSING_FILE.into(),
        RESOLVED_CONFIG.into(),
        "logs".into(),
        "summary.json".into(),
    ];
    files.extend(existing_members(&g.out));
    let known: Vec<&str> = files.iter().map(String::as_str).collect();
    prepare_out_dir(&g.out, g.force, &known)?;

    let mut trained = train_ensemble(&train, &spec, &tc, &algo, members, g.jobs)?;
    if !matches!(algo, Algorithm::McDropout { .. }) {
        trained.ensemble.provenance.mc_passes = passes;
    }
    let ens = trained.ensemble;
    ens.save(&g.out)?;
    write_json(&g.out.join(PREPROCESSING_FILE), &pre)?;
    let logs = g.out.join("logs");
    std::fs::create_dir_all(&logs)?;
    let mut summary = Vec::with_capacity(members);
    for (b, log) in trained.logs.iter().enumerate() {
        let path = logs.join(format!("member_{b:03}.csv"));
        let mut w = csv_writer(&path)?;
        let io = csv_io(&path);
        w.write_record(["epoch", "loss"]).map_err(&io)?;
        for (e, loss) in log.epoch_losses.iter().enumerate() {
            w.write_record([(e + 1).to_string(), num(*loss)])
                .map_err(&io)?;
        }
        w.flush()?;
        summary.push(MemberSummary {
            member: b,
            epochs: log.epochs,
            separated_at: log.separated_at,
            train_accuracy: log.train_accuracy,
            final_loss: log.epoch_losses.last().copied(),
        });
    }
    write_json(&g.out.join("summary.json"), &summary)?;
    write_resolved(&g.out, &cfg, train.len(), false)?;
    Ok(ens)
}

fn existing_members(dir: &Path) -> Vec<String> {
    std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("member_") && n.ends_with(".bin"))
        .collect()
}

/// Loads an ensemble with the config and preprocessing it was trained with.
fn load_trained(
    dir: &Path,
    cfg: Option<&RunConfig>,
) -> Outcome<(Ensemble, RunConfig, Preprocessing)> {
    let ens = Ensemble::load(dir)?;
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => RunConfig::load(&dir.join(RESOLVED_CONFIG))?,
    };
    let pre = Preprocessing::load(dir)?;
    Ok((ens, cfg, pre))
}

/// Dataset choice for `eval`.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalData {
    /// The configured test set (the training set when there is none).
    Test,
    Train,
    /// A CSV file with a `label` column, in raw feature units.
    Csv(PathBuf),
}

#[derive(Serialize)]
struct EvalReport<'a> {
    method: &'a str,
    members: usize,
    mc_passes: Option<usize>,
    data: String,
    #[serde(flatten)]
    report: mpkit::metrics::CalibrationReport,
}

fn predict_all(ens: &Ensemble, ds: &Dataset, seed: u64) -> Outcome<Vec<Vec<f64>>> {
    let d = ens.spec.input.len();
    if ds.shape.len() != d {
        return Err(Failure::Config(format!(
            "data has {} features, the ensemble expects {d}",
            ds.shape.len()
        )));
    }
    let inputs = ds.features_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    let dropout = ens
        .mc_dropout()
        .map(|m| (m, &mut rng as &mut dyn rand::RngCore));
    Ok(ensemble_predict_batch(ens, &inputs, ds.len(), dropout)?)
}

/// Writes `report.json` and `probabilities.csv` for an ensemble on a dataset.
pub fn cmd_eval(
    ensemble_dir: &Path,
    cfg: Option<&RunConfig>,
    data: &EvalData,
    g: &Global,
) -> Outcome<mpkit::metrics::CalibrationReport> {
    let (ens, cfg, pre) = load_trained(ensemble_dir, cfg)?;
    let cfg = with_seed(&cfg, g);
    let k = ens.spec.num_classes;
    let (ds, label) = match data {
        EvalData::Csv(path) => {
            let mut ds = load_csv_with_classes(path, "label", Some(k))?;
            pre.apply(&mut ds);
            (ds, path.display().to_string())
        }
        EvalData::Train | EvalData::Test => {
            let raw = load_raw(&cfg)?;
            let (train, test) = raw.prepared(&pre);
            if *data == EvalData::Train {
                (train, "train".to_string())
            } else {
                let name = if raw.test.is_some() { "test" } else { "train" };
                (test, name.to_string())
            }
        }
    };
    if ds.num_classes != k {
        return Err(Failure::Config(format!(
            "data has {} classes, the ensemble predicts {k}",
            ds.num_classes
        )));
    }
    prepare_out_dir(
        &g.out,
        g.force,
        &["report.json", "probabilities.csv", RESOLVED_CONFIG],
    )?;
    let probs = predict_all(&ens, &ds, cfg.seed)?;
    let labels = ds.classes();
    let report = evaluate(&probs, &labels, DEFAULT_BIN_COUNT)?;

    let path = g.out.join("probabilities.csv");
    let mut w = csv_writer(&path)?;
    let io = csv_io(&path);
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend((0..k).map(|j| format!("p{j}")));
    header.extend(["entropy".to_string(), "uncertainty".to_string()]);
    w.write_record(&header).map_err(&io)?;
    for (i, (p, y)) in probs.iter().zip(&labels).enumerate() {
        let mut row = vec![i.to_string(), y.to_string()];
        row.extend(p.iter().map(|&v| num(v)));
        row.push(num(predictive_entropy(p)));
        row.push(num(uncertainty(p, k)?));
        w.write_record(&row).map_err(&io)?;
    }
    w.flush()?;

    let out = EvalReport {
        method: ens.provenance.algorithm.name(),
        members: ens.len(),
        mc_passes: ens.provenance.mc_passes,
        data: label,
        report: report.clone(),
    };
    write_json(&g.out.join("report.json"), &out)?;
    write_resolved(&g.out, &cfg, ds.len(), false)?;
    Ok(report)
}

fn uncertainty(p: &[f64], k: usize) -> Outcome<f64> {
    if k < 2 {
        return Ok(0.0);
    }
    Ok(predictive_uncertainty(p, k)?)
}

/// Grid options for `landscape`; unset fields come from `[experiment]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GridOptions {
    pub resolution: Option<usize>,
    pub padding: Option<f64>,
}

/// One landscape row in raw feature coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapePoint {
    pub x1: f64,
    pub x2: f64,
    pub uncertainty: f64,
    pub entropy: f64,
    pub predicted_class: usize,
}

/// Writes `landscape.csv`: predictive uncertainty over a padded grid around
/// the training data, first coordinate varying slowest.
pub fn cmd_landscape(
    ensemble_dir: &Path,
    cfg: Option<&RunConfig>,
    grid: GridOptions,
    g: &Global,
) -> Outcome<Vec<LandscapePoint>> {
    let (ens, cfg, pre) = load_trained(ensemble_dir, cfg)?;
    let cfg = with_seed(&cfg, g);
    if ens.spec.input.len() != 2 {
        return Err(Failure::Config(format!(
            "landscapes need 2-D features, the ensemble takes {}",
            ens.spec.input.len()
        )));
    }
    let raw = load_raw(&cfg)?;
    let (train, _) = raw.prepared(&pre);
    let resolution = grid.resolution.unwrap_or(cfg.experiment.grid_resolution);
    let padding = grid.padding.unwrap_or(cfg.experiment.grid_padding);
    let eval_grid = make_grid(&train, padding, resolution)?;
    let grid_ds = Dataset {
        examples: eval_grid
            .points
            .iter()
            .map(|p| mpkit::datasets::LabeledExample::one_hot(p.clone(), 0, ens.spec.num_classes))
            .collect(),
        num_classes: ens.spec.num_classes,
        shape: ens.spec.input,
    };
    prepare_out_dir(&g.out, g.force, &["landscape.csv", RESOLVED_CONFIG])?;
    let probs = predict_all(&ens, &grid_ds, cfg.seed)?;
    let k = ens.spec.num_classes;
    let mut points = Vec::with_capacity(probs.len());
    for (x, p) in eval_grid.points.iter().zip(&probs) {
        points.push(LandscapePoint {
            x1: pre.raw(x[0]),
            x2: pre.raw(x[1]),
            uncertainty: uncertainty(p, k)?,
            entropy: predictive_entropy(p),
            predicted_class: argmax(p),
        });
    }
    let path = g.out.join("landscape.csv");
    let mut w = csv_writer(&path)?;
    let io = csv_io(&path);
    w.write_record(["x1", "x2", "uncertainty", "entropy", "predicted_class"])
        .map_err(&io)?;
    for p in &points {
        w.write_record([
            num(p.x1),
            num(p.x2),
            num(p.uncertainty),
            num(p.entropy),
            p.predicted_class.to_string(),
        ])
        .map_err(&io)?;
    }
    w.flush()?;
    let mut resolved = cfg.clone();
    resolved.experiment.grid_resolution = resolution;
    resolved.experiment.grid_padding = padding;
    write_resolved(&g.out, &resolved, train.len(), false)?;
    Ok(points)
}

/// Runs the paired DE/BB experiment and writes `report.json`, `scatter.csv`
/// and both ensembles under `de/` and `bb/`.
pub fn cmd_equivalency(cfg: &RunConfig, g: &Global) -> Outcome<mpkit::margin::EquivalencyReport> {
    let cfg = with_seed(cfg, g);
    cfg.validate()?;
    let raw = load_raw(&cfg)?;
    let pre = raw.preprocessing(&cfg.dataset);
    let (train, test) = raw.prepared(&pre);
    let tc = cfg.train_config(train.len(), true)?;
    let spec = cfg.network_spec(&train)?;
    if cfg.predictive.method != Method::De {
        return Err(Failure::Config(
            "equivalency compares de and bb itself; leave predictive.method unset".into(),
        ));
    }
    let opts = EquivalencyOptions {
        mode: cfg.experiment.mode,
        members: cfg.members(),
        bb_epochs: cfg.experiment.bb_epochs,
        checkpoint_every: cfg.experiment.checkpoint_every,
        jobs: g.jobs,
    };
    prepare_out_dir(
        &g.out,
        g.force,
        &["report.json", "scatter.csv", "de", "bb", RESOLVED_CONFIG],
    )?;
    let run = run_equivalency_experiment(&train, &test, &spec, &tc, &opts)?;
    for (name, ens) in [("de", &run.de), ("bb", &run.bb)] {
        let dir = g.out.join(name);
        ens.save(&dir)?;
        write_json(&dir.join(PREPROCESSING_FILE), &pre)?;
    }
    write_json(&g.out.join("report.json"), &run.report)?;
    write_scatter_csv(&run.report, &g.out.join("scatter.csv"))?;
    write_resolved(&g.out, &cfg, train.len(), true)?;
    Ok(run.report)
}
