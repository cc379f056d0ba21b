use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ssmix::artifact::{ModelArtifact, ModelMeta};
use ssmix::data::{read_raw_csv_path, SplitLabel, WindowDataset};
use ssmix::eval::{
    check_compatible, doubling_ratios, evaluate as score, latency_sweep, permutation_importance, predict as forecast,
    synth, BenchOptions, BootstrapOptions, Interval, LatencyStats, Metrics, ScalingRatio,
};
use ssmix::model::{forward, Mode, ModelConfig};
use ssmix::train::{fit, EpochRecord, TrainReport};

use crate::config::RunConfig;
use crate::report::Report;
use crate::Failure;

pub const PREPARE_SCHEMA: &str = "ssmix.prepare";
pub const TRAIN_SCHEMA: &str = "ssmix.train";
pub const EVALUATE_SCHEMA: &str = "ssmix.evaluate";
pub const BENCH_SCHEMA: &str = "ssmix.bench";

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Failure::io(p, e)),
        _ => Ok(()),
    }
}

fn report_path(cfg: &RunConfig, name: &str) -> Result<PathBuf, Failure> {
    let dir = &cfg.paths.report_dir;
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    Ok(dir.join(name))
}

fn file_digest(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>, Failure> {
    ensure_parent(path)?;
    Ok(BufWriter::new(std::fs::File::create(path).map_err(|e| Failure::io(path, e))?))
}

pub fn synth(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let path = out.unwrap_or(&cfg.paths.input);
    let log = synth::generate(&cfg.synth)?;
    let mut w = create(path)?;
    log.write_csv(&mut w)?;
    w.flush().map_err(|e| Failure::io(path, e))?;
    println!("wrote {} ({} rows)", path.display(), log.timestamps.len());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub rows: usize,
    pub columns: Vec<String>,
    pub windows: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub imputed_rows: usize,
    pub dataset_digest: String,
}

pub fn prepare(cfg: &RunConfig) -> Result<(), Failure> {
    require_file(&cfg.paths.input, "input")?;
    ensure_parent(&cfg.paths.dataset)?;
    let report = report_path(cfg, "prepare.json")?;
    let raw = read_raw_csv_path(&cfg.paths.input)?;
    let ds = WindowDataset::prepare(&raw, &cfg.data)?;
    let digest = ds.save(&cfg.paths.dataset)?;
    let summary = PrepareSummary {
        rows: ds.table.rows(),
        columns: ds.table.columns.clone(),
        windows: ds.len(),
        train: ds.split.train().len(),
        val: ds.split.val().len(),
        test: ds.split.test().len(),
        imputed_rows: ds.table.imputed.iter().filter(|&&b| b).count(),
        dataset_digest: digest.clone(),
    };
    let inputs = BTreeMap::from([("input".to_owned(), file_digest(&cfg.paths.input)?)]);
    Report::new(PREPARE_SCHEMA, cfg, inputs, summary).write(&report)?;
    println!(
        "wrote {} ({} windows: {} train, {} val, {} test) sha256 {digest}",
        cfg.paths.dataset.display(),
        ds.len(),
        ds.split.train().len(),
        ds.split.val().len(),
        ds.split.test().len()
    );
    Ok(())
}

/// Model settings from the run config with the dataset's input and output
/// widths.
fn model_config(cfg: &RunConfig, ds: &WindowDataset) -> Result<ModelConfig, Failure> {
    let m = ModelConfig { n_features: ds.n_features(), output_dim: ds.n_outputs(), ..cfg.model.clone() };
    m.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    check_compatible(&m, ds)?;
    Ok(m)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub early_stopped: bool,
    pub parameters: usize,
    pub model_digest: String,
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    require_file(&cfg.paths.dataset, "dataset")?;
    ensure_parent(&cfg.paths.model)?;
    let log_path = report_path(cfg, "train_log.jsonl")?;
    let report = report_path(cfg, "train.json")?;
    let ds = WindowDataset::load(&cfg.paths.dataset)?;
    let dataset_digest = ds.digest()?;
    let model_cfg = model_config(cfg, &ds)?;
    let sw = ds.standardized::<f64>()?;
    let (train, val) = (sw.samples(ds.split.train()), sw.samples(ds.split.val()));
    if train.is_empty() || val.is_empty() {
        return Err(ssmix::Error::Data { stage: "chrono_split", detail: "empty train or validation split".into() }.into());
    }

    let mut log = create(&log_path)?;
    let mut write_err = None;
    let (params, outcome): (_, TrainReport) = fit(&train, &val, &model_cfg, &cfg.train, &mut |e: &EpochRecord| {
        let line = serde_json::to_string(e).expect("epoch record serializes");
        if let Err(err) = writeln!(log, "{line}") {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Failure::io(&log_path, e));
    }
    log.flush().map_err(|e| Failure::io(&log_path, e))?;

    let echo = RunConfig { model: model_cfg.clone(), data: ds.config.clone(), ..cfg.clone() };
    let meta = ModelMeta {
        model: model_cfg,
        train: cfg.train.clone(),
        data: ds.config.clone(),
        columns: ds.table.columns.clone(),
        scaler: ds.scaler.clone(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        dataset_digest: dataset_digest.clone(),
    };
    let artifact = ModelArtifact::new(meta, &params)?;
    let digest = artifact.save(&cfg.paths.model)?;
    let summary = TrainSummary {
        epochs: outcome.epochs.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        early_stopped: outcome.early_stopped,
        parameters: params.num_params(),
        model_digest: digest.clone(),
    };
    let inputs = BTreeMap::from([("dataset".to_owned(), dataset_digest)]);
    Report::new(TRAIN_SCHEMA, &echo, inputs, summary).write(&report)?;
    println!(
        "wrote {} (best epoch {} of {}, val loss {:.6}) sha256 {digest}",
        cfg.paths.model.display(),
        outcome.best_epoch,
        outcome.epochs.len(),
        outcome.best_val_loss
    );
    Ok(())
}

/// The run config with the model, training and data sections replaced by
/// those stored in the model.
fn echo_of(cfg: &RunConfig, model: &ModelArtifact) -> RunConfig {
    RunConfig {
        model: model.meta.model.clone(),
        train: model.meta.train.clone(),
        data: model.meta.data.clone(),
        ..cfg.clone()
    }
}

/// A saved model with a dataset re-expressed in the model's scaler, so every
/// forecast uses the statistics the model was fitted with.
fn load_pair(cfg: &RunConfig) -> Result<(ModelArtifact, WindowDataset, BTreeMap<String, String>), Failure> {
    require_file(&cfg.paths.model, "model")?;
    require_file(&cfg.paths.dataset, "dataset")?;
    let model = ModelArtifact::load(&cfg.paths.model)?;
    let mut ds = WindowDataset::load(&cfg.paths.dataset)?;
    let inputs = BTreeMap::from([
        ("dataset".to_owned(), ds.digest()?),
        ("model".to_owned(), model.to_container()?.digest_hex()?),
    ]);
    if ds.table.columns != model.meta.columns || ds.config.targets != model.meta.data.targets {
        return Err(ssmix::Error::InvalidArgument(format!(
            "dataset columns {:?} / targets {:?} differ from the model's {:?} / {:?}",
            ds.table.columns, ds.config.targets, model.meta.columns, model.meta.data.targets
        ))
        .into());
    }
    check_compatible(&model.meta.model, &ds)?;
    if inputs["dataset"] != model.meta.dataset_digest {
        log::warn!("dataset differs from the one the model was trained on; using the model's scaler");
    }
    ds.scaler = model.meta.scaler.clone();
    Ok((model, ds, inputs))
}

fn split_range(ds: &WindowDataset, split: &str) -> Result<Range<usize>, Failure> {
    let label = match split {
        "train" => SplitLabel::Train,
        "val" => SplitLabel::Val,
        "test" => SplitLabel::Test,
        other => return Err(Failure::Usage(format!("unknown split {other:?} (train | val | test)"))),
    };
    Ok(ds.split.range(label))
}

pub fn predict(cfg: &RunConfig, window_file: Option<&Path>, split: Option<&str>, out: Option<&Path>) -> Result<(), Failure> {
    if let Some(path) = window_file {
        return predict_window(cfg, path);
    }
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => report_path(cfg, "predictions.csv")?,
    };
    let (model, ds, _) = load_pair(cfg)?;
    let range = split_range(&ds, split.unwrap_or("test"))?;
    let pred = forecast(&model.params, &model.meta.model, &ds, range.clone())?;
    let o = ds.n_outputs();
    let mut w = csv::Writer::from_writer(create(&out)?);
    w.write_record(["window", "target", "origin_time", "target_time", "prediction", "truth", "persistence", "error"])
        .map_err(ssmix::Error::from)?;
    for (k, i) in range.clone().enumerate() {
        let (truth, pers) = (ds.target(i), ds.persistence(i));
        let origin = ds.table.t0 + ds.origin_step(i) as f64 * ds.table.stride;
        let target_t = ds.table.t0 + ds.target_step(i) as f64 * ds.table.stride;
        for j in 0..o {
            let p = pred[k * o + j];
            w.write_record([
                i.to_string(),
                ds.config.targets[j].clone(),
                origin.to_string(),
                target_t.to_string(),
                p.to_string(),
                truth[j].to_string(),
                pers[j].to_string(),
                (p - truth[j]).to_string(),
            ])
            .map_err(ssmix::Error::from)?;
        }
    }
    w.flush().map_err(|e| Failure::io(&out, e))?;
    println!("wrote {} ({} windows)", out.display(), range.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct WindowForecast<'a> {
    targets: &'a [String],
    values: Vec<f64>,
    /// Forecasts are in the units of the target columns of the input log.
    units: &'static str,
}

fn predict_window(cfg: &RunConfig, path: &Path) -> Result<(), Failure> {
    require_file(&cfg.paths.model, "model")?;
    require_file(path, "window file")?;
    let model = ModelArtifact::load(&cfg.paths.model)?;
    let meta = &model.meta;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(ssmix::Error::from)?;
    let headers = rdr.headers().map_err(ssmix::Error::from)?.clone();
    let index = meta
        .columns
        .iter()
        .map(|c| {
            headers.iter().position(|h| h == c).ok_or_else(|| {
                ssmix::Error::InvalidArgument(format!("window file {} lacks column {c:?}", path.display()))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut x = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(ssmix::Error::from)?;
        for &j in &index {
            let v: f64 = rec[j].parse().map_err(|_| {
                ssmix::Error::InvalidArgument(format!("{}: {:?} is not a number", path.display(), &rec[j]))
            })?;
            x.push(v);
        }
    }
    let (l, f) = (meta.model.window, meta.model.n_features);
    if x.len() != l * f {
        return Err(ssmix::Error::InvalidArgument(format!(
            "window file has {} rows, the model reads {l}",
            x.len() / f.max(1)
        ))
        .into());
    }
    meta.scaler.standardize_rows(&mut x)?;
    let (y, _) = forward(&model.params, &meta.model, &x, Mode::Eval)?;
    let values = meta.scaler.destandardize_target(&y)?;
    let out = WindowForecast { targets: &meta.data.targets, values, units: "input" };
    println!("{}", serde_json::to_string(&out).map_err(ssmix::Error::from)?);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    /// Test RMSE increase when the feature is permuted across windows.
    pub delta_rmse: f64,
}

/// Test-tail scores. Interval and importance fields appear only when
/// requested.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub split: String,
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    pub mse: f64,
    pub r2: Option<f64>,
    pub persistence: Metrics,
    pub skill_rmse: Option<f64>,
    pub skill_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intervals: Option<Vec<Interval>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub importance: Option<Vec<FeatureImportance>>,
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), Failure> {
    let report = report_path(cfg, "evaluate.json")?;
    let (model, ds, inputs) = load_pair(cfg)?;
    let test = ds.split.test();
    if test.is_empty() {
        return Err(ssmix::Error::Data { stage: "chrono_split", detail: "the test split is empty".into() }.into());
    }
    let ci = cfg.eval.bootstrap.then(|| BootstrapOptions {
        level: cfg.eval.level,
        resamples: cfg.eval.resamples,
        seed: cfg.seed,
    });
    let m = score(&model.params, &model.meta.model, &ds, test.clone(), ci.as_ref())?;
    let importance = if cfg.eval.importance {
        let mut v = Vec::with_capacity(ds.n_features());
        for (f, name) in ds.table.columns.iter().enumerate() {
            let delta = permutation_importance(&model.params, &model.meta.model, &ds, test.clone(), f, cfg.seed)?;
            v.push(FeatureImportance { feature: name.clone(), delta_rmse: delta });
        }
        Some(v)
    } else {
        None
    };
    let summary = EvaluateSummary {
        split: "test".into(),
        n: m.n,
        rmse: m.rmse,
        mae: m.mae,
        mse: m.mse,
        r2: m.r2,
        persistence: m.persistence,
        skill_rmse: m.skill_rmse,
        skill_mae: m.skill_mae,
        intervals: ci.map(|_| m.intervals),
        importance,
    };
    let line = format!(
        "test n={} rmse {:.4} mae {:.4} (persistence rmse {:.4}) skill {}",
        summary.n,
        summary.rmse,
        summary.mae,
        summary.persistence.rmse,
        summary.skill_rmse.map_or("undefined".into(), |s| format!("{s:.4}"))
    );
    Report::new(EVALUATE_SCHEMA, &echo_of(cfg, &model), inputs, summary).write(&report)?;
    println!("{line}");
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BenchSummary {
    pub precision: String,
    pub runs: Vec<LatencyStats>,
    pub doubling: Vec<ScalingRatio>,
}

pub fn bench(cfg: &RunConfig) -> Result<(), Failure> {
    let report = report_path(cfg, "bench.json")?;
    let table = report_path(cfg, "bench.csv")?;
    let ratios = report_path(cfg, "bench_ratios.csv")?;
    let mut windows = cfg.bench.windows.clone();
    windows.sort_unstable();
    windows.dedup();
    let Some(&shortest) = windows.first() else {
        return Err(Failure::Usage("bench needs at least one window".into()));
    };
    // the kernel length stays fixed across the grid
    let base = ModelConfig { n_features: ssmix::data::KPI_COLUMNS.len(), window: shortest, ..cfg.model.clone() };
    base.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let opts = BenchOptions { warmup: cfg.bench.warmup, repetitions: cfg.bench.repetitions, seed: cfg.seed };
    let runs = latency_sweep::<f64>(&base, &windows, &opts)?;
    let doubling = doubling_ratios(&runs);

    let mut w = csv::Writer::from_writer(create(&table)?);
    for r in &runs {
        w.serialize(r).map_err(ssmix::Error::from)?;
    }
    w.flush().map_err(|e| Failure::io(&table, e))?;
    let mut w = csv::Writer::from_writer(create(&ratios)?);
    for r in &doubling {
        w.serialize(r).map_err(ssmix::Error::from)?;
    }
    w.flush().map_err(|e| Failure::io(&ratios, e))?;

    for r in &runs {
        println!("L={:<5} median {:.3e} s  p95 {:.3e} s", r.window, r.median, r.p95);
    }
    for r in &doubling {
        println!("L {} -> {}: x{:.3}", r.from_window, r.to_window, r.ratio);
    }
    let summary = BenchSummary { precision: "f64".into(), runs, doubling };
    Report::new(BENCH_SCHEMA, cfg, BTreeMap::new(), summary).write(&report)?;
    Ok(())
}
