//! `sika train`: fit a model from a CSV dataset and write its artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sika_core::data_io::{load_csv, save_model, Dataset, ModelMeta, Normalizer, Target, Task};
use sika_core::vi::{train, History, Targets};
use sika_core::SikaModel;

use crate::config::RunConfig;
use crate::output::{csv_bytes, finish_run, with_threads, write_file};

pub const MODEL_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const HISTORY_COLUMNS: [&str; 6] = ["epoch", "loss", "nll", "kl", "beta", "heldout"];
pub const TIMING_COLUMNS: [&str; 2] = ["epoch", "wall_ms"];

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: History,
    pub out_dir: PathBuf,
    pub clamped_heldout: usize,
}

/// Inputs mapped into `[0, 1]` together with the targets.
pub struct Prepared {
    pub x: Array2<f64>,
    pub targets: OwnedTargets,
    pub clamped: usize,
}

pub enum OwnedTargets {
    Regression(Array1<f64>),
    Classes(Vec<usize>),
}

impl OwnedTargets {
    pub fn view(&self) -> Targets<'_, f64> {
        match self {
            OwnedTargets::Regression(y) => Targets::Regression(y.view()),
            OwnedTargets::Classes(c) => Targets::Classes(c),
        }
    }
}

/// Relabels `labels` (indexing `names`) against the reference class list.
pub fn align_labels(labels: &[usize], names: &[String], reference: &[String]) -> Result<Vec<usize>> {
    let map = names
        .iter()
        .map(|n| {
            reference
                .iter()
                .position(|r| r == n)
                .with_context(|| format!("class {n:?} was not seen in training (known: {reference:?})"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(labels.iter().map(|&l| map[l]).collect())
}

pub fn prepare(data: &Dataset, normalizer: &Normalizer, classes: Option<&[String]>) -> Result<Prepared> {
    let norm = normalizer.apply::<f64>(data.x.view())?;
    let targets = match (&data.y, classes) {
        (Target::Regression(y), None) => OwnedTargets::Regression(Array1::from(y.clone())),
        (Target::Classes { labels, names }, Some(reference)) => {
            OwnedTargets::Classes(align_labels(labels, names, reference)?)
        }
        _ => bail!("target type does not match the task"),
    };
    Ok(Prepared { x: norm.x, targets, clamped: norm.clamped })
}

fn load(path: Option<&Path>, what: &str, cfg: &RunConfig) -> Result<Dataset> {
    let path = path.with_context(|| format!("no {what} data file configured (data.{what})"))?;
    load_csv(path, &cfg.data.target, cfg.data.task).with_context(|| format!("loading {what} data {}", path.display()))
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn history_rows(h: &History) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let rows = h
        .records
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                fmt_f64(r.loss),
                fmt_f64(r.nll),
                fmt_f64(r.kl),
                fmt_f64(r.beta),
                r.heldout.map(fmt_f64).unwrap_or_default(),
            ]
        })
        .collect();
    let timing = h
        .records
        .iter()
        .zip(&h.wall_ms)
        .map(|(r, ms)| vec![r.epoch.to_string(), format!("{ms:.3}")])
        .collect();
    (rows, timing)
}

/// Validates everything, trains, then writes the model, history and run records.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let train_set = load(cfg.data.train.as_deref(), "train", cfg)?;
    let heldout_set = match &cfg.data.heldout {
        Some(p) => Some(load(Some(p), "heldout", cfg)?),
        None => None,
    };
    if let Some(h) = &heldout_set {
        ensure!(
            h.dims() == train_set.dims(),
            "heldout data has {} features, training data has {}",
            h.dims(),
            train_set.dims()
        );
    }
    let normalizer = match &cfg.data.normalizer_bounds {
        Some(b) => {
            ensure!(
                b.len() == train_set.dims(),
                "data.normalizer_bounds lists {} features, data has {}",
                b.len(),
                train_set.dims()
            );
            Normalizer::from_bounds(b.iter().map(|&[lo, hi]| (lo, hi)).collect())?
        }
        None => Normalizer::fit(train_set.x.view())?,
    };
    let class_names = match (&train_set.y, cfg.data.task) {
        (Target::Classes { names, .. }, Task::Classification) => {
            ensure!(names.len() >= 2, "classification needs at least 2 classes, found {}", names.len());
            Some(names.clone())
        }
        _ => None,
    };
    let outputs = class_names.as_ref().map_or(1, Vec::len);
    let spec = cfg.model.spec(train_set.dims(), outputs, cfg.data.task)?;
    let train_data = prepare(&train_set, &normalizer, class_names.as_deref())?;
    if train_data.clamped > 0 {
        eprintln!("warning: {} training entries clamped into [0, 1]", train_data.clamped);
    }
    let heldout_data = heldout_set
        .as_ref()
        .map(|h| prepare(h, &normalizer, class_names.as_deref()))
        .transpose()?;
    let clamped_heldout = heldout_data.as_ref().map_or(0, |h| h.clamped);
    if clamped_heldout > 0 {
        eprintln!("warning: {clamped_heldout} heldout entries clamped into [0, 1]");
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    init_rng.set_stream(1);
    let mut model = SikaModel::<f64>::init(&spec, &mut init_rng)?;
    let history = with_threads(cfg.threads, || {
        train(
            &mut model,
            train_data.x.view(),
            train_data.targets.view(),
            &cfg.train,
            heldout_data.as_ref().map(|h| (h.x.view(), h.targets.view())),
        )
    })??;

    let meta = ModelMeta {
        normalizer,
        feature_names: train_set.feature_names.clone(),
        target_name: train_set.target_name.clone(),
        class_names,
    };
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_model(&model, &meta, &out.join(MODEL_FILE))?;
    let (rows, timing) = history_rows(&history);
    write_file(&out.join(HISTORY_FILE), &csv_bytes(&HISTORY_COLUMNS, &rows)?)?;
    write_file(&out.join(TIMING_FILE), &csv_bytes(&TIMING_COLUMNS, &timing)?)?;
    finish_run(&out, "train", cfg, start.elapsed())?;
    Ok(TrainOutcome { history, out_dir: out, clamped_heldout })
}
