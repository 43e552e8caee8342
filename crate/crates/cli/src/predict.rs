//! `sika predict`: Monte Carlo predictive summaries for a CSV file.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sika_core::data_io::{load_csv, load_model, ModelMeta, Task};
use sika_core::metrics::{self, CalibrationConfig};
use sika_core::vi::{predict, softmax};
use sika_core::SikaModel;

use crate::config::RunConfig;
use crate::output::{csv_bytes, finish_run, with_threads, write_file};
use crate::train::{fmt_f64, prepare, OwnedTargets};

pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REGRESSION_COLUMNS: [&str; 4] = ["row", "y", "mean", "variance"];
pub const METRIC_COLUMNS: [&str; 2] = ["metric", "value"];

/// Leading columns of a classification file; `p_<class>` columns follow in
/// label order, then `entropy` and `mi`.
pub const CLASSIFICATION_PREFIX: [&str; 3] = ["row", "label", "predicted"];

#[derive(Debug)]
pub struct PredictOutcome {
    pub metrics: Vec<(String, f64)>,
    pub rows: usize,
    pub clamped: usize,
    pub out_dir: PathBuf,
}

pub fn classification_header(class_names: &[String]) -> Vec<String> {
    let mut h: Vec<String> = CLASSIFICATION_PREFIX.iter().map(|s| s.to_string()).collect();
    h.extend(class_names.iter().map(|n| format!("p_{n}")));
    h.push("entropy".into());
    h.push("mi".into());
    h
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("no {key} configured"))
}

pub fn run_predict(cfg: &RunConfig) -> Result<PredictOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let model_path = required(&cfg.predict.model, "predict.model")?;
    let data_path = required(&cfg.predict.data, "predict.data")?;
    let (model, meta): (SikaModel<f64>, ModelMeta) =
        load_model(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let task = if meta.class_names.is_some() { Task::Classification } else { Task::Regression };
    let data = load_csv(data_path, &meta.target_name, task)
        .with_context(|| format!("loading data {}", data_path.display()))?;
    ensure!(
        data.dims() == meta.normalizer.dims(),
        "data has {} feature columns {:?} but the model was trained on {} {:?}",
        data.dims(),
        data.feature_names,
        meta.normalizer.dims(),
        meta.feature_names
    );
    let prepared = prepare(&data, &meta.normalizer, meta.class_names.as_deref())?;
    if prepared.clamped > 0 {
        eprintln!("warning: {} entries outside the training range clamped into [0, 1]", prepared.clamped);
    }
    let samples = cfg.predict.samples;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let summary = with_threads(cfg.threads, || predict(&model, prepared.x.view(), samples, &mut rng))??;

    let n = data.len();
    let (header, rows, metrics) = match &prepared.targets {
        OwnedTargets::Regression(y) => {
            let rows: Vec<Vec<String>> = (0..n)
                .map(|i| {
                    vec![
                        i.to_string(),
                        fmt_f64(y[i]),
                        fmt_f64(summary.mean[i]),
                        fmt_f64(summary.variance[i]),
                    ]
                })
                .collect();
            let y = y.as_slice().expect("contiguous");
            let mean = summary.mean.as_slice().expect("contiguous");
            let var = summary.variance.as_slice().expect("contiguous");
            let metrics = vec![
                ("rmse".to_string(), metrics::rmse(y, mean)?),
                ("nlpd".to_string(), metrics::nlpd(y, mean, var)?),
            ];
            (REGRESSION_COLUMNS.iter().map(|s| s.to_string()).collect(), rows, metrics)
        }
        OwnedTargets::Classes(labels) => {
            let names = meta.class_names.as_deref().expect("classification model");
            let probs = summary.class_probs.as_ref().expect("categorical summary");
            let draws = summary.samples.as_ref().expect("draws kept");
            let per_draw: Vec<_> = draws.axis_iter(Axis(0)).map(softmax).collect();
            let prob_rows: Vec<Vec<f64>> = probs.rows().into_iter().map(|r| r.to_vec()).collect();
            let mut rows = Vec::with_capacity(n);
            let mut confidences = Vec::with_capacity(n);
            let mut correct = Vec::with_capacity(n);
            for i in 0..n {
                let p = &prob_rows[i];
                let pred = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
                let draw_probs: Vec<Vec<f64>> = per_draw.iter().map(|d| d.row(i).to_vec()).collect();
                let mut row = vec![i.to_string(), names[labels[i]].clone(), names[pred].clone()];
                row.extend(p.iter().map(|&v| fmt_f64(v)));
                row.push(fmt_f64(metrics::predictive_entropy(p)?));
                row.push(fmt_f64(metrics::mutual_information(&draw_probs)?));
                rows.push(row);
                confidences.push(p[pred]);
                correct.push(pred == labels[i]);
            }
            let calib = CalibrationConfig { num_bins: cfg.predict.ece_bins };
            let metrics = vec![
                ("accuracy".to_string(), metrics::accuracy(&prob_rows, labels)?),
                ("nll".to_string(), metrics::nll_classification(&prob_rows, labels)?),
                ("ece".to_string(), metrics::ece(&confidences, &correct, &calib)?),
            ];
            (classification_header(names), rows, metrics)
        }
    };
    let mut metric_rows: Vec<Vec<String>> = metrics.iter().map(|(k, v)| vec![k.clone(), fmt_f64(*v)]).collect();
    metric_rows.push(vec!["rows".into(), n.to_string()]);
    metric_rows.push(vec!["samples".into(), samples.to_string()]);
    metric_rows.push(vec!["clamped".into(), prepared.clamped.to_string()]);

    let out = cfg.out.clone();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_file(&out.join(PREDICTIONS_FILE), &csv_bytes(&header, &rows)?)?;
    write_file(&out.join(METRICS_FILE), &csv_bytes(&METRIC_COLUMNS, &metric_rows)?)?;
    finish_run(&out, "predict", cfg, start.elapsed())?;
    Ok(PredictOutcome { metrics, rows: n, clamped: prepared.clamped, out_dir: out })
}
