//! `sika synth`: synthetic datasets.

use std::path::Path;

use anyhow::Result;
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sika_core::data_io::{sample_se_gp, write_csv, Dataset, Target};

use crate::config::{SynthConfig, SynthKind};
use crate::output::write_json;

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const META_FILE: &str = "synth_meta.json";

/// Sidecar describing how the files were generated and which test rows are
/// out of distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub kind: SynthKind,
    pub seed: u64,
    pub lengthscale: f64,
    pub noise_std: f64,
    pub train_range: [f64; 2],
    pub test_range: [f64; 2],
    /// Test rows with `x` outside this interval are out of distribution.
    pub in_distribution: [f64; 2],
    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
    /// One flag per test row, in file order.
    pub test_ood: Vec<bool>,
}

pub struct SynthOutput {
    pub train: Dataset,
    pub test: Dataset,
    pub meta: SynthMeta,
}

/// Draws training inputs uniformly over `train_range` and test inputs on an
/// even grid over `test_range`, then samples one GP path jointly at both.
pub fn se_gp_1d(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = cfg.train_range;
    let mut train_x: Vec<f64> = (0..cfg.n_train).map(|_| rng.random_range(lo..=hi)).collect();
    train_x.sort_by(f64::total_cmp);
    let [tlo, thi] = cfg.test_range;
    let test_x: Vec<f64> = if cfg.n_test == 1 {
        vec![0.5 * (tlo + thi)]
    } else {
        let step = (thi - tlo) / (cfg.n_test - 1) as f64;
        (0..cfg.n_test).map(|i| if i + 1 == cfg.n_test { thi } else { tlo + step * i as f64 }).collect()
    };
    let all: Vec<f64> = train_x.iter().chain(&test_x).copied().collect();
    let joint = sample_se_gp(&all, cfg.lengthscale, cfg.noise_std, &mut rng)?;
    let y = match joint.y {
        Target::Regression(y) => y,
        Target::Classes { .. } => unreachable!("GP draws are real-valued"),
    };
    let split = |range: std::ops::Range<usize>| Dataset {
        x: joint.x.slice(s![range.clone(), ..]).to_owned(),
        y: Target::Regression(y[range].to_vec()),
        feature_names: joint.feature_names.clone(),
        target_name: joint.target_name.clone(),
    };
    let train = split(0..cfg.n_train);
    let test = split(cfg.n_train..all.len());
    let test_ood: Vec<bool> = test_x.iter().map(|&x| x < lo || x > hi).collect();
    let meta = SynthMeta {
        kind: cfg.kind,
        seed,
        lengthscale: cfg.lengthscale,
        noise_std: cfg.noise_std,
        train_range: cfg.train_range,
        test_range: cfg.test_range,
        in_distribution: cfg.train_range,
        n_train: cfg.n_train,
        n_test: cfg.n_test,
        n_ood: test_ood.iter().filter(|&&o| o).count(),
        test_ood,
    };
    Ok(SynthOutput { train, test, meta })
}

pub fn run_synth(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<SynthOutput> {
    let data = match cfg.kind {
        SynthKind::SeGp1d => se_gp_1d(cfg, seed)?,
    };
    std::fs::create_dir_all(out)?;
    write_csv(&data.train, &out.join(TRAIN_FILE))?;
    write_csv(&data.test, &out.join(TEST_FILE))?;
    write_json(&out.join(META_FILE), &data.meta)?;
    Ok(data)
}

