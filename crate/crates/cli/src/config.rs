//! Run configuration: one TOML file per run, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sika_core::data_io::{Normalizer, Task};
use sika_core::dyadic_grid::MAX_LEVEL;
use sika_core::kernel_basis::THETA_MAX;
use sika_core::{LayerSpec, LikelihoodSpec, ModelSpec, Squash, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; when set it replaces `train.seed`.
    pub seed: Option<u64>,
    pub threads: usize,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub bench: BenchConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            threads: 1,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            predict: PredictConfig::default(),
            bench: BenchConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    pub target: String,
    pub task: Task,
    /// Fixed `[min, max]` per feature instead of fitting on the training set.
    pub normalizer_bounds: Option<Vec<[f64; 2]>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train: None, heldout: None, target: "y".into(), task: Task::Regression, normalizer_bounds: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Widths of the hidden layers; empty for a single layer.
    pub hidden: Vec<usize>,
    /// Dyadic level per layer, or a single level shared by all layers.
    pub levels: Vec<u32>,
    pub theta: f64,
    pub squash: Squash,
    /// Initial Gaussian noise variance (regression only).
    pub noise_var: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![10, 10], levels: vec![7], theta: 1.0, squash: Squash::Sigmoid, noise_var: 0.1 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.hidden.len() + 1;
        ensure!(
            self.levels.len() == 1 || self.levels.len() == n,
            "model.levels must list 1 or {n} levels, got {}",
            self.levels.len()
        );
        for &l in &self.levels {
            ensure!((1..=MAX_LEVEL).contains(&l), "model.levels: level {l} outside [1, {MAX_LEVEL}]");
        }
        ensure!(self.hidden.iter().all(|&h| h > 0), "model.hidden widths must be positive");
        ensure!(
            self.theta > 0.0 && self.theta <= THETA_MAX,
            "model.theta must lie in (0, {THETA_MAX}], got {}",
            self.theta
        );
        ensure!(
            self.noise_var > 0.0 && self.noise_var.is_finite(),
            "model.noise_var must be positive, got {}",
            self.noise_var
        );
        Ok(())
    }

    /// Concrete architecture for `in_dim` inputs and `outputs` outputs.
    pub fn spec(&self, in_dim: usize, outputs: usize, task: Task) -> Result<ModelSpec> {
        self.validate()?;
        let mut dims = vec![in_dim];
        dims.extend(&self.hidden);
        dims.push(outputs);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                level: if self.levels.len() == 1 { self.levels[0] } else { self.levels[k] },
                theta: self.theta,
            })
            .collect();
        let likelihood = match task {
            Task::Regression => LikelihoodSpec::Gaussian { noise_var: self.noise_var },
            Task::Classification => LikelihoodSpec::Categorical,
        };
        let spec = ModelSpec { layers, squash: self.squash, likelihood };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Monte Carlo draws `S*`.
    pub samples: usize,
    pub ece_bins: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { model: None, data: None, samples: TrainConfig::default().test_samples, ece_bins: 15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub levels: Vec<u32>,
    pub batch: usize,
    pub dims: usize,
    /// Output width of the benchmarked layer.
    pub out_dim: usize,
    pub samples: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub theta: f64,
}

pub const MIN_BENCH_REPEATS: usize = 11;

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            levels: (1..=10).collect(),
            batch: 128,
            dims: 128,
            out_dim: 1,
            samples: 10,
            warmup: 3,
            repeats: MIN_BENCH_REPEATS,
            theta: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    #[serde(rename = "se_gp_1d")]
    SeGp1d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n_train: usize,
    pub n_test: usize,
    pub lengthscale: f64,
    pub noise_std: f64,
    pub train_range: [f64; 2],
    pub test_range: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: SynthKind::SeGp1d,
            n_train: 2000,
            n_test: 1000,
            lengthscale: 1.0,
            noise_std: 0.1,
            train_range: [-3.0, 3.0],
            test_range: [-5.0, 5.0],
        }
    }
}

impl RunConfig {
    /// Reads `path`; relative data and model paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.heldout, &mut cfg.predict.model, &mut cfg.predict.data]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Folds the master seed into the sections that use it.
    pub fn resolve(&mut self) {
        let seed = self.seed.unwrap_or(self.train.seed);
        self.seed = Some(seed);
        self.train.seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.threads >= 1, "threads must be at least 1");
        self.model.validate()?;
        self.train.validate()?;
        ensure!(self.predict.samples >= 2, "predict.samples must be at least 2, got {}", self.predict.samples);
        ensure!(self.predict.ece_bins >= 1, "predict.ece_bins must be positive");
        if let Some(b) = &self.data.normalizer_bounds {
            Normalizer::from_bounds(b.iter().map(|&[lo, hi]| (lo, hi)).collect())?;
        }
        self.bench.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.levels.is_empty(), "bench.levels is empty");
        for &l in &self.levels {
            ensure!((1..=MAX_LEVEL).contains(&l), "bench.levels: level {l} outside [1, {MAX_LEVEL}]");
        }
        ensure!(
            self.batch > 0 && self.dims > 0 && self.out_dim > 0 && self.samples > 0,
            "bench batch, dims, out_dim and samples must be positive"
        );
        ensure!(
            self.repeats >= MIN_BENCH_REPEATS,
            "bench.repeats must be at least {MIN_BENCH_REPEATS}, got {}",
            self.repeats
        );
        ensure!(self.theta > 0.0 && self.theta <= THETA_MAX, "bench.theta must lie in (0, {THETA_MAX}]");
        Ok(())
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_train > 0 && self.n_test > 0, "synth.n_train and synth.n_test must be positive");
        ensure!(
            self.lengthscale > 0.0 && self.lengthscale.is_finite(),
            "synth.lengthscale must be positive"
        );
        ensure!(self.noise_std >= 0.0 && self.noise_std.is_finite(), "synth.noise_std must be nonnegative");
        for (name, [lo, hi]) in [("train_range", self.train_range), ("test_range", self.test_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                bail!("synth.{name} must be an increasing pair, got [{lo}, {hi}]");
            }
        }
        Ok(())
    }
}
