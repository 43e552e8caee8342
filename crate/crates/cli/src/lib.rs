//! Command-line front end for the sparse-basis GP layers: self-verification,
//! dense vs sparse benchmarks, training, prediction and synthetic data.

pub mod bench;
pub mod config;
pub mod output;
pub mod predict;
pub mod synth;
pub mod train;
pub mod verify;

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use sika_core::data_io::Task;
use sika_core::Sampler;

use crate::config::RunConfig;
use crate::output::{csv_bytes, finish_run, with_threads, write_file};

#[derive(Debug, Parser)]
#[command(name = "sika", version, about = "Sparse dyadic-basis GP layers")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the numerical self-check suites.
    Verify(VerifyArgs),
    /// Time dense and sparse forward passes across levels.
    Bench(BenchArgs),
    /// Train a model from CSV data.
    Train(TrainArgs),
    /// Predict with a saved model.
    Predict(PredictArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<verify::Fault>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<u32>>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub out_dim: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Report path; defaults to `bench.csv` in the output directory.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub train_samples: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub kl_warmup_fraction: Option<f64>,
    #[arg(long, value_parser = parse_sampler)]
    pub sampler: Option<Sampler>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Monte Carlo draws `S*`.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub lengthscale: Option<f64>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "regression" => Ok(Task::Regression),
        "classification" => Ok(Task::Classification),
        _ => Err(format!("unknown task {s:?}; expected regression or classification")),
    }
}

fn parse_sampler(s: &str) -> Result<Sampler, String> {
    match s {
        "reparam" => Ok(Sampler::Reparam),
        "flipout" => Ok(Sampler::Flipout),
        _ => Err(format!("unknown sampler {s:?}; expected reparam or flipout")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl Cli {
    /// The file configuration with every flag applied on top.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        set(&mut cfg.threads, self.threads);
        set(&mut cfg.out, self.out.clone());
        match &self.command {
            Command::Verify(_) => {}
            Command::Bench(a) => {
                let b = &mut cfg.bench;
                set(&mut b.levels, a.levels.clone());
                set(&mut b.batch, a.batch);
                set(&mut b.dims, a.dims);
                set(&mut b.out_dim, a.out_dim);
                set(&mut b.samples, a.samples);
                set(&mut b.warmup, a.warmup);
                set(&mut b.repeats, a.repeats);
            }
            Command::Train(a) => {
                if a.train.is_some() {
                    cfg.data.train = a.train.clone();
                }
                if a.heldout.is_some() {
                    cfg.data.heldout = a.heldout.clone();
                }
                set(&mut cfg.data.target, a.target.clone());
                set(&mut cfg.data.task, a.task);
                let t = &mut cfg.train;
                set(&mut t.epochs, a.epochs);
                set(&mut t.batch_size, a.batch_size);
                set(&mut t.train_samples, a.train_samples);
                set(&mut t.learning_rate, a.learning_rate);
                set(&mut t.weight_decay, a.weight_decay);
                set(&mut t.kl_warmup_fraction, a.kl_warmup_fraction);
                set(&mut t.sampler, a.sampler);
            }
            Command::Predict(a) => {
                if a.model.is_some() {
                    cfg.predict.model = a.model.clone();
                }
                if a.data.is_some() {
                    cfg.predict.data = a.data.clone();
                }
                set(&mut cfg.predict.samples, a.samples);
            }
            Command::Synth(a) => {
                let s = &mut cfg.synth;
                set(&mut s.n_train, a.n_train);
                set(&mut s.n_test, a.n_test);
                set(&mut s.noise_std, a.noise_std);
                set(&mut s.lengthscale, a.lengthscale);
            }
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let cfg = cli.effective_config()?;
    let start = Instant::now();
    match &cli.command {
        Command::Verify(a) => {
            let results = with_threads(cfg.threads, || verify::run_suites(cfg.seed(), a.inject_fault))?;
            println!("{:<16} {:<4} {:>8}  invariant  [detail]", "suite", "ok", "time");
            for r in &results {
                println!("{r}");
            }
            let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
            for r in &failed {
                eprintln!("FAILED {}: {} ({})", r.name, r.invariant, r.detail);
            }
            println!("{} of {} suites passed", results.len() - failed.len(), results.len());
            Ok(i32::from(!failed.is_empty()))
        }
        Command::Bench(a) => {
            let rows = with_threads(cfg.threads, || {
                bench::run_bench(&cfg.bench, cfg.seed(), |r| eprintln!("{}", r.record().join(",")))
            })??;
            let records: Vec<Vec<String>> = rows.iter().map(bench::BenchRow::record).collect();
            let path = a.csv.clone().unwrap_or_else(|| cfg.out.join("bench.csv"));
            write_file(&path, &csv_bytes(&bench::BENCH_COLUMNS, &records)?)?;
            finish_run(&cfg.out, "bench", &cfg, start.elapsed())?;
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::Train(_) => {
            let outcome = train::run_train(&cfg)?;
            if let Some(last) = outcome.history.records.last() {
                println!(
                    "epoch {}: loss {:.6} nll {:.6} kl {:.6}{}",
                    last.epoch,
                    last.loss,
                    last.nll,
                    last.kl,
                    last.heldout.map(|h| format!(" heldout {h:.6}")).unwrap_or_default()
                );
            }
            println!("wrote {}", outcome.out_dir.display());
            Ok(0)
        }
        Command::Predict(_) => {
            let outcome = predict::run_predict(&cfg)?;
            for (k, v) in &outcome.metrics {
                println!("{k} {v:.6}");
            }
            println!("wrote {}", outcome.out_dir.display());
            Ok(0)
        }
        Command::Synth(_) => {
            let data = synth::run_synth(&cfg.synth, cfg.seed(), &cfg.out)?;
            finish_run(&cfg.out, "synth", &cfg, start.elapsed())?;
            println!(
                "wrote {} train and {} test rows ({} out of distribution) to {}",
                data.meta.n_train,
                data.meta.n_test,
                data.meta.n_ood,
                cfg.out.display()
            );
            Ok(0)
        }
    }
}
