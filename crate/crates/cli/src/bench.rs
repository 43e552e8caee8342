//! Dense vs sparse forward-pass timing with exact multiply-add counts.

use std::time::Instant;

use anyhow::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sika_core::{flops, LayerSpec, Mode, Sampler, VariationalLayer};

use crate::config::BenchConfig;

pub const BENCH_COLUMNS: [&str; 7] = ["level", "path", "batch", "dims", "samples", "median_ms", "madd_count"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    Dense,
    Sparse,
}

impl Path {
    pub fn name(self) -> &'static str {
        match self {
            Path::Dense => "dense",
            Path::Sparse => "sparse",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub level: u32,
    pub path: Path,
    pub batch: usize,
    pub dims: usize,
    pub samples: usize,
    pub median_ms: f64,
    /// Multiply-adds of one forward call over all `samples` draws.
    pub madd_count: u64,
}

impl BenchRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.level.to_string(),
            self.path.name().into(),
            self.batch.to_string(),
            self.dims.to_string(),
            self.samples.to_string(),
            format!("{:.6}", self.median_ms),
            self.madd_count.to_string(),
        ]
    }
}

/// One stochastic forward call: `samples` weight draws pushed through the layer.
///
/// The dense path shares one draw across the batch per sample; the sparse path
/// draws independent noise for each example's active rows.
pub fn forward_once<R: Rng>(
    layer: &VariationalLayer<f64>,
    x: &Array2<f64>,
    path: Path,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut acc = 0.0;
    for _ in 0..samples {
        let y = match path {
            Path::Dense => {
                let noise = layer.sample_dense_noise(Sampler::Reparam, 1, rng);
                layer.forward_dense(x.view(), &Mode::Noisy(noise))?
            }
            Path::Sparse => {
                let noise = layer.sample_noise(Sampler::Reparam, x.nrows(), rng);
                layer.forward_sparse(x.view(), Mode::Noisy(noise))?.0
            }
        };
        acc += y[[0, 0]];
    }
    Ok(acc)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times one `(level, path)` cell.
pub fn bench_cell(cfg: &BenchConfig, level: u32, path: Path, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(level));
    let spec = LayerSpec { in_dim: cfg.dims, out_dim: cfg.out_dim, level, theta: cfg.theta };
    let layer = VariationalLayer::<f64>::init(&spec, &mut rng)?;
    let x = Array2::from_shape_simple_fn((cfg.batch, cfg.dims), || rng.random::<f64>());
    let (first, madd_count) = flops::measure(|| forward_once(&layer, &x, path, cfg.samples, &mut rng));
    let mut sink = first?;
    for _ in 0..cfg.warmup {
        sink += forward_once(&layer, &x, path, cfg.samples, &mut rng)?;
    }
    let mut times = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let start = Instant::now();
        sink += forward_once(&layer, &x, path, cfg.samples, &mut rng)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    std::hint::black_box(sink);
    Ok(BenchRow {
        level,
        path,
        batch: cfg.batch,
        dims: cfg.dims,
        samples: cfg.samples,
        median_ms: median(&mut times),
        madd_count,
    })
}

/// Every configured level on both paths, dense first.
pub fn run_bench(cfg: &BenchConfig, seed: u64, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.levels.len() * 2);
    for &level in &cfg.levels {
        for path in [Path::Dense, Path::Sparse] {
            let row = bench_cell(cfg, level, path, seed)?;
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
