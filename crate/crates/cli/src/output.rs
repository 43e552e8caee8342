//! Artifact writing shared by the commands. Every file goes through a
//! temporary sibling and an atomic rename.

use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;
use sika_core::data_io::{write_atomic, MODEL_FORMAT, MODEL_VERSION};

use crate::config::RunConfig;

pub const CONFIG_ECHO: &str = "config.toml";
pub const RUN_METADATA: &str = "run_metadata.json";

/// Serializes `rows` under `header` into an in-memory CSV document.
pub fn csv_bytes<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.as_ref())?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    config: &'a RunConfig,
    versions: Versions,
    wall_seconds: f64,
}

#[derive(Serialize)]
struct Versions {
    sika: &'static str,
    model_format: &'static str,
    model_version: u32,
}

/// Echoes the effective configuration and the run metadata into `out`.
pub fn finish_run(out: &Path, command: &str, cfg: &RunConfig, wall: Duration) -> Result<()> {
    write_file(&out.join(CONFIG_ECHO), cfg.to_toml()?.as_bytes())?;
    let meta = RunMetadata {
        command,
        config: cfg,
        versions: Versions { sika: env!("CARGO_PKG_VERSION"), model_format: MODEL_FORMAT, model_version: MODEL_VERSION },
        wall_seconds: wall.as_secs_f64(),
    };
    write_json(&out.join(RUN_METADATA), &meta)
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    Ok(pool.install(f))
}
