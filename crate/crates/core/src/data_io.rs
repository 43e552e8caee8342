//! Synthetic GP data, CSV ingestion, min-max normalisation and model files.
//!
//! Model files are JSON documents:
//!
//! ```text
//! { "format": "sika-model", "version": 1, "scalar": "f64",
//!   "layout": "feature-major", "squash": "sigmoid",
//!   "likelihood": { "kind": "gaussian", "noise_rho": … },
//!   "layers": [ { "in_dim", "out_dim", "level", "theta",
//!                 "weight_mean": { "shape": [D·M, out], "data": […] },
//!                 "weight_rho", "bias_mean", "bias_rho" } … ],
//!   "normalizer": { "min": […], "max": […] },
//!   "feature_names": […], "target_name": "y", "class_names": null }
//! ```
//!
//! Weight rows are ordered `d·M + position`, with positions in dyadic order.
//! Values are written with shortest round-trip formatting, so loading
//! reproduces every parameter bit for bit (`f32` models are widened on write
//! and narrowed exactly on read).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result, SikaError};
use crate::layer::{LayerSpec, Likelihood, SikaModel, Squash, VariationalLayer};
use crate::scalar::Scalar;

pub const MODEL_FORMAT: &str = "sika-model";
pub const MODEL_VERSION: u32 = 1;
pub const WEIGHT_LAYOUT: &str = "feature-major";

/// Diagonal jitter tried in turn when factorising a covariance.
pub const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

/// Regression values or class labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Regression(Vec<f64>),
    /// Labels index into `names`, which lists the raw values in first-seen order.
    Classes { labels: Vec<usize>, names: Vec<String> },
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Target::Regression(y) => y.len(),
            Target::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

/// Raw (unnormalised) features and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Target,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.x.ncols()
    }
}

/// `exp(−(x − x')² / ℓ²)` over every pair.
pub fn se_kernel_matrix(xs: &[f64], lengthscale: f64) -> DMatrix<f64> {
    let n = xs.len();
    let inv = 1.0 / (lengthscale * lengthscale);
    DMatrix::from_fn(n, n, |i, j| {
        let d = xs[i] - xs[j];
        (-d * d * inv).exp()
    })
}

/// Lower Cholesky factor of `k + jitter·I`, escalating through [`JITTER_LADDER`].
pub fn jittered_cholesky(k: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    for &jitter in &JITTER_LADDER {
        let kj = k + DMatrix::identity(k.nrows(), k.ncols()) * jitter;
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c.l(), jitter));
        }
    }
    Err(SikaError::Numerical(format!(
        "covariance not positive definite even with jitter {}",
        JITTER_LADDER[JITTER_LADDER.len() - 1]
    )))
}

/// One draw of a zero-mean GP with the SE kernel at `grid_x`, plus i.i.d.
/// Gaussian observation noise.
pub fn sample_se_gp<R: Rng + ?Sized>(grid_x: &[f64], lengthscale: f64, noise_std: f64, rng: &mut R) -> Result<Dataset> {
    if !(lengthscale > 0.0 && lengthscale.is_finite()) {
        return param_err(format!("lengthscale must be positive, got {lengthscale}"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return param_err(format!("noise_std must be nonnegative, got {noise_std}"));
    }
    if grid_x.is_empty() {
        return param_err("at least one input location is required");
    }
    let mut sorted = grid_x.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) || sorted.iter().any(|v| !v.is_finite()) {
        return param_err("input locations must be finite and distinct");
    }
    let (l, _) = jittered_cholesky(&se_kernel_matrix(grid_x, lengthscale))?;
    let z = DVector::from_fn(grid_x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = l * z;
    let y = f
        .iter()
        .map(|&v| v + noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Dataset {
        x: Array2::from_shape_vec((grid_x.len(), 1), grid_x.to_vec()).expect("column shape"),
        y: Target::Regression(y),
        feature_names: vec!["x".into()],
        target_name: "y".into(),
    })
}

/// Per-feature affine map onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Normalised inputs with the number of entries clamped into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized<T> {
    pub x: Array2<T>,
    pub clamped: usize,
}

impl Normalizer {
    /// Column-wise min and max of the training inputs.
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return param_err("cannot fit a normalizer on zero rows");
        }
        let mut min = Vec::with_capacity(x.ncols());
        let mut max = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            min.push(col.iter().copied().fold(f64::INFINITY, f64::min));
            max.push(col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        Self::from_bounds(min.into_iter().zip(max).collect())
    }

    /// Fixed per-feature `(min, max)` bounds.
    pub fn from_bounds(bounds: Vec<(f64, f64)>) -> Result<Self> {
        for (k, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return param_err(format!("feature {k}: invalid bounds [{lo}, {hi}]"));
            }
        }
        let (min, max) = bounds.into_iter().unzip();
        Ok(Self { min, max })
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    /// Maps `x` into `[0, 1]`; constant features map to 0.5.
    pub fn apply<T: Scalar>(&self, x: ArrayView2<f64>) -> Result<Normalized<T>> {
        if x.ncols() != self.dims() {
            return param_err(format!(
                "data has {} features but the normalizer was fitted on {}",
                x.ncols(),
                self.dims()
            ));
        }
        let mut clamped = 0;
        let mut out = Array2::zeros(x.raw_dim());
        for ((i, j), &v) in x.indexed_iter() {
            let (lo, hi) = (self.min[j], self.max[j]);
            let u = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let c = u.clamp(0.0, 1.0);
            if c != u || u.is_nan() {
                clamped += 1;
            }
            out[[i, j]] = T::lit(if c.is_nan() { 0.5 } else { c });
        }
        Ok(Normalized { x: out, clamped })
    }
}

fn parse_err(row: usize, line: u64, column: &str, message: impl Into<String>) -> SikaError {
    SikaError::Parse { row, line, column: column.into(), message: message.into() }
}

/// Reads a headed CSV file. Every column other than `target_column` is a
/// numeric feature.
pub fn load_csv(path: &Path, target_column: &str, task: Task) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(parse_err(0, 1, "", "file is empty or has no header row"));
    }
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| parse_err(0, 1, target_column, "target column not found in header"))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != target_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    let mut xs = Vec::new();
    let mut reg = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut lookup: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows = 0;
    for (k, rec) in reader.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(row, line, "", e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            return Err(parse_err(row, line, "", format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        for (c, cell) in rec.iter().enumerate() {
            if c == target_idx {
                continue;
            }
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(row, line, &headers[c], format!("'{cell}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(row, line, &headers[c], format!("'{cell}' is not finite")));
            }
            xs.push(v);
        }
        let cell = rec[target_idx].trim();
        match task {
            Task::Regression => {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(row, line, target_column, format!("'{cell}' is not a number")))?;
                reg.push(v);
            }
            Task::Classification => {
                let next = names.len();
                let id = *lookup.entry(cell.to_string()).or_insert_with(|| {
                    names.push(cell.to_string());
                    next
                });
                labels.push(id);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(0, 1, "", "file has a header but no data rows"));
    }
    let x = Array2::from_shape_vec((rows, feature_names.len()), xs).expect("row-major features");
    let y = match task {
        Task::Regression => Target::Regression(reg),
        Task::Classification => Target::Classes { labels, names },
    };
    Ok(Dataset { x, y, feature_names, target_name: target_column.to_string() })
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| SikaError::Parameter(format!("'{}' has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Writes a dataset with its feature columns followed by the target column.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = dataset.feature_names.clone();
    header.push(dataset.target_name.clone());
    w.write_record(&header)?;
    for (i, row) in dataset.x.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(match &dataset.y {
            Target::Regression(y) => y[i].to_string(),
            Target::Classes { labels, names } => names[labels[i]].clone(),
        });
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| SikaError::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Everything stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub normalizer: Normalizer,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub class_names: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayDoc {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ArrayDoc {
    fn from_slice<T: Scalar>(shape: Vec<usize>, data: &[T]) -> Self {
        Self { shape, data: data.iter().map(|v| v.as_f64()).collect() }
    }

    fn values<T: Scalar>(&self, what: &str, shape: &[usize]) -> Result<Vec<T>> {
        let n: usize = self.shape.iter().product();
        if self.shape != shape || self.data.len() != n {
            return Err(SikaError::Format(format!(
                "{what}: declared shape {:?} with {} values, expected shape {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.data
            .iter()
            .map(|&v| {
                let t = T::lit(v);
                if t.as_f64() != v || !v.is_finite() {
                    Err(SikaError::Format(format!("{what}: value {v} is not representable as {}", T::NAME)))
                } else {
                    Ok(t)
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub in_dim: usize,
    pub out_dim: usize,
    pub level: u32,
    pub theta: f64,
    pub weight_mean: ArrayDoc,
    pub weight_rho: ArrayDoc,
    pub bias_mean: ArrayDoc,
    pub bias_rho: ArrayDoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LikelihoodDoc {
    Gaussian { noise_rho: f64 },
    Categorical { classes: usize },
}

/// Serialized form of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub layout: String,
    pub squash: Squash,
    pub likelihood: LikelihoodDoc,
    pub layers: Vec<LayerDoc>,
    pub normalizer: Normalizer,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub class_names: Option<Vec<String>>,
}

impl ModelDoc {
    pub fn from_model<T: Scalar>(model: &SikaModel<T>, meta: &ModelMeta) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let s = l.spec();
                let rows = l.weight_mean.nrows();
                LayerDoc {
                    in_dim: s.in_dim,
                    out_dim: s.out_dim,
                    level: s.level,
                    theta: s.theta,
                    weight_mean: ArrayDoc::from_slice(vec![rows, s.out_dim], l.weight_mean.as_slice().unwrap()),
                    weight_rho: ArrayDoc::from_slice(vec![rows, s.out_dim], l.weight_rho.as_slice().unwrap()),
                    bias_mean: ArrayDoc::from_slice(vec![s.out_dim], l.bias_mean.as_slice().unwrap()),
                    bias_rho: ArrayDoc::from_slice(vec![s.out_dim], l.bias_rho.as_slice().unwrap()),
                }
            })
            .collect();
        let likelihood = match model.likelihood {
            Likelihood::Gaussian { noise_rho } => LikelihoodDoc::Gaussian { noise_rho: noise_rho.as_f64() },
            Likelihood::Categorical => LikelihoodDoc::Categorical { classes: model.out_dim() },
        };
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            scalar: T::NAME.into(),
            layout: WEIGHT_LAYOUT.into(),
            squash: model.squash,
            likelihood,
            layers,
            normalizer: meta.normalizer.clone(),
            feature_names: meta.feature_names.clone(),
            target_name: meta.target_name.clone(),
            class_names: meta.class_names.clone(),
        }
    }

    pub fn into_model<T: Scalar>(self) -> Result<(SikaModel<T>, ModelMeta)> {
        let fmt = |m: String| Err(SikaError::Format(m));
        if self.format != MODEL_FORMAT {
            return fmt(format!("unknown format '{}'", self.format));
        }
        if self.version != MODEL_VERSION {
            return fmt(format!("unsupported version {} (expected {MODEL_VERSION})", self.version));
        }
        if self.scalar != T::NAME {
            return fmt(format!("model stores {} parameters, loader expects {}", self.scalar, T::NAME));
        }
        if self.layout != WEIGHT_LAYOUT {
            return fmt(format!("unknown weight layout '{}'", self.layout));
        }
        if self.layers.is_empty() {
            return fmt("model has no layers".into());
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, d) in self.layers.into_iter().enumerate() {
            let spec = LayerSpec { in_dim: d.in_dim, out_dim: d.out_dim, level: d.level, theta: d.theta };
            let shell = VariationalLayer::<T>::zeroed(&spec).map_err(|e| SikaError::Format(format!("layer {k}: {e}")))?;
            let rows = shell.weight_mean.nrows();
            let w = [rows, d.out_dim];
            let b = [d.out_dim];
            let arr2 = |doc: &ArrayDoc, name: &str| -> Result<Array2<T>> {
                let v = doc.values(&format!("layer {k} {name}"), &w)?;
                Ok(Array2::from_shape_vec((rows, d.out_dim), v).expect("checked shape"))
            };
            let arr1 = |doc: &ArrayDoc, name: &str| -> Result<Array1<T>> {
                Ok(Array1::from(doc.values(&format!("layer {k} {name}"), &b)?))
            };
            layers.push(VariationalLayer::from_parts(
                &spec,
                arr2(&d.weight_mean, "weight_mean")?,
                arr2(&d.weight_rho, "weight_rho")?,
                arr1(&d.bias_mean, "bias_mean")?,
                arr1(&d.bias_rho, "bias_rho")?,
            )?);
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return fmt(format!("layer {k} output does not chain into layer {}", k + 1));
            }
        }
        let out_dim = layers.last().expect("nonempty").out_dim();
        let likelihood = match self.likelihood {
            LikelihoodDoc::Gaussian { noise_rho } => {
                if out_dim != 1 {
                    return fmt("Gaussian likelihood needs a single output".into());
                }
                Likelihood::Gaussian { noise_rho: T::lit(noise_rho) }
            }
            LikelihoodDoc::Categorical { classes } => {
                if classes != out_dim {
                    return fmt(format!("{classes} classes declared for {out_dim} outputs"));
                }
                Likelihood::Categorical
            }
        };
        if self.normalizer.dims() != layers[0].in_dim() || self.normalizer.max.len() != self.normalizer.dims() {
            return fmt("normalizer does not match the input dimension".into());
        }
        let model = SikaModel { layers, squash: self.squash, likelihood };
        let meta = ModelMeta {
            normalizer: self.normalizer,
            feature_names: self.feature_names,
            target_name: self.target_name,
            class_names: self.class_names,
        };
        Ok((model, meta))
    }
}

/// Writes a model document atomically.
pub fn save_model<T: Scalar>(model: &SikaModel<T>, meta: &ModelMeta, path: &Path) -> Result<()> {
    let doc = ModelDoc::from_model(model, meta);
    let json = serde_json::to_vec_pretty(&doc).map_err(|e| SikaError::Format(e.to_string()))?;
    write_atomic(path, &json)
}

/// Reads and validates a model document.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(SikaModel<T>, ModelMeta)> {
    let text = fs::read(path)?;
    let doc: ModelDoc = serde_json::from_slice(&text).map_err(|e| SikaError::Format(e.to_string()))?;
    doc.into_model()
}
