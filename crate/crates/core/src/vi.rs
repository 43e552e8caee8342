//! Variational inference: KL to the standard-normal prior, likelihoods, the
//! minibatch ELBO with its gradients, Adam, the training loop and
//! Monte Carlo prediction.
//!
//! The minibatch objective is
//!
//! ```text
//! loss = -(1/S) Σ_s Σ_i log p(y_i | x_i, W_s) + kl_scale · KL(q || p)
//! ```
//!
//! with `kl_scale = (B/N)·β`, so one epoch weighs the KL exactly `β` times.
//! Noise for all `S` draws is sampled up front in a fixed order; the draws are
//! then evaluated in parallel and reduced in index order, which keeps results
//! bitwise independent of the thread count.

use std::time::Instant;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result, SikaError};
use crate::layer::{Likelihood, ModelGrads, Noise, Sampler, SikaModel, VariationalLayer};
use crate::metrics;
use crate::scalar::{sigmoid, softplus, Scalar};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Monte Carlo draws per minibatch, `S`.
    pub train_samples: usize,
    /// Monte Carlo draws at prediction time, `S*`.
    pub test_samples: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of all optimizer steps over which `β` ramps from 0 to 1.
    pub kl_warmup_fraction: f64,
    pub seed: u64,
    pub sampler: Sampler,
    /// Clip the global gradient norm to this value when set.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 512,
            train_samples: 10,
            test_samples: 20,
            learning_rate: 0.001,
            weight_decay: 0.0005,
            kl_warmup_fraction: 0.0,
            seed: 0,
            sampler: Sampler::Flipout,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return param_err("epochs and batch_size must be positive");
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return param_err("train_samples and test_samples must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return param_err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return param_err(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return param_err(format!("kl_warmup_fraction must lie in [0, 1], got {}", self.kl_warmup_fraction));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return param_err(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Regression values or class labels.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a, T> {
    Regression(ArrayView1<'a, T>),
    Classes(&'a [usize]),
}

impl<'a, T: Scalar> Targets<'a, T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.len(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> OwnedTargets<T> {
        match self {
            Targets::Regression(y) => OwnedTargets::Regression(rows.iter().map(|&r| y[r]).collect()),
            Targets::Classes(c) => OwnedTargets::Classes(rows.iter().map(|&r| c[r]).collect()),
        }
    }
}

enum OwnedTargets<T> {
    Regression(Array1<T>),
    Classes(Vec<usize>),
}

impl<T: Scalar> OwnedTargets<T> {
    fn view(&self) -> Targets<'_, T> {
        match self {
            OwnedTargets::Regression(y) => Targets::Regression(y.view()),
            OwnedTargets::Classes(c) => Targets::Classes(c),
        }
    }
}

/// `Σ ½(σ² + μ² − 1 − ln σ²)` over every weight and bias of a layer.
pub fn kl_mean_field<T: Scalar>(layer: &VariationalLayer<T>) -> T {
    let term = |m: T, r: T| {
        let s = softplus(r);
        T::lit(0.5) * (s * s + m * m - T::one() - T::lit(2.0) * s.ln())
    };
    let w: T = layer
        .weight_mean
        .iter()
        .zip(&layer.weight_rho)
        .map(|(&m, &r)| term(m, r))
        .sum();
    let b: T = layer
        .bias_mean
        .iter()
        .zip(&layer.bias_rho)
        .map(|(&m, &r)| term(m, r))
        .sum();
    w + b
}

/// KL summed over every layer of a model.
pub fn kl_model<T: Scalar>(model: &SikaModel<T>) -> T {
    model.layers.iter().map(kl_mean_field).sum()
}

/// Adds `scale · ∂KL/∂θ` into `grads`.
fn add_kl_grads<T: Scalar>(model: &SikaModel<T>, scale: T, grads: &mut ModelGrads<T>) {
    for (layer, g) in model.layers.iter().zip(&mut grads.layers) {
        ndarray::Zip::from(&mut g.weight_mean)
            .and(&layer.weight_mean)
            .for_each(|gv, &m| *gv += scale * m);
        ndarray::Zip::from(&mut g.bias_mean)
            .and(&layer.bias_mean)
            .for_each(|gv, &m| *gv += scale * m);
        let drho = |r: T| {
            let s = softplus(r);
            (s - s.recip()) * sigmoid(r)
        };
        ndarray::Zip::from(&mut g.weight_rho)
            .and(&layer.weight_rho)
            .for_each(|gv, &r| *gv += scale * drho(r));
        ndarray::Zip::from(&mut g.bias_rho)
            .and(&layer.bias_rho)
            .for_each(|gv, &r| *gv += scale * drho(r));
    }
}

/// Per-example `log softmax(logits)[label]`, stabilised by max subtraction.
pub fn softmax_likelihood<T: Scalar>(logits: ArrayView2<T>, labels: &[usize]) -> Result<Array1<T>> {
    let c = logits.ncols();
    if c < 2 {
        return param_err(format!("softmax needs at least 2 classes, got {c}"));
    }
    if labels.len() != logits.nrows() {
        return param_err(format!("{} labels for {} rows", labels.len(), logits.nrows()));
    }
    let mut out = Array1::zeros(labels.len());
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let y = labels[i];
        if y >= c {
            return param_err(format!("label {y} outside 0..{c}"));
        }
        out[i] = row[y] - log_sum_exp(row);
    }
    Ok(out)
}

fn log_sum_exp<T: Scalar>(row: ArrayView1<T>) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Row-wise softmax.
pub fn softmax<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let lse = log_sum_exp(row.view());
        row.mapv_inplace(|v| (v - lse).exp());
    }
    out
}

/// Gaussian negative log-density `½ln(2πσ²) + (y − f)²/(2σ²)` per example.
pub fn gaussian_nll<T: Scalar>(y: ArrayView1<T>, f: ArrayView1<T>, noise_var: T) -> Array1<T> {
    let c = T::lit(0.5) * (T::lit(LN_2PI) + noise_var.ln());
    ndarray::Zip::from(&y)
        .and(&f)
        .map_collect(|&y, &f| c + (y - f) * (y - f) / (T::lit(2.0) * noise_var))
}

/// Negative log-likelihood of one output batch, its gradient with respect to
/// the outputs, and the gradient with respect to the noise `ρ`.
fn nll_and_grad<T: Scalar>(
    likelihood: &Likelihood<T>,
    out: &Array2<T>,
    targets: &Targets<T>,
) -> Result<(T, Array2<T>, T)> {
    match (likelihood, targets) {
        (Likelihood::Gaussian { noise_rho }, Targets::Regression(y)) => {
            let var = softplus(*noise_rho);
            let f = out.column(0);
            let nll = gaussian_nll(*y, f, var).sum();
            let mut g = Array2::zeros(out.raw_dim());
            let mut dvar = T::zero();
            for i in 0..y.len() {
                let r = f[i] - y[i];
                g[[i, 0]] = r / var;
                dvar += T::lit(0.5) / var - r * r / (T::lit(2.0) * var * var);
            }
            Ok((nll, g, dvar * sigmoid(*noise_rho)))
        }
        (Likelihood::Categorical, Targets::Classes(labels)) => {
            let ll = softmax_likelihood(out.view(), labels)?;
            let mut g = softmax(out.view());
            for (i, &y) in labels.iter().enumerate() {
                g[[i, y]] -= T::one();
            }
            Ok((-ll.sum(), g, T::zero()))
        }
        _ => param_err("targets do not match the model likelihood"),
    }
}

/// Components of a minibatch objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms<T> {
    /// `nll + kl_scale · kl`.
    pub loss: T,
    /// Monte Carlo average of the batch negative log-likelihood.
    pub nll: T,
    /// Unscaled KL to the prior.
    pub kl: T,
}

/// Minibatch loss and gradients with pre-drawn noise, one entry per draw.
pub fn elbo_with_noise<T: Scalar>(
    model: &SikaModel<T>,
    x: ArrayView2<T>,
    targets: Targets<T>,
    noise: Vec<Vec<Noise<T>>>,
    kl_scale: T,
) -> Result<(ElboTerms<T>, ModelGrads<T>)> {
    if x.nrows() == 0 {
        return param_err("empty minibatch");
    }
    if targets.len() != x.nrows() {
        return param_err(format!("{} targets for {} inputs", targets.len(), x.nrows()));
    }
    let s = noise.len();
    if s == 0 {
        return param_err("at least one Monte Carlo draw is required");
    }
    let per_draw: Vec<Result<(T, ModelGrads<T>)>> = noise
        .into_par_iter()
        .map(|n| {
            let (out, cache) = model.forward(x, Some(n))?;
            let (nll, g_out, g_rho) = nll_and_grad(&model.likelihood, &out, &targets)?;
            let mut grads = model.backward(&cache, g_out.view())?;
            grads.noise_rho = g_rho;
            Ok((nll, grads))
        })
        .collect();
    let mut nll = T::zero();
    let mut total: Option<ModelGrads<T>> = None;
    for r in per_draw {
        let (v, g) = r?;
        nll += v;
        match &mut total {
            None => total = Some(g),
            Some(t) => {
                t.accumulate(&g);
                t.input += &g.input;
            }
        }
    }
    let inv = T::one() / T::from_usize_lossy(s);
    let mut grads = total.expect("s >= 1");
    grads.scale(inv);
    nll *= inv;
    let kl = kl_model(model);
    add_kl_grads(model, kl_scale, &mut grads);
    let loss = nll + kl_scale * kl;
    for (term, v) in [("nll", nll), ("kl", kl), ("loss", loss)] {
        if !v.is_finite() {
            return Err(SikaError::Numerical(format!("{term} is {v}")));
        }
    }
    Ok((ElboTerms { loss, nll, kl }, grads))
}

/// Minibatch loss and gradients averaged over `samples` fresh draws.
pub fn elbo_minibatch<T: Scalar, R: Rng + ?Sized>(
    model: &SikaModel<T>,
    x: ArrayView2<T>,
    targets: Targets<T>,
    samples: usize,
    sampler: Sampler,
    rng: &mut R,
    kl_scale: T,
) -> Result<(ElboTerms<T>, ModelGrads<T>)> {
    let noise = (0..samples).map(|_| model.sample_noise(sampler, x.nrows(), rng)).collect();
    elbo_with_noise(model, x, targets, noise, kl_scale)
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }
}

/// One Adam update of `params` at step `t` (1-based). Weight decay is
/// decoupled and applied only when `decay` is set.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamMoments<T>,
    t: u64,
    cfg: &AdamConfig,
    decay: bool,
) {
    debug_assert_eq!(params.len(), grads.len());
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t as i32));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t as i32));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let wd = if decay { T::lit(cfg.lr * cfg.weight_decay) } else { T::zero() };
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k];
        state.m[k] = b1 * state.m[k] + (T::one() - b1) * g;
        state.v[k] = b2 * state.v[k] + (T::one() - b2) * g * g;
        let mh = state.m[k] / c1;
        let vh = state.v[k] / c2;
        *p -= wd * *p + lr * mh / (vh.sqrt() + eps);
    }
}

/// Adam over every parameter of a model.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<AdamMoments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &mut SikaModel<T>, config: AdamConfig) -> Self {
        let moments = model
            .param_slices_mut()
            .iter()
            .map(|(s, _)| AdamMoments::zeros(s.len()))
            .collect();
        Self { config, step: 0, moments }
    }

    pub fn update(&mut self, model: &mut SikaModel<T>, grads: &ModelGrads<T>) {
        self.step += 1;
        let gs = grads.slices();
        for (k, (p, decay)) in model.param_slices_mut().into_iter().enumerate() {
            adam_step(p, gs[k], &mut self.moments[k], self.step, &self.config, decay);
        }
    }
}

/// One row of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of minibatch losses over the epoch.
    pub loss: f64,
    /// Sum of minibatch NLL terms over the epoch.
    pub nll: f64,
    /// KL to the prior at the end of the epoch.
    pub kl: f64,
    /// `β` at the last step of the epoch.
    pub beta: f64,
    /// Held-out RMSE (regression) or accuracy (classification) of the mean-mode
    /// output, when a held-out set was supplied.
    pub heldout: Option<f64>,
}

/// Per-epoch history plus wall-clock times kept apart from the deterministic rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub wall_ms: Vec<f64>,
}

/// KL weight at optimizer step `step` (0-based) out of `total`.
pub fn kl_beta(step: usize, total: usize, warmup_fraction: f64) -> f64 {
    let warm = warmup_fraction * total as f64;
    if warm <= 0.0 {
        1.0
    } else {
        ((step + 1) as f64 / warm).min(1.0)
    }
}

/// Trains `model` in place with minibatch ELBO and Adam.
pub fn train<T: Scalar>(
    model: &mut SikaModel<T>,
    x: ArrayView2<T>,
    targets: Targets<T>,
    config: &TrainConfig,
    heldout: Option<(ArrayView2<T>, Targets<T>)>,
) -> Result<History> {
    train_with_callback(model, x, targets, config, heldout, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch.
pub fn train_with_callback<T: Scalar>(
    model: &mut SikaModel<T>,
    x: ArrayView2<T>,
    targets: Targets<T>,
    config: &TrainConfig,
    heldout: Option<(ArrayView2<T>, Targets<T>)>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    config.validate()?;
    let n = x.nrows();
    if n == 0 || targets.len() != n {
        return param_err(format!("{} targets for {n} inputs", targets.len()));
    }
    if x.ncols() != model.in_dim() {
        return param_err(format!("data has {} features, model expects {}", x.ncols(), model.in_dim()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model, AdamConfig::new(config.learning_rate, config.weight_decay));
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = History::default();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut nll_sum, mut beta) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            beta = kl_beta(step, total_steps, config.kl_warmup_fraction);
            let kl_scale = T::lit(chunk.len() as f64 / n as f64 * beta);
            let xb = x.select(Axis(0), chunk);
            let yb = targets.select(chunk);
            let (terms, mut grads) = elbo_minibatch(
                model,
                xb.view(),
                yb.view(),
                config.train_samples,
                config.sampler,
                &mut rng,
                kl_scale,
            )
            .map_err(|e| match e {
                SikaError::Numerical(_) => SikaError::Diverged { epoch, step: b, term: "loss", value: f64::NAN },
                other => other,
            })?;
            if let Some(clip) = config.grad_clip {
                let norm = grads.global_norm();
                if norm > T::lit(clip) {
                    grads.scale(T::lit(clip) / norm);
                }
            }
            adam.update(model, &grads);
            loss_sum += terms.loss.as_f64();
            nll_sum += terms.nll.as_f64();
            step += 1;
        }
        if !loss_sum.is_finite() {
            return Err(SikaError::Diverged { epoch, step, term: "loss", value: loss_sum });
        }
        let heldout_metric = match &heldout {
            Some((hx, ht)) => Some(heldout_score(model, *hx, ht)?),
            None => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum,
            nll: nll_sum,
            kl: kl_model(model).as_f64(),
            beta,
            heldout: heldout_metric,
        };
        on_epoch(&record);
        history.records.push(record);
        history.wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(history)
}

fn heldout_score<T: Scalar>(model: &SikaModel<T>, x: ArrayView2<T>, targets: &Targets<T>) -> Result<f64> {
    let out = model.forward_mean(x)?;
    match targets {
        Targets::Regression(y) => {
            let f: Vec<f64> = out.column(0).iter().map(|v| v.as_f64()).collect();
            let y: Vec<f64> = y.iter().map(|v| v.as_f64()).collect();
            metrics::rmse(&y, &f)
        }
        Targets::Classes(labels) => {
            let hits = out
                .axis_iter(Axis(0))
                .zip(labels.iter())
                .filter(|(row, &y)| argmax(*row) == y)
                .count();
            Ok(hits as f64 / labels.len().max(1) as f64)
        }
    }
}

pub(crate) fn argmax<T: Scalar>(row: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Monte Carlo posterior predictive.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSummary<T> {
    /// Regression: predictive mean. Classification: probability of the
    /// predicted class.
    pub mean: Array1<T>,
    /// Regression: sample variance of the draws plus the noise variance.
    /// Classification: across-draw variance of the predicted class probability.
    pub variance: Array1<T>,
    /// Raw outputs per draw, `(S*, N, out)`.
    pub samples: Option<Array3<T>>,
    /// Averaged softmax probabilities, `(N, C)`.
    pub class_probs: Option<Array2<T>>,
}

/// Draws `samples` outputs with reparameterized noise and summarises them.
pub fn predict<T: Scalar, R: Rng + ?Sized>(
    model: &SikaModel<T>,
    x: ArrayView2<T>,
    samples: usize,
    rng: &mut R,
) -> Result<PredictiveSummary<T>> {
    if samples < 2 {
        return param_err(format!("predictive variance needs at least 2 draws, got {samples}"));
    }
    let n = x.nrows();
    let out_dim = model.out_dim();
    let mut draws = Array3::zeros((samples, n, out_dim));
    for mut d in draws.axis_iter_mut(Axis(0)) {
        d.assign(&model.forward_sampled(x, Sampler::Reparam, rng)?);
    }
    let s = T::from_usize_lossy(samples);
    match model.likelihood {
        Likelihood::Gaussian { noise_rho } => {
            let f = draws.index_axis(Axis(2), 0);
            let mean = f.mean_axis(Axis(0)).expect("samples >= 2");
            let mut variance = Array1::zeros(n);
            for (i, v) in variance.iter_mut().enumerate() {
                let ss: T = f.column(i).iter().map(|&a| (a - mean[i]) * (a - mean[i])).sum();
                *v = ss / (s - T::one()) + softplus(noise_rho);
            }
            Ok(PredictiveSummary { mean, variance, samples: Some(draws), class_probs: None })
        }
        Likelihood::Categorical => {
            let mut probs = Array2::zeros((n, out_dim));
            let per_draw: Vec<Array2<T>> = draws.axis_iter(Axis(0)).map(softmax).collect();
            for p in &per_draw {
                probs += p;
            }
            probs.mapv_inplace(|v| v / s);
            let mut mean = Array1::zeros(n);
            let mut variance = Array1::zeros(n);
            for i in 0..n {
                let c = argmax(probs.row(i));
                mean[i] = probs[[i, c]];
                let ss: T = per_draw.iter().map(|p| (p[[i, c]] - mean[i]).powi(2)).sum();
                variance[i] = ss / (s - T::one());
            }
            Ok(PredictiveSummary { mean, variance, samples: Some(draws), class_probs: Some(probs) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{LayerSpec, VariationalLayer};

    fn layer_with(mu: f64, sigma: f64) -> VariationalLayer<f64> {
        let spec = LayerSpec { in_dim: 1, out_dim: 1, level: 1, theta: 1.0 };
        let mut l = VariationalLayer::zeroed(&spec).unwrap();
        let rho = crate::scalar::softplus_inv(sigma);
        l.weight_mean.fill(mu);
        l.bias_mean.fill(mu);
        l.weight_rho.fill(rho);
        l.bias_rho.fill(rho);
        l
    }

    #[test]
    fn kl_closed_forms() {
        assert!(kl_mean_field(&layer_with(0.0, 1.0)).abs() < 1e-12);
        // four entries (three weights, one bias) each contributing the single-entry value
        assert!((kl_mean_field(&layer_with(1.0, 1.0)) - 4.0 * 0.5).abs() < 1e-12);
        let single = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((single - 0.806_853).abs() < 1e-6);
        assert!((kl_mean_field(&layer_with(0.0, 2.0)) - 4.0 * single).abs() < 1e-12);
    }

    #[test]
    fn softmax_cases() {
        let ll = softmax_likelihood(Array2::<f64>::zeros((1, 4)).view(), &[2]).unwrap();
        assert!((ll[0] + 4f64.ln()).abs() < 1e-12);
        let sat = softmax_likelihood(ndarray::array![[1e9f64, 0.0]].view(), &[0]).unwrap();
        assert!(sat[0].abs() < 1e-12);
        let a = softmax_likelihood(ndarray::array![[0.3f64, -1.2, 2.0]].view(), &[1]).unwrap();
        let b = softmax_likelihood(ndarray::array![[100.3f64, 98.8, 102.0]].view(), &[1]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9);
        assert!(softmax_likelihood(ndarray::array![[0.0, 1.0]].view(), &[2]).is_err());
        assert!(softmax_likelihood(ndarray::array![[0.0]].view(), &[0]).is_err());
    }

    #[test]
    fn adam_first_step_and_fixed_point() {
        let cfg = AdamConfig::new(0.001, 0.0);
        let mut p = [1.0f64];
        let mut st = AdamMoments::zeros(1);
        adam_step(&mut p, &[0.0], &mut st, 1, &cfg, true);
        assert_eq!(p[0], 1.0);
        let mut p = [0.0f64];
        let mut st = AdamMoments::zeros(1);
        adam_step(&mut p, &[1.0], &mut st, 1, &cfg, true);
        assert!((p[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        adam_step(&mut p, &[1.0], &mut st, 2, &cfg, true);
        assert!(p[0] < -0.001);
    }

    #[test]
    fn beta_warmup() {
        assert_eq!(kl_beta(0, 100, 0.0), 1.0);
        assert!((kl_beta(4, 100, 0.1) - 0.5).abs() < 1e-15);
        assert_eq!(kl_beta(50, 100, 0.1), 1.0);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.train_samples, c.test_samples, c.batch_size, c.epochs), (10, 20, 512, 100));
        assert!(c.validate().is_ok());
        assert!(TrainConfig { train_samples: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { kl_warmup_fraction: 1.5, ..c }.validate().is_err());
    }
}
