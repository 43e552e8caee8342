//! Sparsely activated Bayesian layer `f(x) = Φ(x)W + b` and deep stacks of it.
//!
//! Weights are mean-field Gaussian, `W = m + softplus(ρ)·ε`, stored
//! feature-major: row `d·M + position`. The sparse path touches only the
//! `L + 2` rows each input activates; the dense path enumerates all `M` and
//! exists as an oracle and as the benchmark baseline.
//!
//! Randomness is always explicit. A [`Noise`] value holds every standard
//! normal and sign a stochastic forward pass consumes, and its shape depends
//! only on the batch size, never on the inputs. Sparse noise has one row per
//! active slot (`D·(L+2)`), dense noise one per weight row (`D·M`);
//! [`Noise::gather`] turns the latter into the former so both paths can be
//! driven by identical draws.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dyadic_grid::DyadicGrid;
use crate::error::{param_err, Result, SikaError};
use crate::flops;
use crate::scalar::{sigmoid, softplus, softplus_inv, Scalar};
use crate::sparse_index::{Featurizer, SparseActivation};

/// Initial standard deviation of every variational mean draw and of `softplus(ρ)`.
pub const INIT_SCALE: f64 = 0.1;

/// Shape of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub level: u32,
    pub theta: f64,
}

/// How stochastic weights are perturbed per example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Independent `ε` for every example and weight.
    Reparam,
    /// One shared `ε` decorrelated across examples by random sign flips.
    #[default]
    Flipout,
}

/// Pre-drawn randomness for one stochastic forward pass of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Noise<T> {
    /// `w`: `(B, rows, out)`, `b`: `(B, out)`. A leading dimension of 1 is
    /// broadcast over the batch (dense path only).
    Reparam { w: Array3<T>, b: Array2<T> },
    /// Shared `w`: `(D·M, out)`, `b`: `(out)`; per-example signs
    /// `sign_in`: `(B, rows)` and `sign_out`: `(B, out)`.
    Flipout {
        w: Array2<T>,
        b: Array1<T>,
        sign_in: Array2<T>,
        sign_out: Array2<T>,
    },
}

impl<T: Scalar> Noise<T> {
    /// Batch size the noise was drawn for.
    pub fn batch(&self) -> usize {
        match self {
            Noise::Reparam { b, .. } => b.nrows(),
            Noise::Flipout { sign_out, .. } => sign_out.nrows(),
        }
    }

    /// Converts dense-layout noise into the sparse layout of `act`.
    pub fn gather(&self, act: &SparseActivation<T>, size: usize) -> Result<Noise<T>> {
        let (batch, d, slots) = act.indices.dim();
        match self {
            Noise::Reparam { w, b } => {
                if w.dim().0 != batch || w.dim().1 != d * size {
                    return param_err("dense noise does not match the activation shape");
                }
                let mut g = Array3::zeros((batch, d * slots, w.dim().2));
                for i in 0..batch {
                    for j in 0..d {
                        for s in 0..slots {
                            let src = j * size + act.indices[[i, j, s]] as usize;
                            g.slice_mut(ndarray::s![i, j * slots + s, ..])
                                .assign(&w.slice(ndarray::s![i, src, ..]));
                        }
                    }
                }
                Ok(Noise::Reparam { w: g, b: b.clone() })
            }
            Noise::Flipout { w, b, sign_in, sign_out } => {
                if sign_in.dim() != (batch, d * size) {
                    return param_err("dense flipout signs do not match the activation shape");
                }
                let mut g = Array2::zeros((batch, d * slots));
                for i in 0..batch {
                    for j in 0..d {
                        for s in 0..slots {
                            g[[i, j * slots + s]] = sign_in[[i, j * size + act.indices[[i, j, s]] as usize]];
                        }
                    }
                }
                Ok(Noise::Flipout {
                    w: w.clone(),
                    b: b.clone(),
                    sign_in: g,
                    sign_out: sign_out.clone(),
                })
            }
        }
    }
}

/// Forward-pass mode.
#[derive(Clone, Debug)]
pub enum Mode<T> {
    /// Weights fixed at their means.
    Mean,
    /// Weights perturbed by the given draws.
    Noisy(Noise<T>),
}

/// State a sparse forward pass leaves behind for [`VariationalLayer::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    x: Array2<T>,
    act: SparseActivation<T>,
    noise: Option<Noise<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn activation(&self) -> &SparseActivation<T> {
        &self.act
    }

    pub fn noise(&self) -> Option<&Noise<T>> {
        self.noise.as_ref()
    }
}

/// Gradients of a scalar loss with respect to one layer's parameters and inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub weight_mean: Array2<T>,
    pub weight_rho: Array2<T>,
    pub bias_mean: Array1<T>,
    pub bias_rho: Array1<T>,
    pub input: Array2<T>,
}

impl<T: Scalar> LayerGrads<T> {
    fn zeros(rows: usize, out: usize, batch: usize, d: usize) -> Self {
        Self {
            weight_mean: Array2::zeros((rows, out)),
            weight_rho: Array2::zeros((rows, out)),
            bias_mean: Array1::zeros(out),
            bias_rho: Array1::zeros(out),
            input: Array2::zeros((batch, d)),
        }
    }

    /// Adds `other` into `self` in place.
    pub fn accumulate(&mut self, other: &Self) {
        self.weight_mean += &other.weight_mean;
        self.weight_rho += &other.weight_rho;
        self.bias_mean += &other.bias_mean;
        self.bias_rho += &other.bias_rho;
    }

    pub fn scale(&mut self, k: T) {
        self.weight_mean.mapv_inplace(|v| v * k);
        self.weight_rho.mapv_inplace(|v| v * k);
        self.bias_mean.mapv_inplace(|v| v * k);
        self.bias_rho.mapv_inplace(|v| v * k);
        self.input.mapv_inplace(|v| v * k);
    }
}

fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

fn sign<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    if rng.random_bool(0.5) {
        T::one()
    } else {
        -T::one()
    }
}

/// Mean-field Gaussian layer over the Laplace-kernel basis.
#[derive(Clone, Debug)]
pub struct VariationalLayer<T> {
    in_dim: usize,
    out_dim: usize,
    featurizer: Featurizer<T>,
    pub weight_mean: Array2<T>,
    pub weight_rho: Array2<T>,
    pub bias_mean: Array1<T>,
    pub bias_rho: Array1<T>,
}

/// Fresh layer with means `~ N(0, 0.1²)` and `softplus(ρ) = 0.1`.
pub fn init_layer<T: Scalar, R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Result<VariationalLayer<T>> {
    VariationalLayer::init(spec, rng)
}

impl<T: Scalar> VariationalLayer<T> {
    pub fn init<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Result<Self> {
        let mut layer = Self::zeroed(spec)?;
        let scale = T::lit(INIT_SCALE);
        layer.weight_mean.mapv_inplace(|_| normal::<T, _>(rng) * scale);
        layer.bias_mean.mapv_inplace(|_| normal::<T, _>(rng) * scale);
        let rho = softplus_inv(scale);
        layer.weight_rho.fill(rho);
        layer.bias_rho.fill(rho);
        Ok(layer)
    }

    /// Layer with every parameter zero (`σ = softplus(0) = ln 2`).
    pub fn zeroed(spec: &LayerSpec) -> Result<Self> {
        if spec.in_dim == 0 || spec.out_dim == 0 {
            return param_err(format!("layer dims must be positive, got {}→{}", spec.in_dim, spec.out_dim));
        }
        let grid = DyadicGrid::new(spec.level)?;
        let rows = spec.in_dim * grid.size();
        let featurizer = Featurizer::new(grid, T::lit(spec.theta))?;
        Ok(Self {
            in_dim: spec.in_dim,
            out_dim: spec.out_dim,
            featurizer,
            weight_mean: Array2::zeros((rows, spec.out_dim)),
            weight_rho: Array2::zeros((rows, spec.out_dim)),
            bias_mean: Array1::zeros(spec.out_dim),
            bias_rho: Array1::zeros(spec.out_dim),
        })
    }

    /// Builds a layer from explicit parameters, checking every shape.
    pub fn from_parts(
        spec: &LayerSpec,
        weight_mean: Array2<T>,
        weight_rho: Array2<T>,
        bias_mean: Array1<T>,
        bias_rho: Array1<T>,
    ) -> Result<Self> {
        let mut layer = Self::zeroed(spec)?;
        let w = layer.weight_mean.dim();
        if weight_mean.dim() != w || weight_rho.dim() != w {
            return param_err(format!("weight arrays must have shape {w:?}"));
        }
        if bias_mean.len() != spec.out_dim || bias_rho.len() != spec.out_dim {
            return param_err(format!("bias arrays must have length {}", spec.out_dim));
        }
        layer.weight_mean = weight_mean;
        layer.weight_rho = weight_rho;
        layer.bias_mean = bias_mean;
        layer.bias_rho = bias_rho;
        Ok(layer)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            level: self.grid().level(),
            theta: self.theta().as_f64(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn grid(&self) -> &DyadicGrid {
        self.featurizer.grid()
    }

    pub fn theta(&self) -> T {
        self.featurizer.theta()
    }

    pub fn featurizer(&self) -> &Featurizer<T> {
        &self.featurizer
    }

    /// Active slots per input scalar, `L + 2`.
    pub fn slots(&self) -> usize {
        self.grid().active_slots()
    }

    /// Number of scalar parameters (means and `ρ`s).
    pub fn num_params(&self) -> usize {
        2 * (self.weight_mean.len() + self.bias_mean.len())
    }

    pub fn weight_std(&self) -> Array2<T> {
        self.weight_rho.mapv(softplus)
    }

    pub fn bias_std(&self) -> Array1<T> {
        self.bias_rho.mapv(softplus)
    }

    /// `softplus(ρ)` for every weight when a noisy pass needs it, else empty.
    fn sigma_if(&self, needed: bool) -> Array2<T> {
        if needed {
            self.weight_rho.mapv(softplus)
        } else {
            Array2::zeros((0, 0))
        }
    }

    fn check_x(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.in_dim {
            return param_err(format!("input has {} columns, layer expects {}", x.ncols(), self.in_dim));
        }
        Ok(())
    }

    /// Draws sparse-layout noise for a batch of `batch` examples.
    pub fn sample_noise<R: Rng + ?Sized>(&self, sampler: Sampler, batch: usize, rng: &mut R) -> Noise<T> {
        self.draw(sampler, batch, self.in_dim * self.slots(), rng)
    }

    /// Draws dense-layout noise for a batch of `batch` examples.
    pub fn sample_dense_noise<R: Rng + ?Sized>(&self, sampler: Sampler, batch: usize, rng: &mut R) -> Noise<T> {
        self.draw(sampler, batch, self.weight_mean.nrows(), rng)
    }

    fn draw<R: Rng + ?Sized>(&self, sampler: Sampler, batch: usize, rows: usize, rng: &mut R) -> Noise<T> {
        let out = self.out_dim;
        match sampler {
            Sampler::Reparam => {
                let w = Array3::from_shape_simple_fn((batch, rows, out), || normal(rng));
                let b = Array2::from_shape_simple_fn((batch, out), || normal(rng));
                Noise::Reparam { w, b }
            }
            Sampler::Flipout => {
                let w = Array2::from_shape_simple_fn(self.weight_mean.raw_dim(), || normal(rng));
                let b = Array1::from_shape_simple_fn(out, || normal(rng));
                let sign_in = Array2::from_shape_simple_fn((batch, rows), || sign(rng));
                let sign_out = Array2::from_shape_simple_fn((batch, out), || sign(rng));
                Noise::Flipout { w, b, sign_in, sign_out }
            }
        }
    }

    fn check_noise(&self, noise: &Noise<T>, batch: usize, rows: usize, broadcast_ok: bool) -> Result<()> {
        let out = self.out_dim;
        let ok = match noise {
            Noise::Reparam { w, b } => {
                let (nb, r, o) = w.dim();
                let batch_ok = nb == batch || (broadcast_ok && nb == 1);
                batch_ok && r == rows && o == out && b.dim() == (nb, out)
            }
            Noise::Flipout { w, b, sign_in, sign_out } => {
                w.dim() == self.weight_mean.dim()
                    && b.len() == out
                    && sign_in.dim() == (batch, rows)
                    && sign_out.dim() == (batch, out)
            }
        };
        if ok {
            Ok(())
        } else {
            param_err(format!("noise shape does not match batch {batch} with {rows} rows × {out} outputs"))
        }
    }

    /// Sparse forward pass; returns the output `(B, out)` and the state needed
    /// by [`VariationalLayer::backward`].
    pub fn forward_sparse(&self, x: ArrayView2<T>, mode: Mode<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_x(&x)?;
        let act = self.featurizer.sparse(x)?;
        let (batch, d, slots) = act.indices.dim();
        let size = self.grid().size();
        let rows = d * slots;
        let out_dim = self.out_dim;
        let noise = match mode {
            Mode::Mean => None,
            Mode::Noisy(n) => {
                self.check_noise(&n, batch, rows, false)?;
                Some(n)
            }
        };
        let mut out = Array2::zeros((batch, out_dim));
        let phi = act.values.as_slice().expect("standard layout");
        let idx = act.indices.as_slice().expect("standard layout");
        let wm = self.weight_mean.as_slice().expect("standard layout");
        // Small batches touch few rows; skip the full softplus pass then.
        let full = noise.is_some() && batch * rows >= self.weight_rho.len();
        let sigma = self.sigma_if(full);
        let sg = sigma.as_slice().expect("standard layout");
        let wr = self.weight_rho.as_slice().expect("standard layout");
        let sig = |j: usize| if full { sg[j] } else { softplus(wr[j]) };
        let ys = out.as_slice_mut().expect("standard layout");
        for i in 0..batch {
            let y = &mut ys[i * out_dim..(i + 1) * out_dim];
            let phi_i = &phi[i * rows..(i + 1) * rows];
            let idx_i = &idx[i * rows..(i + 1) * rows];
            for k in 0..rows {
                let p = phi_i[k];
                let r = (k / slots) * size + idx_i[k] as usize;
                let span = r * out_dim..(r + 1) * out_dim;
                let w = &wm[span.clone()];
                match &noise {
                    None => {
                        for (yo, &wo) in y.iter_mut().zip(w) {
                            *yo += p * wo;
                        }
                    }
                    Some(Noise::Reparam { w: eps, .. }) => {
                        let e = &eps.as_slice().expect("standard layout")[(i * rows + k) * out_dim..][..out_dim];
                        for o in 0..out_dim {
                            y[o] += p * (w[o] + sig(span.start + o) * e[o]);
                        }
                    }
                    Some(Noise::Flipout { w: eps, sign_in, sign_out, .. }) => {
                        let pr = p * sign_in[[i, k]];
                        let e = &eps.as_slice().expect("standard layout")[span.clone()];
                        let so = &sign_out.as_slice().expect("standard layout")[i * out_dim..][..out_dim];
                        for o in 0..out_dim {
                            y[o] += p * w[o] + pr * sig(span.start + o) * e[o] * so[o];
                        }
                    }
                }
            }
            self.add_bias(y, i, noise.as_ref());
        }
        flops::add((batch * rows * out_dim) as u64);
        Ok((out, ForwardCache { x: x.to_owned(), act, noise }))
    }

    fn add_bias(&self, y: &mut [T], i: usize, noise: Option<&Noise<T>>) {
        for o in 0..self.out_dim {
            let mb = self.bias_mean[o];
            y[o] += match noise {
                None => mb,
                Some(Noise::Reparam { b, .. }) => {
                    let ib = if b.nrows() == 1 { 0 } else { i };
                    mb + softplus(self.bias_rho[o]) * b[[ib, o]]
                }
                Some(Noise::Flipout { b, sign_out, .. }) => {
                    mb + softplus(self.bias_rho[o]) * b[o] * sign_out[[i, o]]
                }
            };
        }
    }

    /// Sparse forward pass drawing its own noise.
    pub fn forward_sparse_sampled<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<T>,
        sampler: Sampler,
        rng: &mut R,
    ) -> Result<(Array2<T>, ForwardCache<T>)> {
        let noise = self.sample_noise(sampler, x.nrows(), rng);
        self.forward_sparse(x, Mode::Noisy(noise))
    }

    /// Dense forward pass over all `M` features. Noise must be in dense layout.
    pub fn forward_dense(&self, x: ArrayView2<T>, mode: &Mode<T>) -> Result<Array2<T>> {
        self.check_x(&x)?;
        let feats = self.featurizer.dense(x)?;
        let batch = x.nrows();
        let rows = self.weight_mean.nrows();
        let out_dim = self.out_dim;
        let noise = match mode {
            Mode::Mean => None,
            Mode::Noisy(n) => {
                self.check_noise(n, batch, rows, true)?;
                Some(n)
            }
        };
        let phi = feats.as_slice().expect("standard layout");
        let wm = &self.weight_mean;
        let wr = &self.weight_rho;
        let shared = match noise {
            Some(Noise::Reparam { w, .. }) if w.dim().0 == 1 => Some(
                ndarray::Zip::from(wm)
                    .and(wr)
                    .and(&w.index_axis(Axis(0), 0))
                    .map_collect(|&m, &r, &e| m + softplus(r) * e),
            ),
            _ => None,
        };
        let sigma = self.sigma_if(noise.is_some() && shared.is_none());
        let mut out = Array2::zeros((batch, out_dim));
        for (i, mut y) in out.axis_iter_mut(Axis(0)).enumerate() {
            let phi_i = &phi[i * rows..(i + 1) * rows];
            for (r, &p) in phi_i.iter().enumerate() {
                match (noise, &shared) {
                    (None, _) => {
                        for o in 0..out_dim {
                            y[o] += p * wm[[r, o]];
                        }
                    }
                    (Some(_), Some(ws)) => {
                        for o in 0..out_dim {
                            y[o] += p * ws[[r, o]];
                        }
                    }
                    (Some(Noise::Reparam { w: eps, .. }), None) => {
                        for o in 0..out_dim {
                            y[o] += p * (wm[[r, o]] + sigma[[r, o]] * eps[[i, r, o]]);
                        }
                    }
                    (Some(Noise::Flipout { w: eps, sign_in, sign_out, .. }), None) => {
                        let pr = p * sign_in[[i, r]];
                        for o in 0..out_dim {
                            y[o] += p * wm[[r, o]] + pr * sigma[[r, o]] * eps[[r, o]] * sign_out[[i, o]];
                        }
                    }
                }
            }
            self.add_bias(y.as_slice_mut().expect("standard layout"), i, noise);
        }
        flops::add((batch * rows * out_dim) as u64);
        Ok(out)
    }

    /// Exact gradients of `Σ upstream ⊙ output` for the pass that produced `cache`.
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: ArrayView2<T>) -> Result<LayerGrads<T>> {
        let (batch, d, slots) = cache.act.indices.dim();
        let size = self.grid().size();
        if d != self.in_dim || slots != self.slots() || cache.x.dim() != (batch, d) {
            return Err(SikaError::State("forward cache was produced by a different layer".into()));
        }
        if upstream.dim() != (batch, self.out_dim) {
            return param_err(format!(
                "upstream gradient has shape {:?}, expected ({batch}, {})",
                upstream.dim(),
                self.out_dim
            ));
        }
        let rows = d * slots;
        let out_dim = self.out_dim;
        let mut g = LayerGrads::zeros(self.weight_mean.nrows(), out_dim, batch, d);
        let dphi = self.featurizer.sparse_derivatives(cache.x.view(), &cache.act);
        let phi = cache.act.values.as_slice().expect("standard layout");
        let dphi = dphi.as_slice().expect("standard layout");
        let idx = cache.act.indices.as_slice().expect("standard layout");
        let wm = &self.weight_mean;
        let wr = &self.weight_rho;
        let sigma = self.sigma_if(cache.noise.is_some());
        let mut dsig = Array2::<T>::zeros(self.weight_mean.raw_dim());
        let sg = sigma.as_slice().expect("standard layout");
        let wm_s = wm.as_slice().expect("standard layout");
        let gm = g.weight_mean.as_slice_mut().expect("standard layout");
        let ds = dsig.as_slice_mut().expect("standard layout");
        let up = upstream.as_standard_layout();
        let up = up.as_slice().expect("standard layout");
        for i in 0..batch {
            let gy = &up[i * out_dim..(i + 1) * out_dim];
            for k in 0..rows {
                let p = phi[i * rows + k];
                let r = (k / slots) * size + idx[i * rows + k] as usize;
                let base = r * out_dim;
                let mut dx = T::zero();
                match &cache.noise {
                    None => {
                        for o in 0..out_dim {
                            let go = gy[o];
                            gm[base + o] += go * p;
                            dx += go * wm_s[base + o];
                        }
                    }
                    Some(Noise::Reparam { w: eps, .. }) => {
                        let e = &eps.as_slice().expect("standard layout")[(i * rows + k) * out_dim..][..out_dim];
                        for o in 0..out_dim {
                            let go = gy[o];
                            gm[base + o] += go * p;
                            ds[base + o] += go * p * e[o];
                            dx += go * (wm_s[base + o] + sg[base + o] * e[o]);
                        }
                    }
                    Some(Noise::Flipout { w: eps, sign_in, sign_out, .. }) => {
                        let eps = &eps.as_slice().expect("standard layout")[base..base + out_dim];
                        let si = sign_in[[i, k]];
                        let so = &sign_out.as_slice().expect("standard layout")[i * out_dim..][..out_dim];
                        for o in 0..out_dim {
                            let go = gy[o];
                            let e = eps[o] * si * so[o];
                            gm[base + o] += go * p;
                            ds[base + o] += go * p * e;
                            dx += go * (wm_s[base + o] + sg[base + o] * e);
                        }
                    }
                }
                g.input[[i, k / slots]] += dphi[i * rows + k] * dx;
            }
            for o in 0..out_dim {
                g.bias_mean[o] += gy[o];
                match &cache.noise {
                    None => {}
                    Some(Noise::Reparam { b, .. }) => g.bias_rho[o] += gy[o] * b[[i, o]],
                    Some(Noise::Flipout { b, sign_out, .. }) => g.bias_rho[o] += gy[o] * b[o] * sign_out[[i, o]],
                }
            }
        }
        ndarray::Zip::from(&mut g.weight_rho)
            .and(&dsig)
            .and(wr)
            .for_each(|gr, &ds, &r| *gr = ds * sigmoid(r));
        ndarray::Zip::from(&mut g.bias_rho)
            .and(&self.bias_rho)
            .for_each(|gr, &r| *gr *= sigmoid(r));
        Ok(g)
    }

    /// Parameter slices in a fixed order: weight mean, weight ρ, bias mean, bias ρ.
    pub fn param_slices_mut(&mut self) -> [&mut [T]; 4] {
        [
            self.weight_mean.as_slice_mut().expect("standard layout"),
            self.weight_rho.as_slice_mut().expect("standard layout"),
            self.bias_mean.as_slice_mut().expect("standard layout"),
            self.bias_rho.as_slice_mut().expect("standard layout"),
        ]
    }
}

impl<T: Scalar> LayerGrads<T> {
    /// Gradient slices in the order of [`VariationalLayer::param_slices_mut`].
    pub fn slices(&self) -> [&[T]; 4] {
        [
            self.weight_mean.as_slice().expect("standard layout"),
            self.weight_rho.as_slice().expect("standard layout"),
            self.bias_mean.as_slice().expect("standard layout"),
            self.bias_rho.as_slice().expect("standard layout"),
        ]
    }
}

/// Map from hidden outputs back into `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Squash {
    /// Logistic sigmoid.
    #[default]
    Sigmoid,
}

impl Squash {
    #[inline]
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Squash::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the squashed value `h`.
    #[inline]
    pub fn derivative_from_output<T: Scalar>(self, h: T) -> T {
        match self {
            Squash::Sigmoid => h * (T::one() - h),
        }
    }
}

/// Observation model on top of the final layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Likelihood<T> {
    /// `y ~ N(f, softplus(noise_rho))`.
    Gaussian { noise_rho: T },
    /// `y ~ Categorical(softmax(f))`.
    Categorical,
}

impl<T: Scalar> Likelihood<T> {
    pub fn gaussian(noise_var: f64) -> Result<Self> {
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return param_err(format!("noise variance must be positive, got {noise_var}"));
        }
        Ok(Likelihood::Gaussian { noise_rho: softplus_inv(T::lit(noise_var)) })
    }

    /// Gaussian noise variance, or `None` for classification.
    pub fn noise_var(&self) -> Option<T> {
        match *self {
            Likelihood::Gaussian { noise_rho } => Some(softplus(noise_rho)),
            Likelihood::Categorical => None,
        }
    }
}

/// Likelihood choice in a [`ModelSpec`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LikelihoodSpec {
    Gaussian { noise_var: f64 },
    Categorical,
}

/// Architecture of a deep stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub squash: Squash,
    pub likelihood: LikelihoodSpec,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return param_err("model needs at least one layer");
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return param_err(format!(
                    "layer {k} outputs {} features but layer {} expects {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                ));
            }
        }
        let last = self.layers.last().expect("nonempty").out_dim;
        match self.likelihood {
            LikelihoodSpec::Gaussian { .. } if last != 1 => {
                param_err(format!("Gaussian likelihood needs a single output, got {last}"))
            }
            LikelihoodSpec::Categorical if last < 2 => param_err("categorical likelihood needs at least 2 outputs"),
            _ => Ok(()),
        }
    }
}

/// Composition `f^(H) ∘ squash ∘ … ∘ squash ∘ f^(1)`.
#[derive(Clone, Debug)]
pub struct SikaModel<T> {
    pub layers: Vec<VariationalLayer<T>>,
    pub squash: Squash,
    pub likelihood: Likelihood<T>,
}

/// Forward state of every layer plus the squashed hidden activations.
#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    layers: Vec<ForwardCache<T>>,
    hidden: Vec<Array2<T>>,
}

/// Gradients for every parameter of a [`SikaModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<T> {
    pub layers: Vec<LayerGrads<T>>,
    /// Gradient with respect to the Gaussian noise `ρ` (zero otherwise).
    pub noise_rho: T,
    /// Gradient with respect to the model input.
    pub input: Array2<T>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.accumulate(b);
        }
        self.noise_rho += other.noise_rho;
    }

    pub fn scale(&mut self, k: T) {
        for l in &mut self.layers {
            l.scale(k);
        }
        self.noise_rho *= k;
        self.input.mapv_inplace(|v| v * k);
    }

    /// Flattened gradient slices in the order of [`SikaModel::param_slices_mut`];
    /// the trailing noise slot is ignored for classification models.
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.layers.iter().flat_map(|l| l.slices()).collect();
        out.push(std::slice::from_ref(&self.noise_rho));
        out
    }

    pub fn global_norm(&self) -> T {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }
}

impl<T: Scalar> SikaModel<T> {
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|s| VariationalLayer::init(s, rng))
            .collect::<Result<Vec<_>>>()?;
        let likelihood = match spec.likelihood {
            LikelihoodSpec::Gaussian { noise_var } => Likelihood::gaussian(noise_var)?,
            LikelihoodSpec::Categorical => Likelihood::Categorical,
        };
        Ok(Self { layers, squash: spec.squash, likelihood })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            layers: self.layers.iter().map(VariationalLayer::spec).collect(),
            squash: self.squash,
            likelihood: match self.likelihood {
                Likelihood::Gaussian { noise_rho } => LikelihoodSpec::Gaussian {
                    noise_var: softplus(noise_rho).as_f64(),
                },
                Likelihood::Categorical => LikelihoodSpec::Categorical,
            },
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(VariationalLayer::num_params).sum::<usize>()
            + usize::from(matches!(self.likelihood, Likelihood::Gaussian { .. }))
    }

    /// One sparse-layout noise draw per layer.
    pub fn sample_noise<R: Rng + ?Sized>(&self, sampler: Sampler, batch: usize, rng: &mut R) -> Vec<Noise<T>> {
        self.layers.iter().map(|l| l.sample_noise(sampler, batch, rng)).collect()
    }

    /// Runs the stack; `noise` holds one entry per layer, or is `None` for mean mode.
    pub fn forward(&self, x: ArrayView2<T>, noise: Option<Vec<Noise<T>>>) -> Result<(Array2<T>, ModelCache<T>)> {
        let mut noise = match noise {
            Some(n) if n.len() != self.layers.len() => {
                return param_err(format!("{} noise draws for {} layers", n.len(), self.layers.len()))
            }
            Some(n) => n.into_iter().map(Some).collect::<Vec<_>>(),
            None => vec![None; self.layers.len()],
        };
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut h = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mode = noise[k].take().map_or(Mode::Mean, Mode::Noisy);
            let (z, cache) = layer.forward_sparse(h.view(), mode)?;
            caches.push(cache);
            if k + 1 < self.layers.len() {
                h = z.mapv(|v| self.squash.apply(v));
                hidden.push(h.clone());
            } else {
                h = z;
            }
        }
        Ok((h, ModelCache { layers: caches, hidden }))
    }

    /// Mean-mode output.
    pub fn forward_mean(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(self.forward(x, None)?.0)
    }

    /// Stochastic output drawing fresh noise.
    pub fn forward_sampled<R: Rng + ?Sized>(&self, x: ArrayView2<T>, sampler: Sampler, rng: &mut R) -> Result<Array2<T>> {
        let noise = self.sample_noise(sampler, x.nrows(), rng);
        Ok(self.forward(x, Some(noise))?.0)
    }

    /// Gradients of `Σ upstream ⊙ output` through every layer.
    pub fn backward(&self, cache: &ModelCache<T>, upstream: ArrayView2<T>) -> Result<ModelGrads<T>> {
        if cache.layers.len() != self.layers.len() {
            return Err(SikaError::State("model cache has the wrong number of layers".into()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.to_owned();
        for k in (0..self.layers.len()).rev() {
            let lg = self.layers[k].backward(&cache.layers[k], g.view())?;
            g = lg.input.clone();
            if k > 0 {
                let squash = self.squash;
                ndarray::Zip::from(&mut g)
                    .and(&cache.hidden[k - 1])
                    .for_each(|gv, &h| *gv *= squash.derivative_from_output(h));
            }
            grads.push(lg);
        }
        grads.reverse();
        Ok(ModelGrads { layers: grads, noise_rho: T::zero(), input: g })
    }

    /// Zero gradients shaped like this model's parameters.
    pub fn zero_grads(&self, batch: usize) -> ModelGrads<T> {
        ModelGrads {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads::zeros(l.weight_mean.nrows(), l.out_dim(), batch, l.in_dim()))
                .collect(),
            noise_rho: T::zero(),
            input: Array2::zeros((batch, self.in_dim())),
        }
    }

    /// All trainable slices with a flag telling whether weight decay applies.
    /// The Gaussian noise `ρ`, when present, comes last.
    pub fn param_slices_mut(&mut self) -> Vec<(&mut [T], bool)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for (k, s) in layer.param_slices_mut().into_iter().enumerate() {
                out.push((s, k % 2 == 0));
            }
        }
        if let Likelihood::Gaussian { noise_rho } = &mut self.likelihood {
            out.push((std::slice::from_mut(noise_rho), false));
        }
        out
    }
}
