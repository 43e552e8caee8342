//! Self-check suites run by `sika verify`.

use std::fmt;
use std::time::Instant;

use anyhow::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sika_core::dyadic_grid::{BasisIndex, DyadicGrid};
use sika_core::kernel_basis::{
    boundary_elements, closed_form_element, eval_interior_basis, eval_template_basis, rkhs_gram,
    template_coefficients, LaplaceKernel, NystromOracle,
};
use sika_core::sparse_index::{brute_force_indices, scatter, tsi_indices, Featurizer};
use sika_core::vi::kl_mean_field;
use sika_core::{
    LayerSpec, LikelihoodSpec, Mode, ModelSpec, Sampler, SikaModel, Squash, VariationalLayer,
};

/// Deliberate defects used to check that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Builds the interior basis with `−θ` in the Gram check.
    ThetaSign,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub invariant: &'static str,
    pub passed: bool,
    /// Worst observed error, or the failure message.
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} {:<4} {:>7.2}s  {}  [{}]",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.seconds,
            self.invariant,
            self.detail
        )
    }
}

type Check = fn(&mut ChaCha8Rng, Option<Fault>) -> Result<(bool, String)>;

const SUITES: [(&str, &str, Check); 7] = [
    ("gram_identity", "closed-form basis is RKHS-orthonormal", gram_identity),
    ("template_oracle", "closed form equals template construction", template_oracle),
    ("nystrom", "basis expansion reproduces the Nystrom kernel", nystrom),
    ("tsi_brute_force", "TSI indices equal brute-force support search", tsi_brute_force),
    ("dense_vs_sparse", "sparse activations and outputs equal the dense path", dense_vs_sparse),
    ("gradient", "analytic gradients match central differences", gradient),
    ("kl_prior", "KL vanishes exactly at the prior", kl_prior),
];

/// Runs every suite with a fixed seed.
pub fn run_suites(seed: u64, fault: Option<Fault>) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .enumerate()
        .map(|(k, &(name, invariant, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let start = Instant::now();
            let (passed, detail) = match check(&mut rng, fault) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e:#}")),
            };
            SuiteResult { name, invariant, passed, detail, seconds: start.elapsed().as_secs_f64() }
        })
        .collect()
}

fn verdict(worst: f64, tol: f64) -> (bool, String) {
    (worst < tol, format!("max err {worst:.3e} < {tol:.0e}"))
}

fn gram_identity(_: &mut ChaCha8Rng, fault: Option<Fault>) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for level in 1..=6 {
        for theta in [0.5f64, 1.0, 2.0] {
            let kernel = LaplaceKernel::new(theta)?;
            let basis_theta = if fault == Some(Fault::ThetaSign) { -theta } else { theta };
            let grid = DyadicGrid::new(level)?;
            let mut elements = boundary_elements(&kernel).to_vec();
            for pos in 2..grid.size() {
                if let BasisIndex::Interior { level: l, m } = grid.basis_at(pos)? {
                    elements.push(closed_form_element(l, m, basis_theta));
                }
            }
            let gram = rkhs_gram(&elements, &kernel)?;
            for ((i, j), &g) in gram.indexed_iter() {
                let e = (g - if i == j { 1.0 } else { 0.0 }).abs();
                worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
            }
        }
    }
    Ok(verdict(worst, 1e-8))
}

fn template_oracle(rng: &mut ChaCha8Rng, _: Option<Fault>) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let l = rng.random_range(1..=10u32);
        let m = 2 * rng.random_range(0..1u64 << (l - 1)) + 1;
        let theta = rng.random_range(0.1..5.0);
        let h = (-(l as f64)).exp2();
        let b = m as f64 * h;
        let x = rng.random::<f64>();
        let kernel = LaplaceKernel::new(theta)?;
        let t = template_coefficients(b - h, b, b + h, &kernel)?;
        let e = (eval_interior_basis(l, m, x, theta)? - eval_template_basis(&t, x, &kernel)).abs();
        worst = worst.max(e);
    }
    Ok(verdict(worst, 1e-9))
}

fn nystrom(rng: &mut ChaCha8Rng, _: Option<Fault>) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for level in 1..=6 {
        let theta = rng.random_range(0.5..2.0);
        let grid = DyadicGrid::new(level)?;
        let oracle = NystromOracle::new(&grid, theta)?;
        let feat = Featurizer::new(grid.clone(), theta)?;
        for pair in 0..40 {
            let (x, y) = if pair < 8 {
                let p = grid.points();
                (p[rng.random_range(0..p.len())], p[rng.random_range(0..p.len())])
            } else {
                (rng.random::<f64>(), rng.random::<f64>())
            };
            let f = feat.dense(Array2::from_shape_vec((2, 1), vec![x, y])?.view())?;
            let approx: f64 = (0..grid.size()).map(|k| f[[0, 0, k]] * f[[1, 0, k]]).sum();
            worst = worst.max((approx - oracle.eval(x, y)).abs());
        }
    }
    Ok(verdict(worst, 1e-8))
}

fn tsi_brute_force(rng: &mut ChaCha8Rng, _: Option<Fault>) -> Result<(bool, String)> {
    let mut mismatches = 0usize;
    let n = 10_000;
    for _ in 0..n {
        let level = rng.random_range(1..=12u32);
        let x = rng.random::<f64>();
        let t = tsi_indices(Array2::from_elem((1, 1), x).view(), level)?;
        for (l, m_brute) in brute_force_indices(x, level) {
            let m_tsi = 2 * t.0[[0, 0, l as usize - 1]] - 1;
            if m_tsi != m_brute
                && (eval_interior_basis(l, m_tsi, x, 1.0)? != 0.0 || eval_interior_basis(l, m_brute, x, 1.0)? != 0.0)
            {
                mismatches += 1;
            }
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches in {n} inputs")))
}

fn dense_vs_sparse(rng: &mut ChaCha8Rng, _: Option<Fault>) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut bitwise = true;
    for level in 1..=8 {
        let spec = LayerSpec { in_dim: 3, out_dim: 2, level, theta: rng.random_range(0.5..2.0) };
        let layer: VariationalLayer<f64> = VariationalLayer::init(&spec, rng)?;
        let x = Array2::from_shape_simple_fn((50, 3), || rng.random::<f64>());
        let act = layer.featurizer().sparse(x.view())?;
        bitwise &= scatter(&act, layer.grid().size()) == layer.featurizer().dense(x.view())?;
        let (ys, _) = layer.forward_sparse(x.view(), Mode::Mean)?;
        let yd = layer.forward_dense(x.view(), &Mode::Mean)?;
        worst = worst.max((&ys - &yd).iter().fold(0.0, |a, v| a.max(v.abs())));
    }
    let (ok, detail) = verdict(worst, 1e-10);
    Ok((ok && bitwise, format!("{detail}; scatter bitwise {bitwise}")))
}

fn gradient(rng: &mut ChaCha8Rng, _: Option<Fault>) -> Result<(bool, String)> {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for case in 0..10 {
        let level = rng.random_range(2..=6);
        let spec = ModelSpec {
            layers: vec![
                LayerSpec { in_dim: 2, out_dim: 3, level, theta: 1.0 },
                LayerSpec { in_dim: 3, out_dim: 1, level, theta: 2.0 },
            ],
            squash: Squash::Sigmoid,
            likelihood: LikelihoodSpec::Gaussian { noise_var: 0.1 },
        };
        let mut m: SikaModel<f64> = SikaModel::init(&spec, rng)?;
        for l in &mut m.layers {
            l.weight_rho.mapv_inplace(|_| rng.random_range(-3.0..0.5));
        }
        let b = 3;
        let x = Array2::from_shape_simple_fn((b, 2), || rng.random_range(0.05..0.95));
        let sampler = if case % 2 == 0 { Sampler::Reparam } else { Sampler::Flipout };
        let noise = m.sample_noise(sampler, b, rng);
        let up = Array2::from_shape_simple_fn((b, 1), || rng.random_range(-1.0..1.0));
        let (_, cache) = m.forward(x.view(), Some(noise.clone()))?;
        let g = m.backward(&cache, up.view())?;
        let loss = |m: &SikaModel<f64>, x: &Array2<f64>| -> Result<f64> {
            Ok((&m.forward(x.view(), Some(noise.clone()))?.0 * &up).sum())
        };
        for layer in 0..2 {
            for which in 0..4 {
                let len = g.layers[layer].slices()[which].len();
                let k = rng.random_range(0..len);
                let orig = m.layers[layer].param_slices_mut()[which][k];
                m.layers[layer].param_slices_mut()[which][k] = orig + h;
                let lp = loss(&m, &x)?;
                m.layers[layer].param_slices_mut()[which][k] = orig - h;
                let lm = loss(&m, &x)?;
                m.layers[layer].param_slices_mut()[which][k] = orig;
                worst = worst.max(relative(g.layers[layer].slices()[which][k], (lp - lm) / (2.0 * h)));
            }
        }
        for i in 0..b {
            for j in 0..2 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                let fd = (loss(&m, &xp)? - loss(&m, &xm)?) / (2.0 * h);
                worst = worst.max(relative(g.input[[i, j]], fd));
            }
        }
    }
    Ok(verdict(worst, 1e-3))
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

fn kl_prior(rng: &mut ChaCha8Rng, _: Option<Fault>) -> Result<(bool, String)> {
    let spec = LayerSpec { in_dim: 4, out_dim: 3, level: 5, theta: 1.0 };
    let mut layer: VariationalLayer<f64> = VariationalLayer::init(&spec, rng)?;
    let rho = sika_core::scalar::softplus_inv(1.0);
    layer.weight_mean.fill(0.0);
    layer.bias_mean.fill(0.0);
    layer.weight_rho.fill(rho);
    layer.bias_rho.fill(rho);
    let at_prior = kl_mean_field(&layer).abs();
    layer.weight_mean[[0, 0]] = 1e-3;
    let off_prior = kl_mean_field(&layer);
    Ok((
        at_prior < 1e-12 && off_prior > 0.0,
        format!("KL at prior {at_prior:.1e}, after a 1e-3 shift {off_prior:.1e}"),
    ))
}
