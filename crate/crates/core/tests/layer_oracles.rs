use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sika_core::kernel_basis::laplace_kernel;
use sika_core::layer::{LayerGrads, ModelGrads};
use sika_core::scalar::{sigmoid, softplus};
use sika_core::{
    flops, init_layer, LayerSpec, LikelihoodSpec, Mode, ModelSpec, Noise, Sampler, SikaModel, Squash,
    VariationalLayer,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(b: usize, d: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((b, d), || r.random::<f64>())
}

fn layer(d: usize, out: usize, level: u32, theta: f64, seed: u64) -> VariationalLayer<f64> {
    let mut r = rng(seed);
    let mut l: VariationalLayer<f64> = init_layer(&LayerSpec { in_dim: d, out_dim: out, level, theta }, &mut r).unwrap();
    // spread σ so that mistakes in the σ path cannot hide behind a constant
    l.weight_rho.mapv_inplace(|_| r.random_range(-3.0..0.5));
    l.bias_rho.mapv_inplace(|_| r.random_range(-3.0..0.5));
    l
}

#[test]
fn sparse_matches_dense_in_mean_mode_at_level_seven() {
    let l = layer(3, 2, 7, 1.3, 1);
    let x = uniform(1000, 3, &mut rng(2));
    let (s, _) = l.forward_sparse(x.view(), Mode::Mean).unwrap();
    let d = l.forward_dense(x.view(), &Mode::Mean).unwrap();
    let diff = (&s - &d).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-10, "max diff {diff}");
}

#[test]
fn sparse_matches_dense_under_shared_noise_all_levels() {
    let mut r = rng(10);
    for level in 1..=10u32 {
        for sampler in [Sampler::Reparam, Sampler::Flipout] {
            let d = r.random_range(1..4);
            let out = r.random_range(1..4);
            let b = r.random_range(1..20);
            let l = layer(d, out, level, r.random_range(0.2..5.0), level as u64);
            let x = uniform(b, d, &mut r);
            let dense_noise = l.sample_dense_noise(sampler, b, &mut r);
            let act = l.featurizer().sparse(x.view()).unwrap();
            let sparse_noise = dense_noise.gather(&act, l.grid().size()).unwrap();
            let (s, _) = l.forward_sparse(x.view(), Mode::Noisy(sparse_noise)).unwrap();
            let dn = l.forward_dense(x.view(), &Mode::Noisy(dense_noise)).unwrap();
            let diff = (&s - &dn).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-10, "L={level} {sampler:?}: {diff}");
        }
    }
}

#[test]
fn sparse_madd_count_is_bounded_and_ratio_matches_grid_size() {
    for (level, m) in [(7u32, 129.0), (10, 1025.0)] {
        let l = layer(4, 2, level, 1.0, 3);
        let x = uniform(16, 4, &mut rng(4));
        let (_, sparse) = flops::measure(|| l.forward_sparse(x.view(), Mode::Mean).unwrap());
        let (_, dense) = flops::measure(|| l.forward_dense(x.view(), &Mode::Mean).unwrap());
        let slots = level as u64 + 2;
        assert!(sparse <= 16 * 4 * slots * 2 + 16 * 2);
        assert_eq!(dense as f64 / sparse as f64, m / slots as f64);
    }
}

#[test]
fn sampled_variance_matches_linear_gaussian_form() {
    let l = layer(2, 1, 5, 2.0, 5);
    let x = Array2::from_shape_vec((1, 2), vec![0.37, 0.81]).unwrap();
    let act = l.featurizer().sparse(x.view()).unwrap();
    let size = l.grid().size();
    let mut var = softplus(l.bias_rho[0]).powi(2);
    let mut mean = l.bias_mean[0];
    for j in 0..2 {
        for s in 0..l.slots() {
            let row = j * size + act.indices[[0, j, s]] as usize;
            let p = act.values[[0, j, s]];
            var += p * p * softplus(l.weight_rho[[row, 0]]).powi(2);
            mean += p * l.weight_mean[[row, 0]];
        }
    }
    let n = 10_000;
    let xs = Array2::from_shape_fn((n, 2), |(_, j)| x[[0, j]]);
    for sampler in [Sampler::Reparam, Sampler::Flipout] {
        let mut r = rng(6);
        // flipout shares ε across a batch, so its marginal needs one call per draw
        let y = match sampler {
            Sampler::Reparam => l.forward_sparse_sampled(xs.view(), sampler, &mut r).unwrap().0,
            Sampler::Flipout => Array2::from_shape_fn((n, 1), |_| {
                l.forward_sparse_sampled(x.view(), sampler, &mut r).unwrap().0[[0, 0]]
            }),
        };
        let col = y.column(0);
        let m = col.mean().unwrap();
        let v = col.var(1.0);
        assert!((v / var - 1.0).abs() < 0.05, "{sampler:?}: var {v} vs {var}");
        let se = (var / n as f64).sqrt();
        assert!((m - mean).abs() < 3.0 * se, "{sampler:?}: mean {m} vs {mean}");
    }
}

#[test]
fn mean_output_equals_nystrom_interpolation_of_grid_values() {
    let theta = 1.7;
    let l = layer(1, 1, 4, theta, 7);
    let pts = l.grid().points().to_vec();
    let m = pts.len();
    let kuu = DMatrix::from_fn(m, m, |i, j| laplace_kernel(pts[i], pts[j], theta).unwrap());
    let xu = Array2::from_shape_vec((m, 1), pts.clone()).unwrap();
    let (fu, _) = l.forward_sparse(xu.view(), Mode::Mean).unwrap();
    let b = l.bias_mean[0];
    let fu = DVector::from_iterator(m, fu.column(0).iter().map(|v| v - b));
    let alpha = kuu.clone().cholesky().unwrap().solve(&fu);
    let mut r = rng(8);
    for _ in 0..200 {
        let x: f64 = r.random();
        let kx = DVector::from_iterator(m, pts.iter().map(|&u| laplace_kernel(x, u, theta).unwrap()));
        let oracle = kx.dot(&alpha) + b;
        let (y, _) = l.forward_sparse(Array2::from_elem((1, 1), x).view(), Mode::Mean).unwrap();
        assert!((y[[0, 0]] - oracle).abs() < 1e-8, "x={x}: {} vs {oracle}", y[[0, 0]]);
    }
    for (k, &u) in pts.iter().enumerate() {
        let (y, _) = l.forward_sparse(Array2::from_elem((1, 1), u).view(), Mode::Mean).unwrap();
        assert!((y[[0, 0]] - b - fu[k]).abs() < 1e-12);
    }
}

fn loss(out: &Array2<f64>, up: &Array2<f64>) -> f64 {
    (out * up).sum()
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn layer_param(l: &mut VariationalLayer<f64>, which: usize, k: usize) -> &mut f64 {
    match which {
        0 => &mut l.weight_mean.as_slice_mut().unwrap()[k],
        1 => &mut l.weight_rho.as_slice_mut().unwrap()[k],
        2 => &mut l.bias_mean.as_slice_mut().unwrap()[k],
        _ => &mut l.bias_rho.as_slice_mut().unwrap()[k],
    }
}

fn grad_of(g: &LayerGrads<f64>, which: usize, k: usize) -> f64 {
    g.slices()[which][k]
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut r = rng(20);
    let h = 1e-6;
    for case in 0..20 {
        let level = r.random_range(1..=7);
        let d = r.random_range(1..4);
        let out = r.random_range(1..3);
        let b = r.random_range(1..6);
        let sampler = if case % 2 == 0 { Sampler::Reparam } else { Sampler::Flipout };
        let mut l = layer(d, out, level, r.random_range(0.5..4.0), 100 + case);
        let x = uniform(b, d, &mut r);
        let noise = l.sample_noise(sampler, b, &mut r);
        let up = Array2::from_shape_simple_fn((b, out), || r.random_range(-1.0..1.0));
        let (_, cache) = l.forward_sparse(x.view(), Mode::Noisy(noise.clone())).unwrap();
        let g = l.backward(&cache, up.view()).unwrap();
        let act = cache.activation().clone();
        let size = l.grid().size();
        // touched rows of the weight matrix plus both biases
        let mut rows: Vec<usize> = act
            .indices
            .indexed_iter()
            .map(|((_, j, _), &p)| j * size + p as usize)
            .collect();
        rows.sort_unstable();
        rows.dedup();
        for which in 0..4 {
            let n = if which < 2 { rows.len() * out } else { out };
            for t in 0..n {
                let k = if which < 2 { rows[t / out] * out + t % out } else { t };
                let orig = *layer_param(&mut l, which, k);
                *layer_param(&mut l, which, k) = orig + h;
                let lp = loss(&l.forward_sparse(x.view(), Mode::Noisy(noise.clone())).unwrap().0, &up);
                *layer_param(&mut l, which, k) = orig - h;
                let lm = loss(&l.forward_sparse(x.view(), Mode::Noisy(noise.clone())).unwrap().0, &up);
                *layer_param(&mut l, which, k) = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = grad_of(&g, which, k);
                assert!(rel(a, fd) < 1e-4, "case {case} param {which}[{k}]: {a} vs {fd}");
            }
        }
        for i in 0..b {
            for j in 0..d {
                let mut xp = x.clone();
                xp[[i, j]] = (x[[i, j]] + h).min(1.0);
                let mut xm = x.clone();
                xm[[i, j]] = (x[[i, j]] - h).max(0.0);
                let lp = loss(&l.forward_sparse(xp.view(), Mode::Noisy(noise.clone())).unwrap().0, &up);
                let lm = loss(&l.forward_sparse(xm.view(), Mode::Noisy(noise.clone())).unwrap().0, &up);
                let fd = (lp - lm) / (xp[[i, j]] - xm[[i, j]]);
                assert!(rel(g.input[[i, j]], fd) < 1e-4, "case {case} x[{i},{j}]: {} vs {fd}", g.input[[i, j]]);
            }
        }
    }
}

#[test]
fn rho_gradient_is_sigma_gradient_times_sigmoid() {
    let l = layer(2, 1, 3, 1.0, 30);
    let mut r = rng(31);
    let x = uniform(4, 2, &mut r);
    let noise = l.sample_noise(Sampler::Reparam, 4, &mut r);
    let up = Array2::from_elem((4, 1), 1.0);
    let (_, cache) = l.forward_sparse(x.view(), Mode::Noisy(noise.clone())).unwrap();
    let g = l.backward(&cache, up.view()).unwrap();
    let Noise::Reparam { w: eps, .. } = &noise else { unreachable!() };
    let act = cache.activation();
    let size = l.grid().size();
    let mut dsigma = vec![0.0; l.weight_mean.len()];
    for i in 0..4 {
        for j in 0..2 {
            for s in 0..l.slots() {
                let row = j * size + act.indices[[i, j, s]] as usize;
                dsigma[row] += act.values[[i, j, s]] * eps[[i, j * l.slots() + s, 0]];
            }
        }
    }
    for (k, &ds) in dsigma.iter().enumerate() {
        let expect = ds * sigmoid(l.weight_rho.as_slice().unwrap()[k]);
        assert!((g.weight_rho.as_slice().unwrap()[k] - expect).abs() < 1e-14);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let l = layer(3, 2, 4, 1.0, 40);
    let mut r = rng(41);
    let x = uniform(5, 3, &mut r);
    let (_, cache) = l.forward_sparse_sampled(x.view(), Sampler::Flipout, &mut r).unwrap();
    let g = l.backward(&cache, Array2::zeros((5, 2)).view()).unwrap();
    for s in g.slices() {
        assert!(s.iter().all(|&v| v == 0.0));
    }
    assert!(g.input.iter().all(|&v| v == 0.0));
}

fn deep_spec(level: u32, hidden: usize) -> ModelSpec {
    ModelSpec {
        layers: vec![
            LayerSpec { in_dim: 2, out_dim: hidden, level, theta: 1.0 },
            LayerSpec { in_dim: hidden, out_dim: 1, level, theta: 2.0 },
        ],
        squash: Squash::Sigmoid,
        likelihood: LikelihoodSpec::Gaussian { noise_var: 0.1 },
    }
}

fn model_param(m: &mut SikaModel<f64>, layer: usize, which: usize, k: usize) -> &mut f64 {
    layer_param(&mut m.layers[layer], which, k)
}

fn model_grad(g: &ModelGrads<f64>, layer: usize, which: usize, k: usize) -> f64 {
    grad_of(&g.layers[layer], which, k)
}

#[test]
fn two_layer_gradients_match_finite_differences() {
    let mut r = rng(50);
    let h = 1e-6;
    for case in 0..20 {
        let level = r.random_range(2..=6);
        let mut m: SikaModel<f64> = SikaModel::init(&deep_spec(level, 3), &mut r).unwrap();
        let b = r.random_range(1..5);
        let x = uniform(b, 2, &mut r);
        let sampler = if case % 2 == 0 { Sampler::Reparam } else { Sampler::Flipout };
        let noise = m.sample_noise(sampler, b, &mut r);
        let up = Array2::from_shape_simple_fn((b, 1), || r.random_range(-1.0..1.0));
        let (_, cache) = m.forward(x.view(), Some(noise.clone())).unwrap();
        let g = m.backward(&cache, up.view()).unwrap();
        for layer in 0..2 {
            for which in 0..4 {
                let len = g.layers[layer].slices()[which].len();
                for _ in 0..6 {
                    let k = r.random_range(0..len);
                    let orig = *model_param(&mut m, layer, which, k);
                    *model_param(&mut m, layer, which, k) = orig + h;
                    let lp = loss(&m.forward(x.view(), Some(noise.clone())).unwrap().0, &up);
                    *model_param(&mut m, layer, which, k) = orig - h;
                    let lm = loss(&m.forward(x.view(), Some(noise.clone())).unwrap().0, &up);
                    *model_param(&mut m, layer, which, k) = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let a = model_grad(&g, layer, which, k);
                    assert!(rel(a, fd) < 1e-3, "case {case} layer {layer} param {which}[{k}]: {a} vs {fd}");
                }
            }
        }
        for i in 0..b {
            for j in 0..2 {
                let mut xp = x.clone();
                xp[[i, j]] = (x[[i, j]] + h).min(1.0);
                let mut xm = x.clone();
                xm[[i, j]] = (x[[i, j]] - h).max(0.0);
                let lp = loss(&m.forward(xp.view(), Some(noise.clone())).unwrap().0, &up);
                let lm = loss(&m.forward(xm.view(), Some(noise.clone())).unwrap().0, &up);
                let fd = (lp - lm) / (xp[[i, j]] - xm[[i, j]]);
                assert!(rel(g.input[[i, j]], fd) < 1e-3, "case {case} x[{i},{j}]");
            }
        }
    }
}

#[test]
fn single_layer_model_is_the_layer() {
    let spec = ModelSpec {
        layers: vec![LayerSpec { in_dim: 2, out_dim: 1, level: 5, theta: 1.0 }],
        squash: Squash::Sigmoid,
        likelihood: LikelihoodSpec::Gaussian { noise_var: 0.1 },
    };
    let m: SikaModel<f64> = SikaModel::init(&spec, &mut rng(60)).unwrap();
    let x = uniform(7, 2, &mut rng(61));
    let (a, _) = m.layers[0].forward_sparse(x.view(), Mode::Mean).unwrap();
    assert_eq!(m.forward_mean(x.view()).unwrap(), a);
}

#[test]
fn two_hidden_layer_stack_runs_on_a_batch_of_64() {
    let spec = ModelSpec {
        layers: vec![
            LayerSpec { in_dim: 1, out_dim: 10, level: 6, theta: 1.0 },
            LayerSpec { in_dim: 10, out_dim: 10, level: 6, theta: 1.0 },
            LayerSpec { in_dim: 10, out_dim: 1, level: 6, theta: 1.0 },
        ],
        squash: Squash::Sigmoid,
        likelihood: LikelihoodSpec::Gaussian { noise_var: 0.1 },
    };
    let mut r = rng(70);
    let m: SikaModel<f64> = SikaModel::init(&spec, &mut r).unwrap();
    let x = uniform(64, 1, &mut r);
    let y = m.forward_sampled(x.view(), Sampler::Flipout, &mut r).unwrap();
    assert_eq!(y.dim(), (64, 1));
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn f32_layer_tracks_f64_layer() {
    let l64 = layer(2, 2, 6, 1.5, 80);
    let spec = l64.spec();
    let l32 = VariationalLayer::<f32>::from_parts(
        &spec,
        l64.weight_mean.mapv(|v| v as f32),
        l64.weight_rho.mapv(|v| v as f32),
        l64.bias_mean.mapv(|v| v as f32),
        l64.bias_rho.mapv(|v| v as f32),
    )
    .unwrap();
    let x = uniform(50, 2, &mut rng(81));
    let (y64, _) = l64.forward_sparse(x.view(), Mode::Mean).unwrap();
    let (y32, _) = l32.forward_sparse(x.mapv(|v| v as f32).view(), Mode::Mean).unwrap();
    for (a, b) in y64.iter().zip(y32.iter()) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}

#[test]
fn sampled_mean_converges_to_mean_mode() {
    let l = layer(1, 1, 6, 1.0, 90);
    let n = 10_000;
    let xs = Array2::from_elem((n, 1), 0.42);
    let (y, _) = l.forward_sparse_sampled(xs.view(), Sampler::Reparam, &mut rng(91)).unwrap();
    let (mean, _) = l.forward_sparse(xs.slice(ndarray::s![0..1, ..]), Mode::Mean).unwrap();
    let sd = y.column(0).std(1.0);
    let m = y.mean_axis(Axis(0)).unwrap()[0];
    assert!((m - mean[[0, 0]]).abs() < 3.0 * sd / (n as f64).sqrt());
}
