use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sika_core::layer::{Likelihood, Noise};
use sika_core::scalar::{softplus, softplus_inv};
use sika_core::vi::{
    elbo_minibatch, elbo_with_noise, gaussian_nll, kl_mean_field, kl_model, predict, train, Targets,
};
use sika_core::{metrics, LayerSpec, LikelihoodSpec, ModelSpec, Sampler, SikaModel, Squash, TrainConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn regression_spec(d: usize, hidden: Option<usize>, level: u32) -> ModelSpec {
    let layers = match hidden {
        None => vec![LayerSpec { in_dim: d, out_dim: 1, level, theta: 1.0 }],
        Some(h) => vec![
            LayerSpec { in_dim: d, out_dim: h, level, theta: 1.0 },
            LayerSpec { in_dim: h, out_dim: 1, level, theta: 1.0 },
        ],
    };
    ModelSpec { layers, squash: Squash::Sigmoid, likelihood: LikelihoodSpec::Gaussian { noise_var: 0.1 } }
}

fn linear_data(n: usize, noise: f64, seed: u64) -> (Array2<f64>, Array1<f64>) {
    let mut r = rng(seed);
    let x = Array2::from_shape_simple_fn((n, 1), || r.random::<f64>());
    let y = x.column(0).mapv(|v| 2.0 * v - 0.5) + Array1::from_shape_simple_fn(n, || {
        noise * r.sample::<f64, _>(rand_distr::StandardNormal)
    });
    (x, y)
}

#[test]
fn kl_vanishes_exactly_at_the_prior() {
    let mut m: SikaModel<f64> = SikaModel::init(&regression_spec(2, Some(3), 3), &mut rng(0)).unwrap();
    assert!(kl_model(&m) > 0.0);
    let one = softplus_inv(1.0);
    for l in &mut m.layers {
        l.weight_mean.fill(0.0);
        l.bias_mean.fill(0.0);
        l.weight_rho.fill(one);
        l.bias_rho.fill(one);
        assert!(kl_mean_field(l).abs() < 1e-12);
    }
    m.layers[0].weight_mean[[3, 1]] = 1e-3;
    assert!(kl_model(&m) > 0.0);
}

#[test]
fn loss_decomposes_into_nll_and_scaled_kl() {
    let m: SikaModel<f64> = SikaModel::init(&regression_spec(1, Some(4), 4), &mut rng(1)).unwrap();
    let (x, y) = linear_data(32, 0.1, 2);
    let mut r = rng(3);
    let noise: Vec<Vec<Noise<f64>>> = (0..3).map(|_| m.sample_noise(Sampler::Flipout, 32, &mut r)).collect();
    let kl_scale = 32.0 / 1000.0 * 0.7;
    let (terms, _) = elbo_with_noise(&m, x.view(), Targets::Regression(y.view()), noise.clone(), kl_scale).unwrap();
    let var = m.likelihood.noise_var().unwrap();
    let nll: f64 = noise
        .into_iter()
        .map(|n| {
            let out = m.forward(x.view(), Some(n)).unwrap().0;
            gaussian_nll(y.view(), out.column(0), var).sum()
        })
        .sum::<f64>()
        / 3.0;
    assert!((terms.nll - nll).abs() < 1e-10);
    assert!((terms.kl - kl_model(&m)).abs() < 1e-12);
    assert_eq!(terms.loss, terms.nll + kl_scale * terms.kl);
}

#[test]
fn nll_vanishes_for_a_sharp_posterior_with_unit_density_noise() {
    let mut m: SikaModel<f64> = SikaModel::init(&regression_spec(1, None, 5), &mut rng(4)).unwrap();
    for l in &mut m.layers {
        l.weight_rho.fill(-40.0);
        l.bias_rho.fill(-40.0);
    }
    m.likelihood = Likelihood::Gaussian { noise_rho: softplus_inv(1.0 / (2.0 * std::f64::consts::PI)) };
    let x = Array2::from_shape_simple_fn((20, 1), {
        let mut r = rng(5);
        move || r.random::<f64>()
    });
    let y = m.forward_mean(x.view()).unwrap().column(0).to_owned();
    let (terms, _) =
        elbo_minibatch(&m, x.view(), Targets::Regression(y.view()), 4, Sampler::Reparam, &mut rng(6), 0.0).unwrap();
    assert!(terms.nll.abs() < 1e-10, "{}", terms.nll);
}

#[test]
fn disjoint_minibatches_sum_to_the_full_batch() {
    let m: SikaModel<f64> = SikaModel::init(&regression_spec(1, Some(3), 4), &mut rng(7)).unwrap();
    let (x, y) = linear_data(40, 0.1, 8);
    let full = m.sample_noise(Sampler::Reparam, 40, &mut rng(9));
    let (whole, _) = elbo_with_noise(&m, x.view(), Targets::Regression(y.view()), vec![full.clone()], 0.0).unwrap();
    let mut total = 0.0;
    for start in (0..40).step_by(10) {
        let part: Vec<Noise<f64>> = full
            .iter()
            .map(|n| match n {
                Noise::Reparam { w, b } => Noise::Reparam {
                    w: w.slice(s![start..start + 10, .., ..]).to_owned(),
                    b: b.slice(s![start..start + 10, ..]).to_owned(),
                },
                Noise::Flipout { .. } => unreachable!(),
            })
            .collect();
        let xb = x.slice(s![start..start + 10, ..]);
        let yb = y.slice(s![start..start + 10]);
        total += elbo_with_noise(&m, xb, Targets::Regression(yb), vec![part], 0.0).unwrap().0.nll;
    }
    assert!((total - whole.nll).abs() < 1e-10);
}

#[test]
fn minibatch_gradient_matches_finite_differences() {
    let spec = regression_spec(1, Some(3), 3);
    let mut m: SikaModel<f64> = SikaModel::init(&spec, &mut rng(10)).unwrap();
    let (x, y) = linear_data(8, 0.1, 11);
    let noise: Vec<Vec<Noise<f64>>> = (0..2).map(|_| m.sample_noise(Sampler::Flipout, 8, &mut rng(12))).collect();
    let kl_scale = 0.3;
    let eval = |m: &SikaModel<f64>| {
        elbo_with_noise(m, x.view(), Targets::Regression(y.view()), noise.clone(), kl_scale).unwrap()
    };
    let (_, g) = eval(&m);
    let flat: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
    let h = 1e-6;
    let mut r = rng(13);
    for (k, grads) in flat.iter().enumerate() {
        for _ in 0..5 {
            if grads.is_empty() {
                continue;
            }
            let i = r.random_range(0..grads.len());
            let orig = m.param_slices_mut()[k].0[i];
            m.param_slices_mut()[k].0[i] = orig + h;
            let lp = eval(&m).0.loss;
            m.param_slices_mut()[k].0[i] = orig - h;
            let lm = eval(&m).0.loss;
            m.param_slices_mut()[k].0[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(1e-5);
            assert!(rel < 1e-3, "slice {k}[{i}]: {} vs {fd}", grads[i]);
        }
    }
}

fn fit_linear(seed: u64) -> (SikaModel<f64>, sika_core::vi::History) {
    let (x, y) = linear_data(400, 0.1, 20);
    let mut m: SikaModel<f64> = SikaModel::init(&regression_spec(1, None, 4), &mut rng(21)).unwrap();
    let cfg = TrainConfig { epochs: 50, batch_size: 32, learning_rate: 0.02, seed, ..TrainConfig::default() };
    let h = train(&mut m, x.view(), Targets::Regression(y.view()), &cfg, None).unwrap();
    (m, h)
}

#[test]
fn single_layer_recovers_a_noisy_line() {
    let (m, h) = fit_linear(5);
    let (x, y) = linear_data(400, 0.1, 20);
    let pred = predict(&m, x.view(), 20, &mut rng(22)).unwrap();
    let rmse = metrics::rmse(y.as_slice().unwrap(), pred.mean.as_slice().unwrap()).unwrap();
    assert!(rmse < 0.12, "train RMSE {rmse}");
    let losses: Vec<f64> = h.records.iter().map(|r| r.loss).collect();
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median(&losses[40..]) < median(&losses[..10]));
}

#[test]
fn training_is_deterministic_and_thread_count_independent() {
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fit_linear(77))
    };
    let (a, ha) = run(1);
    let (b, hb) = run(1);
    let (c, hc) = run(4);
    assert_eq!(ha.records, hb.records);
    assert_eq!(ha.records, hc.records);
    for (la, (lb, lc)) in a.layers.iter().zip(b.layers.iter().zip(&c.layers)) {
        assert_eq!(la.weight_mean, lb.weight_mean);
        assert_eq!(la.weight_rho, lc.weight_rho);
    }
}

#[test]
fn history_kl_matches_final_model() {
    let (m, h) = fit_linear(3);
    assert!((h.records.last().unwrap().kl - kl_model(&m)).abs() < 1e-8);
}

#[test]
fn degenerate_posterior_predicts_only_noise_variance() {
    let mut m: SikaModel<f64> = SikaModel::init(&regression_spec(1, Some(3), 3), &mut rng(30)).unwrap();
    for l in &mut m.layers {
        l.weight_rho.fill(-60.0);
        l.bias_rho.fill(-60.0);
    }
    let x = Array2::from_elem((3, 1), 0.3);
    let p = predict(&m, x.view(), 10, &mut rng(31)).unwrap();
    let nv = m.likelihood.noise_var().unwrap();
    for &v in &p.variance {
        assert!((v - nv).abs() < 1e-12);
    }
    assert!(predict(&m, x.view(), 1, &mut rng(31)).is_err());
}

#[test]
fn predictive_variance_matches_analytic_form() {
    let m: SikaModel<f64> = SikaModel::init(&regression_spec(1, None, 6), &mut rng(40)).unwrap();
    let l = &m.layers[0];
    let x = Array2::from_elem((1, 1), 0.613);
    let act = l.featurizer().sparse(x.view()).unwrap();
    let mut var = softplus(l.bias_rho[0]).powi(2) + m.likelihood.noise_var().unwrap();
    for s in 0..l.slots() {
        let row = act.indices[[0, 0, s]] as usize;
        var += act.values[[0, 0, s]].powi(2) * softplus(l.weight_rho[[row, 0]]).powi(2);
    }
    let p = predict(&m, x.view(), 10_000, &mut rng(41)).unwrap();
    assert!((p.variance[0] / var - 1.0).abs() < 0.05, "{} vs {var}", p.variance[0]);
}

#[test]
fn classification_probabilities_are_normalised() {
    let spec = ModelSpec {
        layers: vec![
            LayerSpec { in_dim: 2, out_dim: 4, level: 3, theta: 1.0 },
            LayerSpec { in_dim: 4, out_dim: 3, level: 3, theta: 1.0 },
        ],
        squash: Squash::Sigmoid,
        likelihood: LikelihoodSpec::Categorical,
    };
    let mut r = rng(50);
    let mut m: SikaModel<f64> = SikaModel::init(&spec, &mut r).unwrap();
    let x = Array2::from_shape_simple_fn((60, 2), || r.random::<f64>());
    let labels: Vec<usize> = x.axis_iter(Axis(0)).map(|row| usize::from(row[0] > 0.5) + usize::from(row[1] > 0.5)).collect();
    let cfg = TrainConfig { epochs: 5, batch_size: 16, learning_rate: 0.01, ..TrainConfig::default() };
    let h = train(&mut m, x.view(), Targets::Classes(&labels), &cfg, Some((x.view(), Targets::Classes(&labels)))).unwrap();
    assert!(h.records.iter().all(|r| r.heldout.unwrap() >= 0.0));
    let p = predict(&m, x.view(), 20, &mut rng(51)).unwrap();
    for row in p.class_probs.unwrap().axis_iter(Axis(0)) {
        assert!((row.sum() - 1.0).abs() < 1e-8);
    }
}

#[test]
fn mismatched_targets_are_rejected() {
    let m: SikaModel<f64> = SikaModel::init(&regression_spec(1, None, 2), &mut rng(60)).unwrap();
    let x = Array2::from_elem((2, 1), 0.5);
    let r = elbo_minibatch(&m, x.view(), Targets::Classes(&[0, 1]), 1, Sampler::Reparam, &mut rng(0), 0.0);
    assert!(r.is_err());
}
