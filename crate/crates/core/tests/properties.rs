use ndarray::Array2;
use proptest::prelude::*;
use sika_core::data_io::Normalizer;
use sika_core::metrics::{ece, mutual_information, nlpd, predictive_entropy, rmse, CalibrationConfig};
use sika_core::sparse_index::{assemble_global_indices, sparse_features, tsi_indices};
use sika_core::vi::kl_mean_field;
use sika_core::{build_grid, init_layer, LayerSpec, VariationalLayer};

fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, c).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-12;
        v.iter().map(|x| (x + 1e-12 / v.len() as f64) / s).collect()
    })
}

proptest! {
    #[test]
    fn ece_is_bounded_and_permutation_invariant(
        rows in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..60),
        bins in 1usize..20,
    ) {
        let cfg = CalibrationConfig { num_bins: bins };
        let (c, k): (Vec<f64>, Vec<bool>) = rows.iter().copied().unzip();
        let e = ece(&c, &k, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let (rc, rk): (Vec<f64>, Vec<bool>) = rows.iter().rev().copied().unzip();
        prop_assert!((ece(&rc, &rk, &cfg).unwrap() - e).abs() < 1e-12);
    }

    #[test]
    fn mutual_information_is_between_zero_and_entropy(
        draws in (2usize..6).prop_flat_map(|c| prop::collection::vec(simplex(c), 2..8)),
    ) {
        let mi = mutual_information(&draws).unwrap();
        let c = draws[0].len();
        let mean: Vec<f64> = (0..c).map(|k| draws.iter().map(|d| d[k]).sum::<f64>() / draws.len() as f64).collect();
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= predictive_entropy(&mean).unwrap() + 1e-12);
    }

    #[test]
    fn unit_variance_nlpd_is_half_squared_rmse_plus_constant(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40),
    ) {
        let (y, m): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ones = vec![1.0; y.len()];
        let r = rmse(&y, &m).unwrap();
        let expect = 0.5 * r * r + 0.5 * (2.0 * std::f64::consts::PI).ln();
        prop_assert!((nlpd(&y, &m, &ones).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn normalized_values_never_leave_unit_interval(
        train in prop::collection::vec(-100.0f64..100.0, 2..30),
        test in prop::collection::vec(-1e6f64..1e6, 1..30),
    ) {
        let n = Normalizer::fit(Array2::from_shape_vec((train.len(), 1), train).unwrap().view()).unwrap();
        let out = n.apply::<f64>(Array2::from_shape_vec((test.len(), 1), test).unwrap().view()).unwrap();
        prop_assert!(out.x.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn active_slots_cover_every_nonzero_basis(x in 0.0f64..=1.0, level in 1u32..=10) {
        let grid = build_grid(level).unwrap();
        let xv = Array2::from_elem((1, 1), x);
        let act = sparse_features(xv.view(), &grid, 1.0).unwrap();
        prop_assert_eq!(act.slots(), level as usize + 2);
        let global = assemble_global_indices(&tsi_indices(xv.view(), level).unwrap());
        prop_assert_eq!(&global, &act.indices);
        let dense = sika_core::sparse_index::dense_features(xv.view(), &grid, 1.0).unwrap();
        let active: Vec<u32> = act.indices.iter().copied().collect();
        for (p, &v) in dense.iter().enumerate() {
            if v != 0.0 {
                prop_assert!(active.contains(&(p as u32)), "position {} active but not indexed", p);
            }
        }
    }

    #[test]
    fn kl_is_nonnegative(seed in any::<u64>(), shift in -3.0f64..3.0) {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut l: VariationalLayer<f64> =
            init_layer(&LayerSpec { in_dim: 2, out_dim: 2, level: 3, theta: 1.0 }, &mut r).unwrap();
        l.weight_rho.mapv_inplace(|v| v + shift);
        prop_assert!(kl_mean_field(&l) >= 0.0);
    }
}
