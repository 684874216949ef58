mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use common::smooth_data;
use freeknot::basis::KnotLayout;
use freeknot::dataprep::{default_prior, with_intercept};
use freeknot::evaluation::{dnl, knot_heatmap};
use freeknot::posterior::Model;
use freeknot::sampler::{run_chain, ChainConfig, MHConfig, Updater};

fn random_model(seed: u64, p: usize, ks: usize, ka: usize) -> Model {
    let data = smooth_data(30, p, seed);
    let prior = default_prior(&data, &KnotLayout::uniform(2, ks, ka), seed).unwrap();
    Model::new(data, prior).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn log_marginal_is_invariant_to_surface_knot_relabelling(seed in 0u64..1000, p in 1usize..=2, ks in 2usize..5, shift in 1usize..4) {
        let model = random_model(seed, p, ks, 1);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut state = model.initial_state();
        state.knots.surface = state.knots.surface.map(|v| v + rng.random_range(-0.3..0.3));
        let perm: Vec<usize> = (0..ks).map(|k| (k + shift) % ks).collect();
        let mut prior = model.prior.clone();
        prior.surface_knot_mean = model.prior.surface_knot_mean.select_rows(perm.iter());
        let permuted = Model::new(model.data.clone(), prior).unwrap();
        let mut s2 = state.clone();
        s2.knots.surface = state.knots.surface.select_rows(perm.iter());
        let a = model.log_marginal(&state).unwrap();
        let b = permuted.log_marginal(&s2).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn dnl_vanishes_exactly_on_the_linear_span(seed in 0u64..1000, n in 8usize..60, d in 1usize..4, bump in 0.1f64..5.0) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let xo = with_intercept(&DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)));
        let c = DMatrix::from_fn(d + 1, 2, |_, _| rng.random_range(-3.0..3.0));
        let linear = &xo * c;
        prop_assert!(dnl(&linear, &xo).unwrap().amax() < 1e-8);
        // A component orthogonal to the span keeps DNL away from zero.
        let z = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let proj = &xo * (xo.transpose() * &xo).try_inverse().unwrap() * xo.transpose() * &z;
        let ortho = (z - proj) * bump;
        prop_assume!(ortho.norm() > 1e-6);
        let mut bent = linear.clone();
        bent.column_mut(0).axpy(1.0, &ortho, 1.0);
        let v = dnl(&bent, &xo).unwrap();
        prop_assert!((v[0] - ortho.norm() / (n as f64).sqrt()).abs() < 1e-8 * (1.0 + v[0]));
        prop_assert!(v[1] < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn chains_keep_sigma_spd_and_heatmaps_conserve_mass(seed in 0u64..1000, p in 1usize..=2, ks in 1usize..4, ka in 0usize..3, smh in proptest::bool::ANY) {
        let model = random_model(seed, p, ks, ka);
        let cfg = ChainConfig {
            iterations: 12,
            burn_in: 3,
            seed,
            mh: MHConfig { updater: if smh { Updater::Smh } else { Updater::Bmh }, ..MHConfig::default() },
            ..ChainConfig::default()
        };
        let out = run_chain(&model, &cfg, None).unwrap();
        prop_assert_eq!(out.draws.len(), 12);
        for d in &out.draws {
            prop_assert!(d.sigma.clone().cholesky().is_some());
            prop_assert!(d.log_lambda.iter().all(|v| v.is_finite()));
        }
        let bounds = vec![(-1.0, 1.0); 2];
        let (surface, additive) = knot_heatmap(&out, &bounds, 9, &[0, 1]).unwrap();
        prop_assert_eq!(surface.total(), (12 * ks) as u64);
        for g in &additive {
            prop_assert_eq!(g.total(), (12 * ka) as u64);
        }
    }
}

#[test]
fn chain_does_not_depend_on_thread_count() {
    let model = random_model(4, 2, 2, 1);
    let cfg = ChainConfig {
        iterations: 20,
        burn_in: 5,
        seed: 3,
        ..ChainConfig::default()
    };
    let run_in = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_chain(&model, &cfg, None).unwrap())
    };
    let (a, b) = (run_in(1), run_in(4));
    assert_eq!(a.draws, b.draws);
}
