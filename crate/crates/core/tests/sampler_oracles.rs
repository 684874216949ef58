mod common;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ContinuousCDF, Gamma, Normal};

use common::{ks_pvalue, mean, smooth_data};
use freeknot::basis::KnotLayout;
use freeknot::dataprep::default_prior;
use freeknot::evaluation::inefficiency_factor;
use freeknot::posterior::Model;
use freeknot::sampler::{run_chain, tailored_mh_step, ChainConfig, FnTarget, MHConfig, UpdateFlags, Updater};

const BEND: f64 = 0.5;

fn banana_logpost(x: &DVector<f64>) -> f64 {
    let r = x[1] - BEND * (x[0] * x[0] - 1.0);
    -0.5 * x[0] * x[0] - 0.5 * r * r
}

#[test]
fn banana_chain_matches_grid_quadrature() {
    // Reference moments by brute-force quadrature on a fine grid.
    let (lo, hi, m) = (-8.0, 12.0, 1200);
    let h = (hi - lo) / m as f64;
    let mut z = 0.0;
    let mut mom = [0.0; 5]; // x1, x2, x1², x2², x1·x2
    for i in 0..m {
        let a = lo + (i as f64 + 0.5) * h;
        for j in 0..m {
            let b = lo + (j as f64 + 0.5) * h;
            let w = banana_logpost(&DVector::from_vec(vec![a, b])).exp();
            z += w;
            for (slot, v) in mom.iter_mut().zip([a, b, a * a, b * b, a * b]) {
                *slot += w * v;
            }
        }
    }
    let reference: Vec<f64> = mom.iter().map(|v| v / z).collect();

    // Gauss-Newton curvature keeps the proposal scale negative definite.
    let mut target = FnTarget {
        logpost: banana_logpost,
        derivs: |x: &DVector<f64>| {
            let r = x[1] - BEND * (x[0] * x[0] - 1.0);
            let dr = -2.0 * BEND * x[0];
            let g = DVector::from_vec(vec![-x[0] - r * dr, -r]);
            let hess = -DMatrix::from_row_slice(2, 2, &[1.0 + dr * dr, dr, dr, 1.0]);
            (g, hess)
        },
    };
    let cfg = MHConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut theta = DVector::zeros(2);
    let draws = 60_000;
    let mut series = vec![Vec::with_capacity(draws); 5];
    for _ in 0..draws {
        theta = tailored_mh_step(&mut target, &theta, &cfg, &mut rng).theta;
        let (a, b) = (theta[0], theta[1]);
        for (s, v) in series.iter_mut().zip([a, b, a * a, b * b, a * b]) {
            s.push(v);
        }
    }
    for (k, s) in series.iter().enumerate() {
        let se = (common::variance(s) * inefficiency_factor(s).unwrap() / draws as f64).sqrt();
        let gap = (mean(s) - reference[k]).abs();
        assert!(gap < 3.0 * se, "moment {k}: chain {} grid {} se {se}", mean(s), reference[k]);
    }
}

/// `r'(I + λH)^{-1} r` and `ln|I + λH|` for the hat matrix `H` of `x`.
fn g_prior_quadratic(x: &DMatrix<f64>, r: &DVector<f64>, lambda: f64) -> (f64, f64) {
    let n = x.nrows();
    let hat = x * (x.transpose() * x).try_inverse().unwrap() * x.transpose();
    let m = DMatrix::identity(n, n) + hat * lambda;
    let ch = m.clone().cholesky().unwrap();
    let quad = r.dot(&ch.solve(r));
    let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    (quad, logdet)
}

#[test]
fn univariate_sigma_draws_follow_conjugate_inverse_gamma() {
    let data = smooth_data(40, 1, 21);
    let prior = default_prior(&data, &KnotLayout::uniform(2, 0, 0), 1).unwrap();
    let model = Model::new(data.clone(), prior.clone()).unwrap();
    let cfg = ChainConfig {
        iterations: 10_000,
        burn_in: 0,
        seed: 4,
        update: UpdateFlags {
            sigma: true,
            knots: false,
            lambda: false,
        },
        ..ChainConfig::default()
    };
    let out = run_chain(&model, &cfg, None).unwrap();
    assert_eq!(out.sigma_acceptance_rate(), 1.0);

    // σ² | y ~ IG((n0 + n)/2, (n0 s0 + r'(I + λH)^{-1} r)/2), r = y - Xμ.
    let lambda = prior.log_lambda_mean[0].exp();
    let r = DVector::from_column_slice(data.y.as_slice());
    let (quad, _) = g_prior_quadratic(&data.xo, &r, lambda);
    let shape = 0.5 * (prior.n0 + data.n() as f64);
    let rate = 0.5 * (prior.n0 * prior.s0[(0, 0)] + quad);
    let precision = Gamma::new(shape, rate).unwrap();
    let draws: Vec<f64> = out.draws.iter().map(|d| d.sigma[(0, 0)]).collect();
    let pval = ks_pvalue(&draws, |s| 1.0 - precision.cdf(1.0 / s));
    assert!(pval > 0.01, "KS p = {pval}");
}

#[test]
fn knot_with_switched_off_coefficients_follows_its_prior() {
    let data = smooth_data(50, 1, 5);
    let mut prior = default_prior(&data, &KnotLayout::uniform(2, 1, 0), 2).unwrap();
    // Surface coefficients pinned at zero: the knot no longer touches the data.
    prior.log_lambda_mean[2] = -20.0;
    prior.log_lambda_var[2] = 1e-6;
    let model = Model::new(data, prior.clone()).unwrap();
    let cfg = ChainConfig {
        iterations: 20_000,
        burn_in: 200,
        seed: 8,
        update: UpdateFlags {
            sigma: true,
            knots: true,
            lambda: false,
        },
        ..ChainConfig::default()
    };
    let out = run_chain(&model, &cfg, None).unwrap();
    assert!(out.knot_acceptance_rate() > 0.5, "{}", out.knot_acceptance_rate());
    for c in 0..2 {
        let sd = prior.surface_knot_cov[(c, c)].sqrt();
        let marginal = Normal::new(prior.surface_knot_mean[(0, c)], sd).unwrap();
        let thinned: Vec<f64> = out.draws.iter().step_by(10).map(|d| d.knots[c]).collect();
        let pval = ks_pvalue(&thinned, |v| marginal.cdf(v));
        assert!(pval > 0.01, "coordinate {c}: KS p = {pval}");
    }
}

#[test]
fn linear_only_lambda_matches_one_dimensional_grid() {
    let data = smooth_data(40, 1, 9);
    let prior = default_prior(&data, &KnotLayout::uniform(2, 0, 0), 1).unwrap();
    let model = Model::new(data.clone(), prior.clone()).unwrap();
    let cfg = ChainConfig {
        iterations: 30_000,
        burn_in: 500,
        seed: 12,
        update: UpdateFlags {
            sigma: false,
            knots: false,
            lambda: true,
        },
        ..ChainConfig::default()
    };
    let out = run_chain(&model, &cfg, None).unwrap();
    let sigma2 = prior.s0[(0, 0)];

    // log p(t | y, σ²) with t = ln λ: y ~ N(0, σ²(I + λH)) times the normal prior on t.
    let r = DVector::from_column_slice(data.y.as_slice());
    let (m, v) = (prior.log_lambda_mean[0], prior.log_lambda_var[0]);
    let logp = |t: f64| {
        let (quad, logdet) = g_prior_quadratic(&data.xo, &r, t.exp());
        -0.5 * logdet - 0.5 * quad / sigma2 - 0.5 * (t - m).powi(2) / v
    };
    let (lo, hi, cells) = (m - 12.0, m + 12.0, 4000);
    let w = (hi - lo) / cells as f64;
    let logs: Vec<f64> = (0..cells).map(|i| logp(lo + (i as f64 + 0.5) * w)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut cdf = Vec::with_capacity(cells + 1);
    cdf.push(0.0);
    for l in &logs {
        cdf.push(cdf.last().unwrap() + (l - top).exp());
    }
    let total = *cdf.last().unwrap();
    let grid_cdf = |t: f64| {
        let x = ((t - lo) / w).clamp(0.0, cells as f64);
        let i = (x as usize).min(cells - 1);
        (cdf[i] + (x - i as f64) * (cdf[i + 1] - cdf[i])) / total
    };
    let thinned: Vec<f64> = out.draws.iter().step_by(15).map(|d| d.log_lambda[0]).collect();
    let pval = ks_pvalue(&thinned, grid_cdf);
    assert!(pval > 0.01, "KS p = {pval}");
}

#[test]
fn bivariate_sigma_proposal_is_nearly_exact() {
    let data = smooth_data(80, 2, 17);
    let prior = default_prior(&data, &KnotLayout::uniform(2, 3, 1), 2).unwrap();
    let model = Model::new(data, prior).unwrap();
    let cfg = ChainConfig {
        iterations: 300,
        burn_in: 50,
        seed: 3,
        mh: MHConfig {
            updater: Updater::Smh,
            ..MHConfig::default()
        },
        ..ChainConfig::default()
    };
    let out = run_chain(&model, &cfg, None).unwrap();
    assert!(out.sigma_acceptance_rate() > 0.9, "{}", out.sigma_acceptance_rate());
    assert!(out.draws.iter().all(|d| d.sigma.clone().cholesky().is_some()));
}

#[test]
fn vanishing_random_walk_scale_accepts_everything() {
    let data = smooth_data(40, 1, 2);
    let prior = default_prior(&data, &KnotLayout::uniform(2, 2, 1), 2).unwrap();
    let model = Model::new(data.clone(), prior).unwrap();
    let cfg = ChainConfig {
        iterations: 100,
        burn_in: 0,
        seed: 6,
        mh: MHConfig {
            updater: Updater::Srwm,
            srwm_scale: 1e-9,
            ..MHConfig::default()
        },
        ..ChainConfig::default()
    };
    let out = run_chain(&model, &cfg, None).unwrap();
    assert!(out.knot_acceptance_rate() > 0.97, "{}", out.knot_acceptance_rate());
    let first = &out.draws[0].knots;
    let last = &out.draws[99].knots;
    assert!((first - last).amax() < 1e-6);
}

#[test]
fn conditional_b_draws_centre_on_b_tilde() {
    let data = smooth_data(60, 2, 4);
    let prior = default_prior(&data, &KnotLayout::uniform(2, 2, 1), 2).unwrap();
    let model = Model::new(data, prior).unwrap();
    let state = model.initial_state();
    let mom = model.moments(&state).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let draws = 20_000;
    let mut sum = DMatrix::zeros(mom.b_tilde.nrows(), mom.b_tilde.ncols());
    for _ in 0..draws {
        sum += freeknot::sampler::draw_b(&model, &state, &mut rng).unwrap().0;
    }
    let avg = sum / draws as f64;
    let sd = mom.sigma_beta_tilde.diagonal().map(f64::sqrt);
    for (k, (a, b)) in avg.iter().zip(mom.b_tilde.iter()).enumerate() {
        let se = sd[k] / (draws as f64).sqrt();
        assert!((a - b).abs() < 4.0 * se, "entry {k}: {a} vs {b}");
    }
}
