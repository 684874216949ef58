//! Synthetic data from a mixture-of-normals covariate design with a
//! thin-plate surface, and the fixed- versus free-knot loss study.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{design_from_covariates, KnotLayout, KnotSet};
use crate::dataprep::{default_prior, with_intercept, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{dnl, posterior_surface, surface_loss_matrix};
use crate::linalg::{cholesky_jitter, standard_normal_vector};
use crate::posterior::{Model, ModelState};
use crate::rng::{derive_seed, stream_rng};
use crate::sampler::{run_chain, ChainConfig, UpdateFlags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub n: usize,
    pub p: usize,
    /// Number of covariates (the design adds an intercept).
    pub covariates: usize,
    pub components: usize,
    pub component_var: f64,
    pub true_knots: usize,
    pub error_var: f64,
    pub error_cov: f64,
    /// Use error covariance 0.1 with a 1e-6 diagonal jitter instead of `error_cov`.
    pub paper_exact: bool,
    /// Held-out evaluation points; 0 means `n`.
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            n: 200,
            p: 2,
            covariates: 5,
            components: 5,
            component_var: 0.1,
            true_knots: 5,
            error_var: 0.1,
            error_cov: 0.05,
            paper_exact: false,
            n_eval: 0,
            seed: 1,
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.covariates == 0 || self.components == 0 {
            return Err(Error::Config("n, p, covariates and components must be positive".into()));
        }
        if self.true_knots > self.n {
            return Err(Error::Config(format!(
                "cannot pick {} true knots from {} rows",
                self.true_knots, self.n
            )));
        }
        if !(self.component_var > 0.0) || !(self.error_var > 0.0) {
            return Err(Error::Config("variances must be positive".into()));
        }
        Ok(())
    }

    pub fn sigma_true(&self) -> DMatrix<f64> {
        let (off, jitter) = if self.paper_exact { (0.1, 1e-6) } else { (self.error_cov, 0.0) };
        DMatrix::from_fn(self.p, self.p, |i, j| {
            if i == j {
                self.error_var + jitter
            } else {
                off
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub data: Dataset,
    pub weights: Vec<f64>,
    /// components x covariates
    pub component_means: DMatrix<f64>,
    pub true_knots: DMatrix<f64>,
    pub true_b: DMatrix<f64>,
    pub sigma_true: DMatrix<f64>,
    /// Noiseless surface at the training covariates (n x p).
    pub f_train: DMatrix<f64>,
    pub eval_covariates: DMatrix<f64>,
    pub f_eval: DMatrix<f64>,
}

impl SyntheticDataset {
    pub fn true_knot_set(&self) -> KnotSet {
        KnotSet {
            surface: self.true_knots.clone(),
            additive: vec![Vec::new(); self.true_knots.ncols()],
        }
    }

    /// Noiseless surface at arbitrary covariate rows.
    pub fn surface_at(&self, covariates: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let design = design_from_covariates(&with_intercept(covariates), &self.true_knot_set())?;
        Ok(design.x * &self.true_b)
    }
}

fn mixture_draw<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    weights: &WeightedIndex<f64>,
    means: &DMatrix<f64>,
    sd: f64,
) -> DMatrix<f64> {
    let d = means.ncols();
    let mut x = DMatrix::zeros(rows, d);
    for i in 0..rows {
        let r = weights.sample(rng);
        let z = standard_normal_vector(rng, d);
        for j in 0..d {
            x[(i, j)] = means[(r, j)] + sd * z[j];
        }
    }
    x
}

/// Alternating −1, 1 in column-major order.
pub fn alternating_coefficients(q: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(q, p, |i, j| if (j * q + i) % 2 == 0 { -1.0 } else { 1.0 })
}

pub fn generate_dgp(spec: &DgpSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let d = spec.covariates;
    let mut mix_rng = stream_rng(spec.seed, 0);
    let u: Vec<f64> = (0..spec.components).map(|_| mix_rng.random::<f64>()).collect();
    let total: f64 = u.iter().sum();
    let weights: Vec<f64> = u.iter().map(|v| v / total).collect();
    let component_means = DMatrix::from_fn(spec.components, d, |_, _| mix_rng.random_range(-1.0..1.0));
    let picker = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let sd = spec.component_var.sqrt();

    let mut x_rng = stream_rng(spec.seed, 1);
    let cov = mixture_draw(&mut x_rng, spec.n, &picker, &component_means, sd);

    let mut knot_rng = stream_rng(spec.seed, 2);
    let rows: Vec<usize> = sample(&mut knot_rng, spec.n, spec.true_knots).into_vec();
    let true_knots = cov.select_rows(rows.iter());
    let knots = KnotSet::new(true_knots.clone(), vec![Vec::new(); d])?;
    let xo = with_intercept(&cov);
    let design = design_from_covariates(&xo, &knots)?;
    let true_b = alternating_coefficients(design.q(), spec.p);
    let f_train = &design.x * &true_b;

    let sigma_true = spec.sigma_true();
    let l = cholesky_jitter(&sigma_true, "true error covariance")?.l();
    let mut e_rng = stream_rng(spec.seed, 3);
    let mut y = f_train.clone();
    for i in 0..spec.n {
        let e = &l * standard_normal_vector(&mut e_rng, spec.p);
        for j in 0..spec.p {
            y[(i, j)] += e[j];
        }
    }

    let mut eval_rng = stream_rng(spec.seed, 4);
    let n_eval = if spec.n_eval == 0 { spec.n } else { spec.n_eval };
    let eval_covariates = mixture_draw(&mut eval_rng, n_eval, &picker, &component_means, sd);
    let eval_design = design_from_covariates(&with_intercept(&eval_covariates), &knots)?;
    let f_eval = eval_design.x * &true_b;

    Ok(SyntheticDataset {
        data: Dataset::new(y, xo)?,
        weights,
        component_means,
        true_knots,
        true_b,
        sigma_true,
        f_train,
        eval_covariates,
        f_eval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fixed,
    Free,
    /// True knots, knot updates off.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub replicates: usize,
    pub dgp: DgpSpec,
    pub fixed_knots: Vec<usize>,
    pub free_knots: Vec<usize>,
    pub oracle: bool,
    pub chain: ChainConfig,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            replicates: 20,
            dgp: DgpSpec::default(),
            fixed_knots: vec![5, 10, 15, 20, 25, 50],
            free_knots: vec![5, 10, 15],
            oracle: true,
            chain: ChainConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub replicate: usize,
    pub model: ModelKind,
    pub knots: usize,
    /// DNL averaged over responses.
    pub dnl: f64,
    /// Surface loss on the held-out points, averaged over responses.
    pub loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioCell {
    pub fixed: usize,
    pub free: usize,
    /// 0 = lowest DNL third.
    pub tercile: usize,
    /// ln(loss fixed / loss free), one per replicate with both losses.
    pub log_ratios: Vec<f64>,
    pub median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    /// DNL values at the 1/3 and 2/3 quantiles.
    pub tercile_bounds: [f64; 2],
    pub cells: Vec<RatioCell>,
    /// Overall median log ratio per (fixed, free) pair, ignoring terciles.
    pub overall: Vec<RatioCell>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile(&v, 0.5))
}

/// Fits one model and returns its held-out surface loss.
pub fn fit_and_score(
    syn: &SyntheticDataset,
    kind: ModelKind,
    surface_knots: usize,
    chain: &ChainConfig,
    seed: u64,
) -> Result<f64> {
    let layout = KnotLayout::uniform(syn.data.dim(), surface_knots, 0);
    let prior = default_prior(&syn.data, &layout, seed)?;
    let model = Model::new(syn.data.clone(), prior)?;
    let mut cfg = ChainConfig {
        seed,
        ..chain.clone()
    };
    let mut init = None;
    match kind {
        ModelKind::Fixed => cfg.update.knots = false,
        ModelKind::Free => {}
        ModelKind::Oracle => {
            cfg.update = UpdateFlags {
                knots: false,
                ..cfg.update
            };
            init = Some(ModelState {
                knots: syn.true_knot_set(),
                ..model.initial_state()
            });
        }
    }
    let out = run_chain(&model, &cfg, init)?;
    let surf = posterior_surface(&out, &syn.eval_covariates)?;
    surface_loss_matrix(&syn.f_eval, &surf.mean)
}

fn tercile_of(v: f64, bounds: [f64; 2]) -> usize {
    if v <= bounds[0] {
        0
    } else if v <= bounds[1] {
        1
    } else {
        2
    }
}

/// Replicates run in parallel; every fit gets a seed derived from the
/// replicate seed, so the report does not depend on scheduling.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if cfg.replicates == 0 {
        return Err(Error::Config("benchmark needs at least one replicate".into()));
    }
    let mut models: Vec<(ModelKind, usize)> = Vec::new();
    models.extend(cfg.fixed_knots.iter().map(|&k| (ModelKind::Fixed, k)));
    models.extend(cfg.free_knots.iter().map(|&k| (ModelKind::Free, k)));
    if cfg.oracle {
        models.push((ModelKind::Oracle, cfg.dgp.true_knots));
    }
    let per_rep: Vec<Vec<BenchmarkRow>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let rep_seed = derive_seed(cfg.seed, r as u64);
            let syn = generate_dgp(&DgpSpec {
                seed: rep_seed,
                ..cfg.dgp.clone()
            })?;
            let dnl_v = dnl(&syn.f_train, &syn.data.xo)?;
            let dnl_mean = dnl_v.mean();
            let rows = models
                .par_iter()
                .enumerate()
                .map(|(m, &(kind, k))| {
                    let res = fit_and_score(&syn, kind, k, &cfg.chain, derive_seed(rep_seed, m as u64 + 1));
                    BenchmarkRow {
                        replicate: r,
                        model: kind,
                        knots: k,
                        dnl: dnl_mean,
                        loss: res.as_ref().ok().copied(),
                        error: res.err().map(|e| e.to_string()),
                    }
                })
                .collect();
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<BenchmarkRow> = per_rep.into_iter().flatten().collect();

    let mut dnls: Vec<f64> = (0..cfg.replicates)
        .map(|r| rows.iter().find(|row| row.replicate == r).map_or(f64::NAN, |row| row.dnl))
        .collect();
    dnls.sort_by(f64::total_cmp);
    let tercile_bounds = [quantile(&dnls, 1.0 / 3.0), quantile(&dnls, 2.0 / 3.0)];

    let loss_of = |r: usize, kind: ModelKind, k: usize| {
        rows.iter()
            .find(|row| row.replicate == r && row.model == kind && row.knots == k)
            .and_then(|row| row.loss)
    };
    let mut cells = Vec::new();
    let mut overall = Vec::new();
    for &free in &cfg.free_knots {
        for &fixed in &cfg.fixed_knots {
            let mut all = Vec::new();
            let mut by_t = [Vec::new(), Vec::new(), Vec::new()];
            for r in 0..cfg.replicates {
                if let (Some(lf), Some(lr)) = (loss_of(r, ModelKind::Fixed, fixed), loss_of(r, ModelKind::Free, free)) {
                    let v = (lf / lr).ln();
                    let dnl_r = rows.iter().find(|row| row.replicate == r).map_or(f64::NAN, |row| row.dnl);
                    by_t[tercile_of(dnl_r, tercile_bounds)].push(v);
                    all.push(v);
                }
            }
            for (t, vals) in by_t.into_iter().enumerate() {
                cells.push(RatioCell {
                    fixed,
                    free,
                    tercile: t,
                    median: median(&vals),
                    log_ratios: vals,
                });
            }
            overall.push(RatioCell {
                fixed,
                free,
                tercile: usize::MAX,
                median: median(&all),
                log_ratios: all,
            });
        }
    }
    Ok(BenchmarkReport {
        rows,
        tercile_bounds,
        cells,
        overall,
    })
}
