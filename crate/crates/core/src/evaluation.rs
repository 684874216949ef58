//! Model comparison and MCMC diagnostics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{design_from_covariates, KnotSet};
use crate::dataprep::{ols, partition_folds, with_intercept, Dataset, PriorSpec};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jitter, ln_det_chol, log_sum_exp};
use crate::posterior::Model;
use crate::rng::{derive_seed, stream_rng};
use crate::sampler::{run_chain, ChainConfig, ChainOutput};

/// 1 + 2 Σ ρ_k, summed while ρ_k stays positive; floored at 1. A constant
/// series gives `f64::INFINITY`.
pub fn inefficiency_factor(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n < 50 {
        return Err(Error::InvalidArgument(format!(
            "inefficiency factor needs at least 50 draws, got {n}"
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("inefficiency factor: series has non-finite values".into()));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let scale = centered.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(mean.abs());
    if c0 <= (1e-13 * scale).powi(2) || c0 == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mut sum = 0.0;
    for lag in 1..n {
        let ck = centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64;
        let rho = ck / c0;
        if rho <= 0.0 {
            break;
        }
        sum += rho;
    }
    Ok((1.0 + 2.0 * sum).max(1.0))
}

/// Fitted values `x(points)' B` for one set of knots; `points` are rows in
/// (standardised) covariate space.
pub fn fitted_surface(points: &DMatrix<f64>, knots: &KnotSet, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let design = design_from_covariates(&with_intercept(points), knots)?;
    if design.x.ncols() != b.nrows() {
        return Err(Error::Dimension(format!(
            "coefficient matrix has {} rows, design has {} columns",
            b.nrows(),
            design.x.ncols()
        )));
    }
    Ok(&design.x * b)
}

/// Covariate ranges of the data, each widened by `pad` of its length per side.
pub fn data_bounds(data: &Dataset, pad: f64) -> Vec<(f64, f64)> {
    let cov = data.covariates();
    (0..cov.ncols())
        .map(|j| {
            let col = cov.column(j);
            let (lo, hi) = (col.min(), col.max());
            let w = hi - lo;
            (lo - pad * w, hi + pad * w)
        })
        .collect()
}

/// Uniform random points in a box.
pub fn random_points<R: Rng + ?Sized>(bounds: &[(f64, f64)], n_points: usize, rng: &mut R) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n_points, bounds.len());
    for i in 0..n_points {
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            m[(i, j)] = if hi > lo { rng.random_range(lo..hi) } else { lo };
        }
    }
    m
}

fn draw_knots(chain: &ChainOutput, i: usize) -> Result<KnotSet> {
    KnotSet::from_flat(&chain.knot_layout, chain.draws[i].knots.as_slice())
}

/// IFs of the posterior-mean surface (the conditional mean B̃ of each draw)
/// at `n_points` random points in the data's bounding box, one per
/// (point, response).
pub fn surface_if_values(chain: &ChainOutput, data: &Dataset, n_points: usize, seed: u64) -> Result<Vec<f64>> {
    if chain.draws.is_empty() {
        return Err(Error::InvalidArgument("chain has no draws".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let points = random_points(&data_bounds(data, 0.0), n_points, &mut rng);
    let p = data.p();
    let series: Vec<DMatrix<f64>> = (0..chain.draws.len())
        .into_par_iter()
        .map(|i| fitted_surface(&points, &draw_knots(chain, i)?, &chain.draws[i].b_tilde))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(n_points * p);
    for pt in 0..n_points {
        for r in 0..p {
            let s: Vec<f64> = series.iter().map(|f| f[(pt, r)]).collect();
            out.push(inefficiency_factor(&s)?);
        }
    }
    Ok(out)
}

/// Mean surface IF over the finite per-point values; infinite when every
/// series is constant.
pub fn surface_if_summary(chain: &ChainOutput, data: &Dataset, n_points: usize, seed: u64) -> Result<f64> {
    let values = surface_if_values(chain, data, n_points, seed)?;
    let finite: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        Ok(f64::INFINITY)
    } else {
        Ok(finite.iter().sum::<f64>() / finite.len() as f64)
    }
}

pub fn ess_per_minute(draws: usize, mean_if: f64, seconds: f64) -> Result<f64> {
    if !(seconds > 0.0) {
        return Err(Error::InvalidArgument("elapsed time must be positive".into()));
    }
    Ok(draws as f64 / (mean_if * seconds / 60.0))
}

pub fn chain_ess_per_minute(chain: &ChainOutput, mean_if: f64) -> Result<f64> {
    ess_per_minute(chain.draws.len(), mean_if, chain.timing.sampling_secs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpdsReport {
    pub fold_log_pd: Vec<f64>,
    /// Delta-method MC standard error of each fold's log predictive density,
    /// treating draws as independent.
    pub fold_mc_se: Vec<f64>,
    pub fold_sizes: Vec<usize>,
    pub draws: usize,
    pub mean: f64,
}

/// log of the mean over draws of ∏_i N(y_i; B'x_i, Σ), with its MC standard error.
pub fn log_predictive_density(chain: &ChainOutput, test: &Dataset) -> Result<(f64, f64)> {
    let m = chain.draws.len();
    if m == 0 {
        return Err(Error::InvalidArgument("chain has no draws".into()));
    }
    let (n, p) = (test.n(), test.p());
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let logs: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let d = &chain.draws[i];
            let design = design_from_covariates(&test.xo, &draw_knots(chain, i)?)?;
            let resid = &test.y - &design.x * &d.b;
            let ch = cholesky_jitter(&d.sigma, "Sigma draw")?;
            let z = ch.l().solve_lower_triangular(&resid.transpose()).ok_or_else(|| {
                Error::NotPositiveDefinite("Sigma draw".into())
            })?;
            Ok(-0.5 * (n * p) as f64 * ln2pi - 0.5 * n as f64 * ln_det_chol(&ch) - 0.5 * z.norm_squared())
        })
        .collect::<Result<_>>()?;
    let lse = log_sum_exp(&logs);
    let log_mean = lse - (m as f64).ln();
    let w: Vec<f64> = logs.iter().map(|l| (l - log_mean).exp()).collect();
    let var = w.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / (m.max(2) - 1) as f64;
    Ok((log_mean, (var / m as f64).sqrt()))
}

/// D-fold LPDS. `prior_for` builds the prior from each training set; fold
/// chains run in parallel with seeds derived from `cfg.seed`.
pub fn lpds<F>(data: &Dataset, prior_for: F, folds: usize, cfg: &ChainConfig) -> Result<LpdsReport>
where
    F: Fn(&Dataset, u64) -> Result<PriorSpec> + Sync,
{
    if folds < 2 {
        return Err(Error::InvalidArgument("LPDS needs at least 2 folds".into()));
    }
    lpds_partitioned(data, prior_for, &partition_folds(data.n(), folds)?, cfg)
}

/// LPDS over caller-supplied test folds.
pub fn lpds_partitioned<F>(data: &Dataset, prior_for: F, parts: &[Vec<usize>], cfg: &ChainConfig) -> Result<LpdsReport>
where
    F: Fn(&Dataset, u64) -> Result<PriorSpec> + Sync,
{
    let folds = parts.len();
    if folds < 2 {
        return Err(Error::InvalidArgument("LPDS needs at least 2 folds".into()));
    }
    if parts.iter().flatten().any(|&i| i >= data.n()) || parts.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("folds must be non-empty and index existing rows".into()));
    }
    let results: Vec<(f64, f64)> = parts
        .par_iter()
        .enumerate()
        .map(|(d, test_rows)| {
            let mut in_test = vec![false; data.n()];
            for &i in test_rows {
                in_test[i] = true;
            }
            let train_rows: Vec<usize> = (0..data.n()).filter(|&i| !in_test[i]).collect();
            let train = data.subset(&train_rows);
            let test = data.subset(test_rows);
            let fold_seed = derive_seed(cfg.seed, d as u64 + 1);
            let prior = prior_for(&train, fold_seed)?;
            let q = data.q_o() + prior.knot_layout().q_a() + prior.knot_layout().q_s();
            if train.n() < q {
                return Err(Error::InvalidArgument(format!(
                    "fold {d}: {} training rows for {q} coefficients",
                    train.n()
                )));
            }
            let model = Model::new(train, prior)?;
            let chain = run_chain(
                &model,
                &ChainConfig {
                    seed: fold_seed,
                    ..cfg.clone()
                },
                None,
            )?;
            log_predictive_density(&chain, &test)
        })
        .collect::<Result<_>>()?;
    let fold_log_pd: Vec<f64> = results.iter().map(|r| r.0).collect();
    Ok(LpdsReport {
        mean: fold_log_pd.iter().sum::<f64>() / folds as f64,
        fold_mc_se: results.iter().map(|r| r.1).collect(),
        fold_sizes: parts.iter().map(|p| p.len()).collect(),
        draws: cfg.iterations,
        fold_log_pd,
    })
}

/// Root mean squared gap between `f` (n x p) and its OLS fit on `xo`, per response.
pub fn dnl(f: &DMatrix<f64>, xo: &DMatrix<f64>) -> Result<DVector<f64>> {
    if f.nrows() != xo.nrows() {
        return Err(Error::Dimension("surface values and covariates differ in length".into()));
    }
    let coef = ols(xo, f)?;
    let resid = f - xo * coef;
    let n = f.nrows() as f64;
    Ok(DVector::from_fn(f.ncols(), |j, _| (resid.column(j).norm_squared() / n).sqrt()))
}

pub fn surface_loss(true_f: &[f64], mean_f: &[f64]) -> Result<f64> {
    if true_f.len() != mean_f.len() {
        return Err(Error::Dimension(format!(
            "surface loss: lengths {} and {} differ",
            true_f.len(),
            mean_f.len()
        )));
    }
    if true_f.is_empty() {
        return Err(Error::InvalidArgument("surface loss of empty vectors".into()));
    }
    Ok(true_f.iter().zip(mean_f).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / true_f.len() as f64)
}

/// Surface loss averaged over responses (columns).
pub fn surface_loss_matrix(true_f: &DMatrix<f64>, mean_f: &DMatrix<f64>) -> Result<f64> {
    if true_f.shape() != mean_f.shape() {
        return Err(Error::Dimension("surface loss: shapes differ".into()));
    }
    let mut total = 0.0;
    for j in 0..true_f.ncols() {
        total += surface_loss(true_f.column(j).as_slice(), mean_f.column(j).as_slice())?;
    }
    Ok(total / true_f.ncols().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "covariate")]
pub enum KnotKind {
    Surface,
    Additive(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lower: f64,
    pub upper: f64,
    pub bins: usize,
}

impl GridAxis {
    /// Cell index and whether the value fell outside the axis.
    fn locate(&self, v: f64) -> (usize, bool) {
        let t = (v - self.lower) / (self.upper - self.lower) * self.bins as f64;
        if !(t >= 0.0) {
            (0, true)
        } else if t >= self.bins as f64 {
            (self.bins - 1, v > self.upper)
        } else {
            (t as usize, false)
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = (self.upper - self.lower) / self.bins as f64;
        (0..self.bins).map(|i| self.lower + (i as f64 + 0.5) * w).collect()
    }
}

/// Knot counts over draws. Out-of-range knots land in the edge cells and are
/// also tallied in `out_of_bounds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub kind: KnotKind,
    /// Covariate index of each axis.
    pub covariates: Vec<usize>,
    pub axes: Vec<GridAxis>,
    /// Row-major over axes (first axis slowest).
    pub counts: Vec<u64>,
    pub out_of_bounds: u64,
}

impl HeatmapGrid {
    fn new(kind: KnotKind, covariates: Vec<usize>, axes: Vec<GridAxis>) -> Result<Self> {
        for a in &axes {
            if !(a.upper > a.lower) || a.bins == 0 {
                return Err(Error::InvalidArgument(format!(
                    "heat-map axis [{}, {}] with {} bins has no area",
                    a.lower, a.upper, a.bins
                )));
            }
        }
        let cells = axes.iter().map(|a| a.bins).product();
        Ok(Self {
            kind,
            covariates,
            axes,
            counts: vec![0; cells],
            out_of_bounds: 0,
        })
    }

    fn add(&mut self, coords: &[f64]) {
        let mut idx = 0;
        let mut outside = false;
        for (a, &v) in self.axes.iter().zip(coords) {
            let (c, o) = a.locate(v);
            idx = idx * a.bins + c;
            outside |= o;
        }
        self.counts[idx] += 1;
        self.out_of_bounds += u64::from(outside);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Comment header with kind and bounds, then one line per first-axis cell.
    pub fn to_csv(&self) -> String {
        let kind = match self.kind {
            KnotKind::Surface => "surface".to_string(),
            KnotKind::Additive(j) => format!("additive{j}"),
        };
        let mut s = format!("# kind={kind} out_of_bounds={}", self.out_of_bounds);
        for (a, c) in self.axes.iter().zip(&self.covariates) {
            s.push_str(&format!(" x{c}=[{},{}]:{}", a.lower, a.upper, a.bins));
        }
        s.push('\n');
        let row = self.axes.get(1).map_or(1, |a| a.bins);
        for chunk in self.counts.chunks(row) {
            let line: Vec<String> = chunk.iter().map(|c| c.to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Surface-knot grid over covariates `view` plus one 1-d grid per additive
/// covariate. `bounds` holds one range per covariate.
pub fn knot_heatmap(
    chain: &ChainOutput,
    bounds: &[(f64, f64)],
    resolution: usize,
    view: &[usize],
) -> Result<(HeatmapGrid, Vec<HeatmapGrid>)> {
    let layout = &chain.knot_layout;
    if bounds.len() != layout.dim {
        return Err(Error::Dimension(format!(
            "{} bounds for {} covariates",
            bounds.len(),
            layout.dim
        )));
    }
    if view.is_empty() || view.iter().any(|&c| c >= layout.dim) {
        return Err(Error::InvalidArgument("heat-map view must name existing covariates".into()));
    }
    let axis = |c: usize| GridAxis {
        lower: bounds[c].0,
        upper: bounds[c].1,
        bins: resolution,
    };
    let mut surface = HeatmapGrid::new(KnotKind::Surface, view.to_vec(), view.iter().map(|&c| axis(c)).collect())?;
    let mut additive = (0..layout.dim)
        .map(|j| HeatmapGrid::new(KnotKind::Additive(j), vec![j], vec![axis(j)]))
        .collect::<Result<Vec<_>>>()?;
    let mut coords = vec![0.0; view.len()];
    for i in 0..chain.draws.len() {
        let knots = draw_knots(chain, i)?;
        for k in 0..knots.surface.nrows() {
            for (slot, &c) in coords.iter_mut().zip(view) {
                *slot = knots.surface[(k, c)];
            }
            surface.add(&coords);
        }
        for (j, ks) in knots.additive.iter().enumerate() {
            for &kappa in ks {
                additive[j].add(&[kappa]);
            }
        }
    }
    Ok((surface, additive))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSurface {
    /// points x p
    pub mean: DMatrix<f64>,
    pub sd: DMatrix<f64>,
}

/// Mean and sd across draws of the fitted value `x(point)' B` at each point.
pub fn posterior_surface(chain: &ChainOutput, points: &DMatrix<f64>) -> Result<PosteriorSurface> {
    let m = chain.draws.len();
    if m == 0 {
        return Err(Error::InvalidArgument("chain has no draws".into()));
    }
    let fitted: Vec<DMatrix<f64>> = (0..m)
        .into_par_iter()
        .map(|i| fitted_surface(points, &draw_knots(chain, i)?, &chain.draws[i].b))
        .collect::<Result<_>>()?;
    let mut mean = DMatrix::zeros(fitted[0].nrows(), fitted[0].ncols());
    for f in &fitted {
        mean += f;
    }
    mean /= m as f64;
    let mut var = DMatrix::zeros(mean.nrows(), mean.ncols());
    for f in &fitted {
        var += (f - &mean).map(|v| v * v);
    }
    var /= m as f64;
    Ok(PosteriorSurface {
        mean,
        sd: var.map(f64::sqrt),
    })
}

/// Regular grid over covariates `view` (others held at `fill`), first axis slowest.
pub fn grid_points(bounds: &[(f64, f64)], resolution: usize, view: &[usize], fill: &[f64]) -> DMatrix<f64> {
    let axes: Vec<Vec<f64>> = view
        .iter()
        .map(|&c| {
            GridAxis {
                lower: bounds[c].0,
                upper: bounds[c].1,
                bins: resolution,
            }
            .centers()
        })
        .collect();
    let total = resolution.pow(view.len() as u32);
    let mut pts = DMatrix::zeros(total, fill.len());
    for row in 0..total {
        for (j, &f) in fill.iter().enumerate() {
            pts[(row, j)] = f;
        }
        let mut rem = row;
        for (a, &c) in view.iter().enumerate().rev() {
            pts[(row, c)] = axes[a][rem % resolution];
            rem /= resolution;
        }
    }
    pts
}
