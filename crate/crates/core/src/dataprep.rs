//! Datasets, standardisation, k-means knot placement, default priors and
//! fold partitioning.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::KnotLayout;
use crate::error::{Error, Result};
use crate::kernels::Component;
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    /// Apply to raw covariates (no intercept column).
    pub fn apply(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if raw.ncols() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "standardisation has {} columns, data has {}",
                self.mean.len(),
                raw.ncols()
            )));
        }
        Ok(DMatrix::from_fn(raw.nrows(), raw.ncols(), |i, j| (raw[(i, j)] - self.mean[j]) / self.sd[j]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// n x p responses.
    pub y: DMatrix<f64>,
    /// n x q_o covariates, intercept in column 0.
    pub xo: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub response_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    /// Builds a dataset from responses and covariates that already include the
    /// intercept column.
    pub fn new(y: DMatrix<f64>, xo: DMatrix<f64>) -> Result<Self> {
        if y.nrows() != xo.nrows() {
            return Err(Error::Dimension(format!(
                "{} response rows but {} covariate rows",
                y.nrows(),
                xo.nrows()
            )));
        }
        if y.ncols() == 0 || xo.ncols() == 0 {
            return Err(Error::Dimension("need at least one response and the intercept".into()));
        }
        if y.iter().chain(xo.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("data contain missing or non-finite values".into()));
        }
        if xo.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::InvalidArgument("first covariate column must be the intercept".into()));
        }
        let covariate_names = (1..xo.ncols()).map(|j| format!("x{j}")).collect();
        let response_names = (1..=y.ncols()).map(|j| format!("y{j}")).collect();
        Ok(Self {
            y,
            xo,
            covariate_names,
            response_names,
            standardization: None,
        })
    }

    /// Prepends the intercept to raw covariates, optionally standardising them.
    pub fn from_raw(y: DMatrix<f64>, covariates: &DMatrix<f64>, standardize: bool) -> Result<Self> {
        let (cov, record) = if standardize {
            let record = standardization_of(covariates)?;
            (record.apply(covariates)?, Some(record))
        } else {
            (covariates.clone(), None)
        };
        let mut ds = Self::new(y, with_intercept(&cov))?;
        ds.standardization = record;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn q_o(&self) -> usize {
        self.xo.ncols()
    }

    /// Covariate dimension without the intercept.
    pub fn dim(&self) -> usize {
        self.xo.ncols() - 1
    }

    /// The non-intercept covariates.
    pub fn covariates(&self) -> DMatrix<f64> {
        self.xo.columns(1, self.dim()).into_owned()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: self.y.select_rows(rows.iter()),
            xo: self.xo.select_rows(rows.iter()),
            covariate_names: self.covariate_names.clone(),
            response_names: self.response_names.clone(),
            standardization: self.standardization.clone(),
        }
    }
}

pub fn with_intercept(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let mut xo = DMatrix::from_element(cov.nrows(), cov.ncols() + 1, 1.0);
    xo.columns_mut(1, cov.ncols()).copy_from(cov);
    xo
}

/// Column means and sample standard deviations.
pub fn standardization_of(raw: &DMatrix<f64>) -> Result<Standardization> {
    let n = raw.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two rows to standardise".into()));
    }
    let mut mean = Vec::with_capacity(raw.ncols());
    let mut sd = Vec::with_capacity(raw.ncols());
    for j in 0..raw.ncols() {
        let col = raw.column(j);
        let m = col.mean();
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n as f64 - 1.0);
        if !(v > 0.0) {
            return Err(Error::InvalidArgument(format!("covariate column {j} is constant")));
        }
        mean.push(m);
        sd.push(v.sqrt());
    }
    Ok(Standardization { mean, sd })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    None,
    Logit,
}

pub fn logit(y: f64) -> Result<f64> {
    if !(y > 0.0 && y < 1.0) {
        return Err(Error::InvalidArgument(format!("logit needs responses in (0, 1), got {y}")));
    }
    Ok((y / (1.0 - y)).ln())
}

/// Reads a headed numeric CSV. Response columns are picked by name; every
/// other column is a covariate. Covariates are standardised.
pub fn load_csv(path: &Path, response_columns: &[String], transform: Transform) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse(format!("{}: {other:?}", path.display())),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut resp_idx = Vec::with_capacity(response_columns.len());
    for name in response_columns {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("{}: no column named '{name}'", path.display())))?;
        resp_idx.push(idx);
    }
    if resp_idx.is_empty() {
        return Err(Error::InvalidArgument("at least one response column is required".into()));
    }
    let cov_idx: Vec<usize> = (0..headers.len()).filter(|i| !resp_idx.contains(i)).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if rec.len() != headers.len() {
            return Err(Error::Parse(format!("{}: row {} has {} fields", path.display(), line + 2, rec.len())));
        }
        let mut row = Vec::with_capacity(rec.len());
        for (j, field) in rec.iter().enumerate() {
            if field.is_empty() {
                return Err(Error::Parse(format!(
                    "{}: missing value in row {}, column '{}'",
                    path.display(),
                    line + 2,
                    headers[j]
                )));
            }
            let v: f64 = field.parse().map_err(|_| {
                Error::Parse(format!("{}: non-numeric value '{field}' in row {}", path.display(), line + 2))
            })?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("{}: non-finite value in row {}", path.display(), line + 2)));
            }
            row.push(v);
        }
        rows.push(row);
    }
    let n = rows.len();
    let mut y = DMatrix::from_fn(n, resp_idx.len(), |i, j| rows[i][resp_idx[j]]);
    if transform == Transform::Logit {
        for v in y.iter_mut() {
            *v = logit(*v)?;
        }
    }
    let cov = DMatrix::from_fn(n, cov_idx.len(), |i, j| rows[i][cov_idx[j]]);
    let mut ds = Dataset::from_raw(y, &cov, true)?;
    ds.covariate_names = cov_idx.iter().map(|&i| headers[i].clone()).collect();
    ds.response_names = resp_idx.iter().map(|&i| headers[i].clone()).collect();
    Ok(ds)
}

/// Least-squares coefficients; fails when `x` is rank deficient.
pub fn ols(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = x.transpose() * x;
    let ch = gram
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("OLS gram matrix is rank deficient".into()))?;
    let coef = ch.solve(&(x.transpose() * y));
    // Cholesky can succeed on numerically singular grams; catch that here.
    if coef.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite("OLS gram matrix is rank deficient".into()));
    }
    Ok(coef)
}

fn sq_dist(points: &DMatrix<f64>, i: usize, center: &DMatrix<f64>, k: usize) -> f64 {
    (0..points.ncols()).map(|c| (points[(i, c)] - center[(k, c)]).powi(2)).sum()
}

fn distinct_rows(points: &DMatrix<f64>) -> usize {
    let mut rows: Vec<Vec<u64>> = (0..points.nrows())
        .map(|i| points.row(i).iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

fn assign(points: &DMatrix<f64>, centers: &DMatrix<f64>, labels: &mut [usize]) -> f64 {
    let mut objective = 0.0;
    for (i, label) in labels.iter_mut().enumerate() {
        let (best, dist) = (0..centers.nrows())
            .map(|k| (k, sq_dist(points, i, centers, k)))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        *label = best;
        objective += dist;
    }
    objective
}

/// Within-cluster sum of squares of a labelling.
pub fn kmeans_objective(points: &DMatrix<f64>, centers: &DMatrix<f64>) -> f64 {
    let mut labels = vec![0; points.nrows()];
    assign(points, centers, &mut labels)
}

fn kmeans_single<R: Rng>(points: &DMatrix<f64>, k: usize, rng: &mut R) -> (DMatrix<f64>, f64) {
    let (m, d) = (points.nrows(), points.ncols());
    // k-means++ seeding.
    let mut centers = DMatrix::zeros(k, d);
    let first = rng.random_range(0..m);
    centers.row_mut(0).copy_from(&points.row(first));
    let mut nearest: Vec<f64> = (0..m).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = m - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w && w > 0.0 {
                    idx = i;
                    break;
                }
                u -= w;
            }
            // Guard against landing on an existing center through rounding.
            if nearest[idx] == 0.0 {
                nearest.iter().enumerate().fold((0, -1.0), |a, (i, &w)| if w > a.1 { (i, w) } else { a }).0
            } else {
                idx
            }
        } else {
            rng.random_range(0..m)
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(sq_dist(points, i, &centers, c));
        }
    }
    // Lloyd iterations.
    let mut labels = vec![usize::MAX; m];
    let mut objective = assign(points, &centers, &mut labels);
    for _ in 0..300 {
        let mut sums = DMatrix::<f64>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for c in 0..d {
                sums[(l, c)] += points[(i, c)];
            }
        }
        for (l, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                for c in 0..d {
                    centers[(l, c)] = sums[(l, c)] / cnt as f64;
                }
            } else {
                // Re-seed an empty cluster at the point farthest from its center.
                let far = (0..m)
                    .map(|i| (i, sq_dist(points, i, &centers, labels[i])))
                    .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a })
                    .0;
                centers.row_mut(l).copy_from(&points.row(far));
            }
        }
        let mut new_labels = labels.clone();
        let new_objective = assign(points, &centers, &mut new_labels);
        let stable = new_labels == labels;
        labels = new_labels;
        objective = new_objective;
        if stable {
            break;
        }
    }
    (centers, objective)
}

pub const KMEANS_RESTARTS: u64 = 5;

/// k-means with k-means++ seeding and Lloyd updates, best of five restarts
/// (ties go to the lowest restart index).
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Ok(DMatrix::zeros(0, points.ncols()));
    }
    let distinct = distinct_rows(points);
    if k > distinct {
        return Err(Error::InvalidArgument(format!(
            "k-means asked for {k} centers but data have {distinct} distinct points"
        )));
    }
    let runs: Vec<(DMatrix<f64>, f64)> = (0..KMEANS_RESTARTS)
        .into_par_iter()
        .map(|r| kmeans_single(points, k, &mut stream_rng(seed, r)))
        .collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.1 < a.1 { b } else { a })
        .expect("at least one restart");
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PChoice {
    Gram,
    Identity,
}

/// All hyperparameters of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Prior mean matrices `M_o, M_a, M_s` (q_i x p).
    pub coef_mean: [DMatrix<f64>; 3],
    pub p_choice: [PChoice; 3],
    /// Normal prior on log λ; entry `comp * p + response`.
    pub log_lambda_mean: DVector<f64>,
    pub log_lambda_var: DVector<f64>,
    pub surface_knot_mean: DMatrix<f64>,
    pub surface_knot_cov: DMatrix<f64>,
    pub additive_knot_mean: Vec<Vec<f64>>,
    pub additive_knot_var: Vec<f64>,
    pub c2: f64,
    pub n0: f64,
    pub s0: DMatrix<f64>,
}

impl PriorSpec {
    pub fn knot_layout(&self) -> KnotLayout {
        KnotLayout {
            dim: self.additive_knot_mean.len(),
            surface: self.surface_knot_mean.nrows(),
            additive: self.additive_knot_mean.iter().map(Vec::len).collect(),
        }
    }

    pub fn p(&self) -> usize {
        self.s0.nrows()
    }

    pub fn coef_mean_of(&self, c: Component) -> &DMatrix<f64> {
        &self.coef_mean[c.index()]
    }

    /// Sets every entry of a component's prior mean to `value`.
    pub fn fill_coef_mean(&mut self, c: Component, value: f64) {
        self.coef_mean[c.index()].fill(value);
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        let layout = self.knot_layout();
        if self.n0 <= p as f64 - 1.0 {
            return Err(Error::Config(format!("n0 = {} must exceed p - 1", self.n0)));
        }
        if self.log_lambda_mean.len() != 3 * p || self.log_lambda_var.len() != 3 * p {
            return Err(Error::Config("log-lambda prior needs 3p entries".into()));
        }
        if self.log_lambda_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("log-lambda prior variances must be positive".into()));
        }
        if self.additive_knot_var.len() != layout.dim || self.additive_knot_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("additive knot prior variances must be positive".into()));
        }
        if self.surface_knot_cov.nrows() != layout.dim || self.surface_knot_cov.clone().cholesky().is_none() {
            return Err(Error::Config("surface knot prior covariance must be SPD".into()));
        }
        if self.s0.clone().cholesky().is_none() {
            return Err(Error::Config("S0 must be SPD".into()));
        }
        let widths = [None, Some(layout.q_a()), Some(layout.q_s())];
        for (m, w) in self.coef_mean.iter().zip(widths) {
            if m.ncols() != p || w.is_some_and(|w| m.nrows() != w) {
                return Err(Error::Config("coefficient prior mean has the wrong shape".into()));
            }
        }
        Ok(())
    }
}

/// Log-λ prior mean `ln n - 1.5 ln 2` and variance `ln 2`: the implied
/// log-normal has mean and standard deviation `n / 2`.
pub fn lambda_prior_moments(n: usize) -> (f64, f64) {
    let ln2 = std::f64::consts::LN_2;
    ((n as f64).ln() - 1.5 * ln2, ln2)
}

/// OLS residual covariance `E'E / n`, jittered by `1e-8 I` when degenerate.
pub fn residual_covariance(data: &Dataset) -> Result<DMatrix<f64>> {
    let coef = ols(&data.xo, &data.y)?;
    let resid = &data.y - &data.xo * coef;
    let mut s0 = resid.transpose() * &resid / data.n() as f64;
    let eig_min = SymmetricEigen::new(s0.clone()).eigenvalues.min();
    let y_scale = {
        let centered = &data.y - DMatrix::from_fn(data.n(), data.p(), |_, j| data.y.column(j).mean());
        (centered.norm_squared() / (data.n() * data.p()) as f64).max(1e-300)
    };
    if eig_min <= 1e-12 * y_scale {
        log::warn!("OLS residual covariance is degenerate; adding 1e-8 I to S0");
        for i in 0..s0.nrows() {
            s0[(i, i)] += 1e-8;
        }
    }
    Ok(s0)
}

/// Default hyperparameters for the given knot counts.
pub fn default_prior(data: &Dataset, layout: &KnotLayout, seed: u64) -> Result<PriorSpec> {
    let (n, p, d) = (data.n(), data.p(), data.dim());
    if layout.dim != d {
        return Err(Error::Dimension(format!(
            "knot layout has dimension {}, data have {d} covariates",
            layout.dim
        )));
    }
    let s0 = residual_covariance(data)?;
    let c2 = n as f64;
    let cov = data.covariates();
    let surface_knot_mean = kmeans(&cov, layout.surface, seed)?;
    let surface_knot_cov = if d > 0 {
        let gram = cov.transpose() * &cov;
        let inv = gram
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("covariate gram matrix is rank deficient".into()))?
            .inverse();
        inv * c2
    } else {
        DMatrix::zeros(0, 0)
    };
    let mut additive_knot_mean = Vec::with_capacity(d);
    let mut additive_knot_var = Vec::with_capacity(d);
    for j in 0..d {
        let col = cov.columns(j, 1).into_owned();
        let centers = kmeans(&col, layout.additive[j], derive_seed(seed, j as u64 + 1))?;
        let mut m: Vec<f64> = centers.iter().copied().collect();
        m.sort_by(f64::total_cmp);
        additive_knot_mean.push(m);
        additive_knot_var.push(c2 / col.norm_squared());
    }
    let (lm, lv) = lambda_prior_moments(n);
    let prior = PriorSpec {
        coef_mean: [
            DMatrix::zeros(data.q_o(), p),
            DMatrix::zeros(layout.q_a(), p),
            DMatrix::zeros(layout.q_s(), p),
        ],
        p_choice: [PChoice::Gram, PChoice::Identity, PChoice::Identity],
        log_lambda_mean: DVector::from_element(3 * p, lm),
        log_lambda_var: DVector::from_element(3 * p, lv),
        surface_knot_mean,
        surface_knot_cov,
        additive_knot_mean,
        additive_knot_var,
        c2,
        n0: 10.0,
        s0,
    };
    prior.validate()?;
    Ok(prior)
}

/// Strided partition: observation `i` goes to fold `i mod D`.
pub fn partition_folds(n: usize, folds: usize) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!("fold count {folds} must lie in [2, {n}]")));
    }
    let mut out = vec![Vec::with_capacity(n / folds + 1); folds];
    for i in 0..n {
        out[i % folds].push(i);
    }
    Ok(out)
}

/// Contiguous partition, available as a config override.
pub fn partition_folds_contiguous(n: usize, folds: usize) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!("fold count {folds} must lie in [2, {n}]")));
    }
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        out.push((start..start + len).collect());
        start += len;
    }
    Ok(out)
}
