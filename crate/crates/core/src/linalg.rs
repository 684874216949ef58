//! Dense linear-algebra and distribution helpers shared by the posterior and
//! sampler modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub type Chol = Cholesky<f64, Dyn>;

/// Cholesky factorisation with the jitter ladder used throughout the crate:
/// plain, then `1e-10` and `1e-6` times the mean diagonal added to the
/// diagonal. Fails after the second jitter attempt.
pub fn cholesky_jitter(m: &DMatrix<f64>, what: &str) -> Result<Chol> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("{what}: matrix is not square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: matrix has non-finite entries")));
    }
    if m.nrows() == 0 {
        return Cholesky::new(m.clone())
            .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()));
    }
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok(ch);
    }
    let mean_diag = (m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / m.nrows() as f64).max(1e-300);
    for rel in [1e-10, 1e-6] {
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += rel * mean_diag;
        }
        if let Some(ch) = Cholesky::new(jittered) {
            return Ok(ch);
        }
    }
    Err(Error::NotPositiveDefinite(what.to_string()))
}

pub fn ln_det_chol(ch: &Chol) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let ch = cholesky_jitter(m, what)?;
    let mut inv = ch.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Log of the multivariate gamma function Γ_p(a).
pub fn ln_mvgamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    let mut acc = pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 1..=p {
        acc += ln_gamma(a + (1.0 - j as f64) / 2.0);
    }
    acc
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, k: usize) -> DVector<f64> {
    DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Multivariate normal log density given the Cholesky factor of the covariance.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov_chol: &Chol) -> f64 {
    let k = x.len() as f64;
    let diff = x - mean;
    let z = cov_chol.l_dirty().solve_lower_triangular(&diff).expect("triangular solve");
    -0.5 * k * (2.0 * std::f64::consts::PI).ln() - 0.5 * ln_det_chol(cov_chol) - 0.5 * z.norm_squared()
}

/// Multivariate Student-t parameterised by its *covariance* (not its scale
/// matrix); requires `df > 2`. The scale matrix is `cov * (df - 2) / df`.
#[derive(Debug, Clone)]
pub struct MultivariateT {
    mean: DVector<f64>,
    scale_chol: Chol,
    df: f64,
}

impl MultivariateT {
    pub fn with_covariance(mean: DVector<f64>, cov: &DMatrix<f64>, df: f64) -> Result<Self> {
        if !(df > 2.0) {
            return Err(Error::InvalidArgument(format!(
                "t proposal needs more than 2 degrees of freedom, got {df}"
            )));
        }
        if cov.nrows() != mean.len() {
            return Err(Error::Dimension("t covariance does not match mean".into()));
        }
        let scale = cov * ((df - 2.0) / df);
        let scale_chol = cholesky_jitter(&scale, "t proposal scale")?;
        Ok(Self {
            mean,
            scale_chol,
            df,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let k = self.mean.len();
        let z = standard_normal_vector(rng, k);
        let w: f64 = ChiSquared::new(self.df).expect("df > 0").sample(rng);
        let mix = (self.df / w).sqrt();
        &self.mean + self.scale_chol.l_dirty().lower_triangle() * z * mix
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let k = self.mean.len() as f64;
        let diff = x - &self.mean;
        let z = self
            .scale_chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("triangular solve");
        let maha = z.norm_squared();
        ln_gamma((self.df + k) / 2.0)
            - ln_gamma(self.df / 2.0)
            - 0.5 * k * (self.df * std::f64::consts::PI).ln()
            - 0.5 * ln_det_chol(&self.scale_chol)
            - 0.5 * (self.df + k) * (1.0 + maha / self.df).ln()
    }
}

/// Draw from IW(scale, df) with density ∝ |Σ|^{-(df+p+1)/2} exp(-tr(scale Σ⁻¹)/2),
/// using the Bartlett decomposition of the matching Wishart(scale⁻¹, df).
pub fn inverse_wishart_sample<R: Rng + ?Sized>(
    rng: &mut R,
    scale: &DMatrix<f64>,
    df: f64,
) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if df <= (p as f64) - 1.0 {
        return Err(Error::InvalidArgument(format!(
            "inverse Wishart needs df > p - 1 (df = {df}, p = {p})"
        )));
    }
    let scale_inv = spd_inverse(scale, "inverse Wishart scale")?;
    let l = cholesky_jitter(&scale_inv, "inverse Wishart scale inverse")?.l();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi: f64 = ChiSquared::new(df - i as f64).expect("positive df").sample(rng);
        a[(i, i)] = chi.sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    let wishart = &la * la.transpose();
    spd_inverse(&wishart, "Wishart draw")
}

pub fn inverse_wishart_log_density(sigma: &DMatrix<f64>, scale: &DMatrix<f64>, df: f64) -> Result<f64> {
    let p = sigma.nrows();
    let pf = p as f64;
    let sig_chol = cholesky_jitter(sigma, "inverse Wishart argument")?;
    let scale_chol = cholesky_jitter(scale, "inverse Wishart scale")?;
    let sig_inv = sig_chol.inverse();
    let trace = (scale * sig_inv).trace();
    Ok(0.5 * df * ln_det_chol(&scale_chol)
        - 0.5 * df * pf * std::f64::consts::LN_2
        - ln_mvgamma(p, df / 2.0)
        - 0.5 * (df + pf + 1.0) * ln_det_chol(&sig_chol)
        - 0.5 * trace)
}

/// Symmetric eigen-clipping: returns a matrix whose eigenvalues are all at
/// most `-floor`.
pub fn clip_negative_definite(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    if sym.nrows() == 0 {
        return sym;
    }
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|v| v.min(-floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

/// Column-major reshape of a vector into an `rows x cols` matrix.
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}

pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}
