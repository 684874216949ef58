//! Thin-plate design matrices and their derivatives with respect to knots.
//!
//! Covariate matrices passed here always carry the intercept in column 0.
//! Distances are taken over the remaining `d = q_o - 1` columns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataprep::Dataset;
use crate::error::{Error, Result};

/// Knot counts of a model. `additive[j]` is the number of knots on
/// covariate `j` (0-based, intercept excluded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnotLayout {
    pub dim: usize,
    pub surface: usize,
    pub additive: Vec<usize>,
}

impl KnotLayout {
    pub fn new(dim: usize, surface: usize, additive: Vec<usize>) -> Result<Self> {
        if additive.len() != dim {
            return Err(Error::Dimension(format!(
                "additive knot counts given for {} covariates, data has {dim}",
                additive.len()
            )));
        }
        Ok(Self { dim, surface, additive })
    }

    /// Same additive count on every covariate.
    pub fn uniform(dim: usize, surface: usize, additive_per_covariate: usize) -> Self {
        Self {
            dim,
            surface,
            additive: vec![additive_per_covariate; dim],
        }
    }

    pub fn q_s(&self) -> usize {
        self.surface
    }

    pub fn q_a(&self) -> usize {
        self.additive.iter().sum()
    }

    /// Number of surface knot coordinates.
    pub fn l_s(&self) -> usize {
        self.surface * self.dim
    }

    pub fn l_a(&self) -> usize {
        self.q_a()
    }

    pub fn len(&self) -> usize {
        self.l_s() + self.l_a()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat-vector ranges of each knot: one range per surface knot followed by
    /// one single-element range per additive knot.
    pub fn knot_blocks(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.surface + self.q_a());
        for k in 0..self.surface {
            out.push(k * self.dim..(k + 1) * self.dim);
        }
        let base = self.l_s();
        for j in 0..self.q_a() {
            out.push(base + j..base + j + 1);
        }
        out
    }
}

/// Knot locations. Surface knots are the rows of `surface` (k_s x d);
/// `additive[j]` holds the scalar knots on covariate `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    pub surface: DMatrix<f64>,
    pub additive: Vec<Vec<f64>>,
}

impl KnotSet {
    pub fn new(surface: DMatrix<f64>, additive: Vec<Vec<f64>>) -> Result<Self> {
        if !surface.is_empty() && surface.ncols() != additive.len() {
            return Err(Error::Dimension(format!(
                "surface knots have dimension {}, additive knots cover {} covariates",
                surface.ncols(),
                additive.len()
            )));
        }
        let ks = Self { surface, additive };
        ks.check_finite()?;
        Ok(ks)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            surface: DMatrix::zeros(0, dim),
            additive: vec![Vec::new(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.additive.len()
    }

    pub fn layout(&self) -> KnotLayout {
        KnotLayout {
            dim: self.dim(),
            surface: self.surface.nrows(),
            additive: self.additive.iter().map(Vec::len).collect(),
        }
    }

    fn check_finite(&self) -> Result<()> {
        let all_finite =
            self.surface.iter().all(|v| v.is_finite()) && self.additive.iter().flatten().all(|v| v.is_finite());
        if all_finite {
            Ok(())
        } else {
            Err(Error::NonFinite("knot coordinates".into()))
        }
    }

    /// Surface knots knot-major (`vec ξ_sᵀ`), then additive knots grouped by
    /// covariate.
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.layout().len());
        for k in 0..self.surface.nrows() {
            out.extend(self.surface.row(k).iter());
        }
        for a in &self.additive {
            out.extend(a.iter());
        }
        DVector::from_vec(out)
    }

    pub fn from_flat(layout: &KnotLayout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "flat knot vector has length {}, layout needs {}",
                flat.len(),
                layout.len()
            )));
        }
        let surface = DMatrix::from_row_slice(layout.surface, layout.dim, &flat[..layout.l_s()]);
        let mut additive = Vec::with_capacity(layout.dim);
        let mut pos = layout.l_s();
        for &cnt in &layout.additive {
            additive.push(flat[pos..pos + cnt].to_vec());
            pos += cnt;
        }
        let ks = Self { surface, additive };
        ks.check_finite()?;
        Ok(ks)
    }
}

/// `r² ln r`, extended continuously by 0 at `r = 0`.
pub fn thinplate_radial(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// `(1 + 2 ln r)`, the factor in `∂φ/∂ξ = -(1 + 2 ln r)(x - ξ)`; the product
/// with `x - ξ` vanishes at `r = 0`, so 0 is returned there.
fn thinplate_slope_factor(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        1.0 + 2.0 * r.ln()
    }
}

pub fn thinplate_value(x: &[f64], xi: &[f64]) -> Result<f64> {
    if x.len() != xi.len() || x.is_empty() {
        return Err(Error::Dimension(format!(
            "point has dimension {}, knot has dimension {}",
            x.len(),
            xi.len()
        )));
    }
    if x.iter().chain(xi).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("thin-plate argument".into()));
    }
    let r2: f64 = x.iter().zip(xi).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(thinplate_radial(r2.sqrt()))
}

/// `X = [X_o, X_a, X_s]` with the component widths kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub q_o: usize,
    pub q_a: usize,
    pub q_s: usize,
}

impl DesignMatrix {
    pub fn q(&self) -> usize {
        self.q_o + self.q_a + self.q_s
    }

    pub fn x_o(&self) -> DMatrix<f64> {
        self.x.columns(0, self.q_o).into_owned()
    }

    pub fn x_a(&self) -> DMatrix<f64> {
        self.x.columns(self.q_o, self.q_a).into_owned()
    }

    pub fn x_s(&self) -> DMatrix<f64> {
        self.x.columns(self.q_o + self.q_a, self.q_s).into_owned()
    }
}

fn check_knot_dim(xo: &DMatrix<f64>, knots: &KnotSet) -> Result<usize> {
    if xo.ncols() == 0 {
        return Err(Error::Dimension("covariate matrix has no intercept column".into()));
    }
    let d = xo.ncols() - 1;
    if knots.dim() != d || (knots.surface.nrows() > 0 && knots.surface.ncols() != d) {
        return Err(Error::Dimension(format!(
            "knots live in dimension {}, covariates in dimension {d}",
            knots.dim()
        )));
    }
    Ok(d)
}

/// Design matrix for an arbitrary covariate matrix (intercept in column 0).
pub fn design_from_covariates(xo: &DMatrix<f64>, knots: &KnotSet) -> Result<DesignMatrix> {
    let d = check_knot_dim(xo, knots)?;
    let n = xo.nrows();
    let q_o = xo.ncols();
    let layout = knots.layout();
    let (q_a, q_s) = (layout.q_a(), layout.q_s());
    let mut x = DMatrix::zeros(n, q_o + q_a + q_s);
    x.columns_mut(0, q_o).copy_from(xo);
    let mut col = q_o;
    for (j, ks) in knots.additive.iter().enumerate() {
        for &kappa in ks {
            for i in 0..n {
                x[(i, col)] = thinplate_radial((xo[(i, j + 1)] - kappa).abs());
            }
            col += 1;
        }
    }
    for k in 0..q_s {
        for i in 0..n {
            let mut r2 = 0.0;
            for c in 0..d {
                let diff = xo[(i, c + 1)] - knots.surface[(k, c)];
                r2 += diff * diff;
            }
            x[(i, col)] = thinplate_radial(r2.sqrt());
        }
        col += 1;
    }
    Ok(DesignMatrix { x, q_o, q_a, q_s })
}

pub fn build_design(data: &Dataset, knots: &KnotSet) -> Result<DesignMatrix> {
    design_from_covariates(&data.xo, knots)
}

/// `∂vec X/∂θ'` for the flat knot vector `θ`. Knot coordinate `k` moves only
/// design column `columns[k]`, so the derivative is stored as that column's
/// derivative `values[:, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignGradient {
    pub values: DMatrix<f64>,
    pub columns: Vec<usize>,
    pub q: usize,
    pub l_s: usize,
}

impl DesignGradient {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// `dvec X` for coordinate `k` as a dense `nq` vector.
    pub fn dvec_column(&self, k: usize) -> DVector<f64> {
        let n = self.n();
        let mut out = DVector::zeros(n * self.q);
        out.rows_mut(self.columns[k] * n, n).copy_from(&self.values.column(k));
        out
    }

    /// The full `nq x l` Jacobian, zeros included.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n() * self.q, self.len());
        for k in 0..self.len() {
            out.set_column(k, &self.dvec_column(k));
        }
        out
    }
}

pub fn design_gradient_from_covariates(xo: &DMatrix<f64>, knots: &KnotSet) -> Result<DesignGradient> {
    let d = check_knot_dim(xo, knots)?;
    let n = xo.nrows();
    let q_o = xo.ncols();
    let layout = knots.layout();
    let (q_a, q_s) = (layout.q_a(), layout.q_s());
    let mut values = DMatrix::zeros(n, layout.len());
    let mut columns = Vec::with_capacity(layout.len());
    let surface_col0 = q_o + q_a;
    for k in 0..q_s {
        for i in 0..n {
            let mut r2 = 0.0;
            for c in 0..d {
                let diff = xo[(i, c + 1)] - knots.surface[(k, c)];
                r2 += diff * diff;
            }
            let f = thinplate_slope_factor(r2.sqrt());
            for c in 0..d {
                values[(i, k * d + c)] = -f * (xo[(i, c + 1)] - knots.surface[(k, c)]);
            }
        }
        columns.extend(std::iter::repeat_n(surface_col0 + k, d));
    }
    let mut flat = layout.l_s();
    let mut col = q_o;
    for (j, ks) in knots.additive.iter().enumerate() {
        for &kappa in ks {
            for i in 0..n {
                let diff = xo[(i, j + 1)] - kappa;
                values[(i, flat)] = -thinplate_slope_factor(diff.abs()) * diff;
            }
            columns.push(col);
            flat += 1;
            col += 1;
        }
    }
    Ok(DesignGradient {
        values,
        columns,
        q: q_o + q_a + q_s,
        l_s: layout.l_s(),
    })
}

pub fn design_gradient(data: &Dataset, knots: &KnotSet) -> Result<DesignGradient> {
    design_gradient_from_covariates(&data.xo, knots)
}
