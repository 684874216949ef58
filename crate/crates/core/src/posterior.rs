//! Conditional posterior of the coefficients, the marginal posterior of
//! (ξ, λ, Σ) with B integrated out, and its gradients.
//!
//! Coefficient vectors use `β = vec B` (index `response * q + row`) unless
//! noted; `b` denotes the component-stacked order `[vec B_o; vec B_a; vec B_s]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::basis::{design_from_covariates, design_gradient_from_covariates, DesignMatrix, KnotLayout, KnotSet};
use crate::dataprep::{Dataset, PChoice, PriorSpec};
use crate::error::{Error, Result};
use crate::kernels::{
    beta_reorder_map, commutation_index, component_slice_index, khatri_rao_block, BlockMatrix, Component,
    ComponentLayout, IndexMap,
};
use crate::linalg::{
    clip_negative_definite, cholesky_jitter, ln_det_chol, ln_mvgamma, spd_inverse, standard_normal_vector,
    symmetrize, unvec, vec_of, Chol,
};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// The sampled quantities: knots, log shrinkages (entry `comp * p + j`) and Σ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub knots: KnotSet,
    pub log_lambda: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Per-component prior pieces at a given state.
#[derive(Debug, Clone)]
pub struct ComponentBlock {
    pub width: usize,
    /// `P_i`, its inverse and log determinant.
    pub p_mat: DMatrix<f64>,
    pub p_inv: DMatrix<f64>,
    pub log_det_p: f64,
    /// `Λ_i^{-1/2}` diagonal.
    pub lam_inv_sqrt: DVector<f64>,
    /// `M_i = Λ_i^{-1/2} Σ⁻¹ Λ_i^{-1/2}`.
    pub m_mat: DMatrix<f64>,
    /// Whether `P_i` is a gram matrix that moves with the knots.
    pub knot_dependent: bool,
}

#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub design: DesignMatrix,
    pub sigma_inv: DMatrix<f64>,
    pub log_det_sigma: f64,
    pub blocks: [ComponentBlock; 3],
    /// Prior covariance `Σ_β` and precision `Σ_β⁻¹`.
    pub sigma_beta: DMatrix<f64>,
    pub precision_beta: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub beta_tilde: DVector<f64>,
    pub sigma_beta_tilde: DMatrix<f64>,
    pub posterior_chol: Chol,
    pub b_tilde: DMatrix<f64>,
    pub residuals: DMatrix<f64>,
    /// `Ẽ'Ẽ / n`.
    pub s_tilde: DMatrix<f64>,
    pub log_det_sigma_beta: f64,
    pub log_det_sigma_beta_tilde: f64,
    pub log_knot_prior: f64,
    pub log_lambda_prior: f64,
    pub log_marginal: f64,
}

impl PosteriorMoments {
    /// One draw of `B` (q x p) from `N(β̃, Σ_β̃)`.
    pub fn sample_b<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let z = standard_normal_vector(rng, self.beta_tilde.len());
        // A = LL', Σ_β̃ = A⁻¹, so L'⁻¹ z has covariance Σ_β̃.
        let x = self
            .posterior_chol
            .l_dirty()
            .lower_triangle()
            .transpose()
            .solve_upper_triangular(&z)
            .expect("triangular solve");
        let beta = &self.beta_tilde + x;
        unvec(beta.as_slice(), self.design.q(), self.sigma_inv.nrows())
    }
}

/// Gaussian prior on a flat vector with block-diagonal precision.
#[derive(Debug, Clone)]
struct GaussianPrior {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianPrior {
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        self.log_norm - 0.5 * diff.dot(&(&self.precision * &diff))
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.precision * (x - &self.mean))
    }

    fn hessian(&self) -> DMatrix<f64> {
        -&self.precision
    }
}

/// Data, prior and the cached pieces that do not depend on the state.
#[derive(Debug, Clone)]
pub struct Model {
    pub data: Dataset,
    pub prior: PriorSpec,
    pub layout: ComponentLayout,
    pub knot_layout: KnotLayout,
    beta_map: IndexMap,
    log_c: f64,
    n0_s0: DMatrix<f64>,
    knot_prior: GaussianPrior,
    lambda_prior: GaussianPrior,
    xo_gram: DMatrix<f64>,
}

impl Model {
    pub fn new(data: Dataset, prior: PriorSpec) -> Result<Self> {
        prior.validate()?;
        let (n, p) = (data.n(), data.p());
        if prior.p() != p {
            return Err(Error::Dimension(format!("prior is for {} responses, data have {p}", prior.p())));
        }
        let knot_layout = prior.knot_layout();
        if knot_layout.dim != data.dim() {
            return Err(Error::Dimension(format!(
                "knot prior has dimension {}, data have {} covariates",
                knot_layout.dim,
                data.dim()
            )));
        }
        if prior.coef_mean[0].nrows() != data.q_o() {
            return Err(Error::Dimension("linear prior mean has the wrong number of rows".into()));
        }
        let layout = ComponentLayout::new(p, data.q_o(), knot_layout.q_a(), knot_layout.q_s());
        if layout.q() >= n {
            log::warn!("model has q = {} columns for n = {n} observations", layout.q());
        }
        let beta_map = beta_reorder_map(p, layout.q_o, layout.q_a, layout.q_s)?;
        let n0_s0 = &prior.s0 * prior.n0;
        let pf = p as f64;
        let log_c = -0.5 * (n as f64) * pf * LN_2PI + 0.5 * prior.n0 * ln_det_chol(&cholesky_jitter(&n0_s0, "n0 S0")?)
            - 0.5 * prior.n0 * pf * std::f64::consts::LN_2
            - ln_mvgamma(p, prior.n0 / 2.0);

        // Knot prior precision, block diagonal in the flat knot order.
        let l = knot_layout.len();
        let d = knot_layout.dim;
        let mut precision = DMatrix::zeros(l, l);
        let mut log_norm = 0.0;
        if knot_layout.surface > 0 {
            let cov_chol = cholesky_jitter(&prior.surface_knot_cov, "surface knot prior covariance")?;
            let prec = spd_inverse(&prior.surface_knot_cov, "surface knot prior covariance")?;
            for k in 0..knot_layout.surface {
                precision.view_mut((k * d, k * d), (d, d)).copy_from(&prec);
                log_norm += -0.5 * d as f64 * LN_2PI - 0.5 * ln_det_chol(&cov_chol);
            }
        }
        let mut pos = knot_layout.l_s();
        for (j, &cnt) in knot_layout.additive.iter().enumerate() {
            let v = prior.additive_knot_var[j];
            for _ in 0..cnt {
                precision[(pos, pos)] = 1.0 / v;
                log_norm += -0.5 * (LN_2PI + v.ln());
                pos += 1;
            }
        }
        let knot_mean = KnotSet {
            surface: prior.surface_knot_mean.clone(),
            additive: prior.additive_knot_mean.clone(),
        }
        .flatten();
        let knot_prior = GaussianPrior {
            mean: knot_mean,
            precision,
            log_norm,
        };
        let lambda_prior = GaussianPrior {
            mean: prior.log_lambda_mean.clone(),
            precision: DMatrix::from_diagonal(&prior.log_lambda_var.map(|v| 1.0 / v)),
            log_norm: prior.log_lambda_var.iter().map(|v| -0.5 * (LN_2PI + v.ln())).sum(),
        };
        let xo_gram = data.xo.transpose() * &data.xo;
        Ok(Self {
            data,
            prior,
            layout,
            knot_layout,
            beta_map,
            log_c,
            n0_s0,
            knot_prior,
            lambda_prior,
            xo_gram,
        })
    }

    pub fn log_normalizing_constant(&self) -> f64 {
        self.log_c
    }

    pub fn p(&self) -> usize {
        self.layout.p
    }

    pub fn q(&self) -> usize {
        self.layout.q()
    }

    /// Knots at the prior means, log λ at its prior mean, Σ = S_0.
    pub fn initial_state(&self) -> ModelState {
        ModelState {
            knots: KnotSet {
                surface: self.prior.surface_knot_mean.clone(),
                additive: self.prior.additive_knot_mean.clone(),
            },
            log_lambda: self.prior.log_lambda_mean.clone(),
            sigma: self.prior.s0.clone(),
        }
    }

    pub fn knot_log_prior(&self, theta: &DVector<f64>) -> f64 {
        self.knot_prior.log_density(theta)
    }

    pub fn knot_prior_gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.knot_prior.gradient(theta)
    }

    pub fn knot_prior_hessian(&self) -> DMatrix<f64> {
        self.knot_prior.hessian()
    }

    pub fn lambda_log_prior(&self, t: &DVector<f64>) -> f64 {
        self.lambda_prior.log_density(t)
    }

    pub fn lambda_prior_gradient(&self, t: &DVector<f64>) -> DVector<f64> {
        self.lambda_prior.gradient(t)
    }

    pub fn lambda_prior_hessian(&self) -> DMatrix<f64> {
        self.lambda_prior.hessian()
    }

    fn check_state(&self, state: &ModelState) -> Result<()> {
        if state.knots.layout() != self.knot_layout {
            return Err(Error::Dimension("state knots do not match the model's knot layout".into()));
        }
        let p = self.p();
        if state.log_lambda.len() != 3 * p {
            return Err(Error::Dimension(format!("log lambda has length {}, need {}", state.log_lambda.len(), 3 * p)));
        }
        if state.sigma.shape() != (p, p) {
            return Err(Error::Dimension("Sigma has the wrong shape".into()));
        }
        if state.log_lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log lambda".into()));
        }
        Ok(())
    }

    fn component_block(
        &self,
        comp: Component,
        design: &DesignMatrix,
        sigma_inv: &DMatrix<f64>,
        log_lambda: &DVector<f64>,
    ) -> Result<ComponentBlock> {
        let p = self.p();
        let width = self.layout.width(comp);
        let choice = self.prior.p_choice[comp.index()];
        let p_mat = match (choice, comp) {
            (PChoice::Identity, _) => DMatrix::identity(width, width),
            (PChoice::Gram, Component::Linear) => self.xo_gram.clone(),
            (PChoice::Gram, _) => {
                let xi = design.x.columns(self.layout.column_offset(comp), width);
                xi.transpose() * xi
            }
        };
        let (p_inv, log_det_p) = if width > 0 {
            let ch = cholesky_jitter(&p_mat, "coefficient prior P")?;
            let mut inv = ch.inverse();
            symmetrize(&mut inv);
            (inv, ln_det_chol(&ch))
        } else {
            (DMatrix::zeros(0, 0), 0.0)
        };
        let lam_inv_sqrt = DVector::from_fn(p, |j, _| (-0.5 * log_lambda[comp.index() * p + j]).exp());
        let m_mat = DMatrix::from_fn(p, p, |a, b| lam_inv_sqrt[a] * sigma_inv[(a, b)] * lam_inv_sqrt[b]);
        Ok(ComponentBlock {
            width,
            p_mat,
            p_inv,
            log_det_p,
            lam_inv_sqrt,
            m_mat,
            knot_dependent: choice == PChoice::Gram && comp != Component::Linear,
        })
    }

    /// Conditional posterior moments of β and the log marginal posterior.
    pub fn moments(&self, state: &ModelState) -> Result<PosteriorMoments> {
        self.check_state(state)?;
        let (n, p, q) = (self.data.n(), self.p(), self.q());
        let design = design_from_covariates(&self.data.xo, &state.knots)?;
        let sigma_chol = cholesky_jitter(&state.sigma, "Sigma")?;
        let log_det_sigma = ln_det_chol(&sigma_chol);
        let mut sigma_inv = sigma_chol.inverse();
        symmetrize(&mut sigma_inv);

        let blocks = [
            self.component_block(Component::Linear, &design, &sigma_inv, &state.log_lambda)?,
            self.component_block(Component::Additive, &design, &sigma_inv, &state.log_lambda)?,
            self.component_block(Component::Surface, &design, &sigma_inv, &state.log_lambda)?,
        ];

        // Σ_b = (Λ^{1/2} Σ Λ^{1/2}) ⊛ P⁻¹ and its inverse M ⊛ P, both blockwise.
        let cov_blocks = BlockMatrix::new(
            blocks
                .iter()
                .map(|b| {
                    DMatrix::from_fn(p, p, |r, s| state.sigma[(r, s)] / (b.lam_inv_sqrt[r] * b.lam_inv_sqrt[s]))
                })
                .collect(),
        );
        let pinv_blocks = BlockMatrix::new(blocks.iter().map(|b| b.p_inv.clone()).collect());
        let m_blocks = BlockMatrix::new(blocks.iter().map(|b| b.m_mat.clone()).collect());
        let p_blocks = BlockMatrix::new(blocks.iter().map(|b| b.p_mat.clone()).collect());
        let c = &self.beta_map;
        let sigma_beta = {
            let sb = khatri_rao_block(&cov_blocks, &pinv_blocks)?;
            c.gather_cols(&c.gather_rows(&sb))
        };
        let precision_beta = {
            let qb = khatri_rao_block(&m_blocks, &p_blocks)?;
            c.gather_cols(&c.gather_rows(&qb))
        };
        let mu_b: Vec<f64> = self.prior.coef_mean.iter().flat_map(|m| m.iter().copied()).collect();
        let mu = DVector::from_vec(c.gather_vec(&mu_b));

        let x = &design.x;
        let xtx = x.transpose() * x;
        let mut a = sigma_inv.kronecker(&xtx) + &precision_beta;
        symmetrize(&mut a);
        let posterior_chol = cholesky_jitter(&a, "posterior precision of beta")?;
        let mut sigma_beta_tilde = posterior_chol.inverse();
        symmetrize(&mut sigma_beta_tilde);
        let rhs = vec_of(&(x.transpose() * &self.data.y * &sigma_inv)) + &precision_beta * &mu;
        let beta_tilde = posterior_chol.solve(&rhs);
        let b_tilde = unvec(beta_tilde.as_slice(), q, p);
        let residuals = &self.data.y - x * &b_tilde;
        let ete = residuals.transpose() * &residuals;
        let s_tilde = &ete / n as f64;

        let log_det_sigma_beta: f64 = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let t_sum: f64 = (0..p).map(|j| state.log_lambda[i * p + j]).sum();
                b.width as f64 * (log_det_sigma + t_sum) - p as f64 * b.log_det_p
            })
            .sum();
        let log_det_sigma_beta_tilde = -ln_det_chol(&posterior_chol);
        let diff = &beta_tilde - &mu;
        let quad = diff.dot(&(&precision_beta * &diff));
        let trace = (&sigma_inv * (&self.n0_s0 + &ete)).trace();
        let log_knot_prior = self.knot_prior.log_density(&state.knots.flatten());
        let log_lambda_prior = self.lambda_prior.log_density(&state.log_lambda);
        let log_marginal = log_knot_prior + log_lambda_prior + self.log_c - 0.5 * log_det_sigma_beta
            + 0.5 * log_det_sigma_beta_tilde
            - 0.5 * (n as f64 + self.prior.n0 + p as f64 + 1.0) * log_det_sigma
            - 0.5 * (trace + quad);
        if !log_marginal.is_finite() {
            return Err(Error::NonFinite("log marginal posterior".into()));
        }
        Ok(PosteriorMoments {
            design,
            sigma_inv,
            log_det_sigma,
            blocks,
            sigma_beta,
            precision_beta,
            mu,
            beta_tilde,
            sigma_beta_tilde,
            posterior_chol,
            b_tilde,
            residuals,
            s_tilde,
            log_det_sigma_beta,
            log_det_sigma_beta_tilde,
            log_knot_prior,
            log_lambda_prior,
            log_marginal,
        })
    }

    pub fn log_marginal(&self, state: &ModelState) -> Result<f64> {
        Ok(self.moments(state)?.log_marginal)
    }

    /// Coefficient of `dvec Σ_β⁻¹` in the marginal-posterior differential,
    /// excluding the `½ log|Σ_β⁻¹|` term which is handled in closed form:
    /// the `dβ̃` path through `(β̃ - μ)'Q` and `Ẽ'X`, plus
    /// `-½ vec[(β̃-μ)(β̃-μ)' + Σ_β̃]`.
    fn precision_coefficient(&self, mom: &PosteriorMoments) -> DMatrix<f64> {
        let g_beta = self.explicit_beta_gradient(mom);
        let w = &mom.sigma_beta_tilde * g_beta;
        let diff = &mom.beta_tilde - &mom.mu;
        let mut c = &w * (-&diff).transpose();
        c -= (&diff * diff.transpose() + &mom.sigma_beta_tilde) * 0.5;
        c
    }

    /// `∂L/∂β̃` through the terms in which β̃ appears explicitly:
    /// `vec(X'ẼΣ⁻¹) - Q(β̃ - μ)`. Zero at the exact conditional mode.
    fn explicit_beta_gradient(&self, mom: &PosteriorMoments) -> DVector<f64> {
        let xt_e = mom.design.x.transpose() * &mom.residuals * &mom.sigma_inv;
        vec_of(&xt_e) - &mom.precision_beta * (&mom.beta_tilde - &mom.mu)
    }

    /// `vec(A ⊗ B)` from `vec A` and `vec B` for square `A` (p x p) and
    /// `B` (m x m): `(I_p ⊗ K_{m,p} ⊗ I_m)(vec A ⊗ vec B)`.
    fn vec_kron(perm: &IndexMap, vec_a: &[f64], vec_b: &[f64]) -> Vec<f64> {
        let stacked: Vec<f64> = vec_a.iter().flat_map(|&a| vec_b.iter().map(move |&b| a * b)).collect();
        perm.gather_vec(&stacked)
    }

    /// `dvec(X_i'X_i)` when only column `col` of `X_i` moves by `v`:
    /// `(I + K_{m,m})(I_m ⊗ X_i') dvec X_i`.
    fn gram_differential(xi: &DMatrix<f64>, col: usize, v: &DVector<f64>, kmm: &IndexMap) -> Vec<f64> {
        let m = xi.ncols();
        let mut u = vec![0.0; m * m];
        let xtv = xi.transpose() * v;
        for r in 0..m {
            u[col * m + r] = xtv[r];
        }
        let ut = kmm.gather_vec(&u);
        u.iter().zip(ut).map(|(a, b)| a + b).collect()
    }

    /// Gradient of the log marginal posterior with respect to the flat knot
    /// vector, assembled term by term.
    pub fn grad_knots(&self, state: &ModelState, mom: &PosteriorMoments) -> Result<DVector<f64>> {
        let theta = state.knots.flatten();
        let mut grad = self.knot_prior.gradient(&theta);
        if grad.is_empty() {
            return Ok(grad);
        }
        let dg = design_gradient_from_covariates(&self.data.xo, &state.knots)?;
        let (p, q) = (self.p(), self.q());
        let x = &mom.design.x;
        let y = &self.data.y;
        let vec_sigma_inv: Vec<f64> = mom.sigma_inv.iter().copied().collect();
        let kqq = commutation_index(q, q)?;
        let kpp = commutation_index(p, p)?;
        let kron_perm = IndexMap::kron_identity(p, &commutation_index(q, p)?, q);
        let g_beta = self.explicit_beta_gradient(mom);
        let vec_v: Vec<f64> = mom.sigma_beta_tilde.iter().copied().collect();
        // vec(Σ⁻¹)'(I + K_pp), shared by every coordinate.
        let sym_sigma_inv: Vec<f64> = {
            let t = kpp.gather_vec(&vec_sigma_inv);
            vec_sigma_inv.iter().zip(t).map(|(a, b)| a + b).collect()
        };
        let e_t = mom.residuals.transpose();

        // Pieces for the P_i-derivative terms; only gram blocks on knot
        // components contribute.
        let dep: Vec<Component> = Component::ALL
            .into_iter()
            .filter(|c| mom.blocks[c.index()].knot_dependent && self.layout.width(*c) > 0)
            .collect();
        let c_row = if dep.is_empty() {
            None
        } else {
            let cm = self.precision_coefficient(mom);
            Some(DMatrix::from_row_slice(1, cm.len(), cm.as_slice()))
        };

        for k in 0..dg.len() {
            let col = dg.columns[k];
            let v = dg.values.column(k).into_owned();
            // dvec(Σ⁻¹ ⊗ X'X) = (I_p ⊗ K_{q,p} ⊗ I_q)(vec Σ⁻¹ ⊗ I_{q²})(I + K_qq)(I_q ⊗ X') dvec X.
            let d_gram = Self::gram_differential(x, col, &v, &kqq);
            let d_a = Self::vec_kron(&kron_perm, &vec_sigma_inv, &d_gram);
            // T5, data part: -½ vec(Σ_β̃)' dvec(Σ⁻¹ ⊗ X'X).
            let t5: f64 = -0.5 * vec_v.iter().zip(&d_a).map(|(a, b)| a * b).sum::<f64>();
            // dβ̃ through X: Σ_β̃[(Σ⁻¹Y' ⊗ I_q) K_{n,q} dvec X - ((β̃' ⊗ I) dvec(Σ⁻¹ ⊗ X'X))].
            let mut rhs = DMatrix::<f64>::zeros(q, p);
            let ytv_sinv = (y.transpose() * &v).transpose() * &mom.sigma_inv;
            rhs.row_mut(col).copy_from(&ytv_sinv);
            let d_a_mat = DMatrix::from_column_slice(p * q, p * q, &d_a);
            let d_beta = &mom.sigma_beta_tilde * (vec_of(&rhs) - d_a_mat * &mom.beta_tilde);
            // T3 + T4 through dβ̃: [vec(X'ẼΣ⁻¹) - Q(β̃-μ)]' dβ̃.
            let t34 = g_beta.dot(&d_beta);
            // T4 through dX: ½ vec(Σ⁻¹)'(I + K_pp)(B̃' ⊗ Ẽ') dvec X.
            let et_dx_b = (&e_t * &v) * mom.b_tilde.row(col);
            let t4x: f64 = 0.5 * sym_sigma_inv.iter().zip(et_dx_b.iter()).map(|(a, b)| a * b).sum::<f64>();
            let mut total = t5 + t34 + t4x;

            if let Some(c_row) = &c_row {
                for &comp in &dep {
                    let off = self.layout.column_offset(comp);
                    let width = self.layout.width(comp);
                    if col < off || col >= off + width {
                        continue;
                    }
                    let blk = &mom.blocks[comp.index()];
                    let xi = x.columns(off, width).into_owned();
                    let kmm = commutation_index(width, width)?;
                    let d_p = Self::gram_differential(&xi, col - off, &v, &kmm);
                    // T2: (p/2) vec(P_i⁻¹)' dvec P_i.
                    let t2: f64 = 0.5 * p as f64 * blk.p_inv.iter().zip(&d_p).map(|(a, b)| a * b).sum::<f64>();
                    // dvec(M_i ⊗ P_i) for fixed M_i, contracted via the Lemma-1 slice.
                    let perm = IndexMap::kron_identity(p, &commutation_index(width, p)?, width);
                    let vec_m: Vec<f64> = blk.m_mat.iter().copied().collect();
                    let d_q = Self::vec_kron(&perm, &vec_m, &d_p);
                    let slice = component_slice_index(&self.layout, comp)?;
                    let c_i = slice.gather_vec(c_row.as_slice());
                    total += t2 + c_i.iter().zip(&d_q).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            grad[k] += total;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("knot gradient".into()));
        }
        Ok(grad)
    }

    /// Gradient of the log marginal posterior with respect to log λ.
    pub fn grad_log_lambda(&self, state: &ModelState, mom: &PosteriorMoments) -> Result<DVector<f64>> {
        let p = self.p();
        let mut grad = self.lambda_prior.gradient(&state.log_lambda);
        let cm = self.precision_coefficient(mom);
        let c_row = cm.as_slice();
        let kpp = commutation_index(p, p)?;
        for comp in Component::ALL {
            let width = self.layout.width(comp);
            if width == 0 {
                continue;
            }
            let blk = &mom.blocks[comp.index()];
            let c_i = component_slice_index(&self.layout, comp)?.gather_vec(c_row);
            let perm = IndexMap::kron_identity(p, &commutation_index(width, p)?, width);
            let vec_p: Vec<f64> = blk.p_mat.iter().copied().collect();
            let d_sinv = DMatrix::from_fn(p, p, |a, b| blk.lam_inv_sqrt[a] * mom.sigma_inv[(a, b)]);
            for j in 0..p {
                // dvec Λ^{-1/2}/dt_j has the single entry -½ λ_j^{-1/2} at (j, j).
                let mut d_lam = DMatrix::<f64>::zeros(p, p);
                d_lam[(j, j)] = -0.5 * blk.lam_inv_sqrt[j];
                // (I + K_pp)(I_p ⊗ Λ^{-1/2}Σ⁻¹) dvec Λ^{-1/2} = dvec M_i.
                let half: Vec<f64> = (&d_sinv * &d_lam).iter().copied().collect();
                let swapped = kpp.gather_vec(&half);
                let d_m: Vec<f64> = half.iter().zip(swapped).map(|(a, b)| a + b).collect();
                // (I_p ⊗ K_{q_i,p} ⊗ I_{q_i})(I_{p²} ⊗ vec P_i) dvec M_i = dvec(M_i ⊗ P_i).
                let d_q = Self::vec_kron(&perm, &d_m, &vec_p);
                let contraction: f64 = c_i.iter().zip(&d_q).map(|(a, b)| a * b).sum();
                // ½ d log|Σ_β⁻¹| = -q_i/2 on the log scale.
                grad[comp.index() * p + j] += contraction - 0.5 * width as f64;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("log-lambda gradient".into()));
        }
        Ok(grad)
    }

    /// Per-observation knot quasi-scores (n x l). Row `i` is the contribution
    /// of observation `i` to the data part of the knot gradient with β̃ and
    /// Σ_β̃ held fixed; the rows sum to that data part when no `P_i` depends
    /// on the knots.
    pub fn knot_scores(&self, state: &ModelState, mom: &PosteriorMoments) -> Result<DMatrix<f64>> {
        let dg = design_gradient_from_covariates(&self.data.xo, &state.knots)?;
        let (p, q) = (self.p(), self.q());
        let mut w = DMatrix::<f64>::zeros(q, q);
        for a in 0..p {
            for b in 0..p {
                w += mom.sigma_beta_tilde.view((b * q, a * q), (q, q)) * mom.sigma_inv[(a, b)];
            }
        }
        let g_x = &mom.residuals * &mom.sigma_inv * mom.b_tilde.transpose() - &mom.design.x * w;
        let n = self.data.n();
        Ok(DMatrix::from_fn(n, dg.len(), |i, k| dg.values[(i, k)] * g_x[(i, dg.columns[k])]))
    }

    /// Expected information for the knots with B integrated out: the
    /// Gauss-Newton knot block at B̃ minus its projection on the coefficients,
    /// J_ξξ − J_ξβ A⁻¹ J_βξ with A the posterior precision of β.
    pub fn knot_information(&self, state: &ModelState, mom: &PosteriorMoments) -> Result<DMatrix<f64>> {
        let dg = design_gradient_from_covariates(&self.data.xo, &state.knots)?;
        let (p, q, l) = (self.p(), self.q(), dg.len());
        let bs = &mom.b_tilde * &mom.sigma_inv;
        let b_j = mom.b_tilde.select_rows(dg.columns.iter());
        let bs_j = bs.select_rows(dg.columns.iter());
        let j_xx = (dg.values.transpose() * &dg.values).component_mul(&(&bs_j * b_j.transpose()));
        let ux = dg.values.transpose() * &mom.design.x;
        let j_xb = DMatrix::from_fn(l, p * q, |k, c| bs_j[(k, c / q)] * ux[(k, c % q)]);
        let proj = self
            .posterior_solve(mom, &j_xb.transpose())
            .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
        let mut info = j_xx - j_xb * proj;
        symmetrize(&mut info);
        Ok(info)
    }

    fn posterior_solve(&self, mom: &PosteriorMoments, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let mut x = rhs.clone();
        mom.posterior_chol.solve_mut(&mut x);
        x.iter().all(|v| v.is_finite()).then_some(x)
    }

    /// Quasi-scores for log λ with coefficient rows as units (q x 3p).
    pub fn lambda_scores(&self, mom: &PosteriorMoments) -> Result<DMatrix<f64>> {
        let (p, q) = (self.p(), self.q());
        let cinv = self.beta_map.inverse();
        let v_b = cinv.gather_cols(&cinv.gather_rows(&mom.sigma_beta_tilde));
        let b_b: Vec<f64> = cinv.gather_vec(mom.beta_tilde.as_slice());
        let mu_b: Vec<f64> = cinv.gather_vec(mom.mu.as_slice());
        let mut g = DMatrix::zeros(q, 3 * p);
        let mut row0 = 0;
        for comp in Component::ALL {
            let width = self.layout.width(comp);
            if width == 0 {
                continue;
            }
            let blk = &mom.blocks[comp.index()];
            let s = self.layout.stacked_offset(comp);
            let pw = p * width;
            let l = cholesky_jitter(&blk.p_mat, "coefficient prior P")?.l();
            let i_l = DMatrix::<f64>::identity(p, p).kronecker(&l);
            let w_full = i_l.transpose() * v_b.view((s, s), (pw, pw)) * &i_l;
            let d = DMatrix::from_fn(width, p, |r, j| b_b[s + j * width + r] - mu_b[s + j * width + r]);
            let z = l.transpose() * d;
            for r in 0..width {
                let w_r = DMatrix::from_fn(p, p, |a, b| w_full[(a * width + r, b * width + r)]);
                let wm = &w_r * &blk.m_mat;
                let z_r = z.row(r).transpose();
                let mz = &blk.m_mat * &z_r;
                for j in 0..p {
                    g[(row0 + r, comp.index() * p + j)] = -0.5 + 0.5 * wm[(j, j)] + 0.5 * z_r[j] * mz[j];
                }
            }
            row0 += width;
        }
        Ok(g)
    }

    /// IW proposal scale for Σ:
    /// `n0 S0 + Ẽ'Ẽ + Σ_i Λ_i^{-1/2}(B̃_i - M_i)'P_i(B̃_i - M_i)Λ_i^{-1/2}`.
    pub fn sigma_proposal_scale(&self, mom: &PosteriorMoments) -> DMatrix<f64> {
        let mut s = &self.n0_s0 + mom.residuals.transpose() * &mom.residuals;
        for comp in Component::ALL {
            let width = self.layout.width(comp);
            if width == 0 {
                continue;
            }
            let blk = &mom.blocks[comp.index()];
            let off = self.layout.column_offset(comp);
            let d = mom.b_tilde.rows(off, width) - &self.prior.coef_mean[comp.index()];
            let inner = d.transpose() * &blk.p_mat * &d;
            s += DMatrix::from_fn(inner.nrows(), inner.ncols(), |a, b| {
                blk.lam_inv_sqrt[a] * inner[(a, b)] * blk.lam_inv_sqrt[b]
            });
        }
        symmetrize(&mut s);
        s
    }
}

/// `-(G'G) + prior_hessian`, eigen-clipped to be negative definite with all
/// eigenvalues at most `-1e-8 * scale`.
pub fn opg_hessian(scores: &DMatrix<f64>, prior_hessian: &DMatrix<f64>) -> DMatrix<f64> {
    let h = -(scores.transpose() * scores) + prior_hessian;
    let scale = h.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    clip_negative_definite(&h, 1e-8 * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataprep::default_prior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn toy_model(seed: u64, n: usize, p: usize, d: usize, ks: usize, ka: usize) -> (Model, ModelState) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let cov = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5f64..1.5));
        let y = DMatrix::from_fn(n, p, |i, j| {
            let r: f64 = (0..d).map(|c| cov[(i, c)].powi(2)).sum();
            (r.sqrt() * 2.0).sin() + 0.3 * j as f64 * cov[(i, 0)] + 0.3 * rng.sample::<f64, _>(StandardNormal)
        });
        let data = Dataset::from_raw(y, &cov, false).unwrap();
        let prior = default_prior(&data, &KnotLayout::uniform(d, ks, ka), seed).unwrap();
        let model = Model::new(data, prior).unwrap();
        let mut state = model.initial_state();
        // Move away from the prior means so the prior gradient is not zero.
        let theta = state.knots.flatten().map(|v| v + rng.random_range(-0.2..0.2));
        state.knots = KnotSet::from_flat(&model.knot_layout, theta.as_slice()).unwrap();
        for v in state.log_lambda.iter_mut() {
            *v += rng.random_range(-1.0..1.0);
        }
        if p > 1 {
            state.sigma[(0, 1)] *= 0.5;
            state.sigma[(1, 0)] *= 0.5;
        }
        (model, state)
    }

    fn fd_rel_err(a: &DVector<f64>, f: &DVector<f64>) -> f64 {
        a.iter().zip(f.iter()).map(|(a, f)| (a - f).abs() / f.abs().max(1.0)).fold(0.0, f64::max)
    }

    fn fd_knots(model: &Model, state: &ModelState) -> DVector<f64> {
        let theta = state.knots.flatten();
        let h = 1e-5;
        DVector::from_fn(theta.len(), |k, _| {
            let eval = |delta: f64| {
                let mut t = theta.clone();
                t[k] += delta;
                let s = ModelState {
                    knots: KnotSet::from_flat(&model.knot_layout, t.as_slice()).unwrap(),
                    ..state.clone()
                };
                model.log_marginal(&s).unwrap()
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
    }

    fn fd_lambda(model: &Model, state: &ModelState) -> DVector<f64> {
        let h = 1e-5;
        DVector::from_fn(state.log_lambda.len(), |k, _| {
            let eval = |delta: f64| {
                let mut s = state.clone();
                s.log_lambda[k] += delta;
                model.log_marginal(&s).unwrap()
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
    }

    #[test]
    fn beta_tilde_matches_dense_normal_equations() {
        let (model, state) = toy_model(1, 20, 2, 1, 1, 1);
        let mom = model.moments(&state).unwrap();
        assert_eq!(model.q(), 4);
        let x = &mom.design.x;
        let sinv = state.sigma.clone().try_inverse().unwrap();
        let q_beta = mom.sigma_beta.clone().try_inverse().unwrap();
        let a = sinv.kronecker(&(x.transpose() * x)) + &q_beta;
        let rhs = vec_of(&(x.transpose() * &model.data.y * &sinv)) + &q_beta * &mom.mu;
        let direct = a.clone().lu().solve(&rhs).unwrap();
        assert!((direct - &mom.beta_tilde).norm() < 1e-9);
        assert!((a.try_inverse().unwrap() - &mom.sigma_beta_tilde).norm() < 1e-9);
        assert!((q_beta - &mom.precision_beta).norm() < 1e-8 * mom.precision_beta.norm());
    }

    #[test]
    fn shrinkage_limits() {
        let (model, mut state) = toy_model(2, 25, 1, 2, 2, 1);
        state.log_lambda.fill(-30.0);
        let mom = model.moments(&state).unwrap();
        assert!((&mom.beta_tilde - &mom.mu).amax() < 1e-6);
        let mut prior = model.prior.clone();
        prior.p_choice = [PChoice::Identity; 3];
        let flat = Model::new(model.data.clone(), prior).unwrap();
        state.log_lambda.fill(30.0);
        let mom = flat.moments(&state).unwrap();
        let ls = crate::dataprep::ols(&mom.design.x, &flat.data.y).unwrap();
        assert!((vec_of(&ls) - &mom.beta_tilde).amax() < 1e-6);
    }

    #[test]
    fn surface_knot_relabelling_is_invariant() {
        let (model, state) = toy_model(3, 30, 2, 2, 3, 1);
        let perm = [2usize, 0, 1];
        let mut prior = model.prior.clone();
        prior.surface_knot_mean = model.prior.surface_knot_mean.select_rows(perm.iter());
        let permuted_model = Model::new(model.data.clone(), prior).unwrap();
        let mut s2 = state.clone();
        s2.knots.surface = state.knots.surface.select_rows(perm.iter());
        let a = model.log_marginal(&state).unwrap();
        let b = permuted_model.log_marginal(&s2).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs());
    }

    #[test]
    fn knot_gradient_matches_finite_differences() {
        for (seed, p, d) in [(4, 1, 1), (5, 2, 2), (6, 2, 3)] {
            let (model, state) = toy_model(seed, 40, p, d, 3, 2);
            let mom = model.moments(&state).unwrap();
            let g = model.grad_knots(&state, &mom).unwrap();
            let err = fd_rel_err(&g, &fd_knots(&model, &state));
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn knot_gradient_with_gram_surface_prior() {
        let (mut model, state) = toy_model(7, 40, 2, 2, 3, 1);
        let mut prior = model.prior.clone();
        prior.p_choice = [PChoice::Gram; 3];
        model = Model::new(model.data.clone(), prior).unwrap();
        let mom = model.moments(&state).unwrap();
        let g = model.grad_knots(&state, &mom).unwrap();
        let err = fd_rel_err(&g, &fd_knots(&model, &state));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn lambda_gradient_matches_finite_differences() {
        for (seed, p, d) in [(8, 1, 1), (9, 2, 2)] {
            let (model, state) = toy_model(seed, 40, p, d, 3, 2);
            let mom = model.moments(&state).unwrap();
            let g = model.grad_log_lambda(&state, &mom).unwrap();
            let err = fd_rel_err(&g, &fd_lambda(&model, &state));
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn empty_component_lambda_gradient_is_prior_only() {
        let (model, state) = toy_model(10, 30, 1, 2, 2, 0);
        let mom = model.moments(&state).unwrap();
        let g = model.grad_log_lambda(&state, &mom).unwrap();
        let prior = model.lambda_prior_gradient(&state.log_lambda);
        assert_eq!(g[1], prior[1]);
    }

    #[test]
    fn explicit_beta_gradient_vanishes_at_mode() {
        let (model, state) = toy_model(11, 30, 2, 2, 2, 1);
        let mom = model.moments(&state).unwrap();
        let g = model.explicit_beta_gradient(&mom);
        assert!(g.amax() < 1e-8 * (1.0 + mom.precision_beta.amax()));
    }

    #[test]
    fn knot_scores_sum_to_data_gradient() {
        let (model, state) = toy_model(12, 35, 2, 2, 3, 2);
        let mom = model.moments(&state).unwrap();
        let g = model.grad_knots(&state, &mom).unwrap() - model.knot_prior_gradient(&state.knots.flatten());
        let scores = model.knot_scores(&state, &mom).unwrap();
        let sums = scores.row_sum().transpose();
        assert!((sums - g).amax() < 1e-8);
    }

    #[test]
    fn lambda_scores_sum_to_data_gradient() {
        let (model, state) = toy_model(13, 35, 2, 2, 3, 1);
        let mom = model.moments(&state).unwrap();
        let g = model.grad_log_lambda(&state, &mom).unwrap() - model.lambda_prior_gradient(&state.log_lambda);
        let sums = model.lambda_scores(&mom).unwrap().row_sum().transpose();
        assert!((sums - g).amax() < 1e-8);
    }

    #[test]
    fn vec_kron_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let a = DMatrix::from_fn(2, 2, |_, _| rng.random::<f64>());
        let b = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>());
        let perm = IndexMap::kron_identity(2, &commutation_index(3, 2).unwrap(), 3);
        let got = Model::vec_kron(&perm, a.as_slice(), b.as_slice());
        assert_eq!(got.as_slice(), a.kronecker(&b).as_slice());
    }

    #[test]
    fn opg_examples() {
        let prior = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        assert_eq!(opg_hessian(&DMatrix::zeros(5, 2), &prior), prior);
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let expected = -(g.transpose() * &g) + &prior;
        assert!((opg_hessian(&g, &prior) - expected).amax() < 1e-12);
    }

    #[test]
    fn opg_matches_fisher_information_for_gaussian_location() {
        // y_i ~ N(θ, σ²): score (y_i - θ)/σ², Fisher information n/σ².
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let (n, sigma) = (5000, 1.7);
        let scores = DMatrix::from_fn(n, 1, |_, _| sigma * rng.sample::<f64, _>(StandardNormal) / (sigma * sigma));
        let h = opg_hessian(&scores, &DMatrix::zeros(1, 1));
        let fisher = n as f64 / (sigma * sigma);
        assert!(((-h[(0, 0)] - fisher) / fisher).abs() < 0.1);
    }

    #[test]
    fn sample_b_moments() {
        let (model, state) = toy_model(16, 25, 2, 1, 1, 1);
        let mom = model.moments(&state).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let draws = 20_000;
        let dim = mom.beta_tilde.len();
        let mut sum = DVector::zeros(dim);
        let mut outer = DMatrix::zeros(dim, dim);
        for _ in 0..draws {
            let b = vec_of(&mom.sample_b(&mut rng));
            let c = &b - &mom.beta_tilde;
            sum += &b;
            outer += &c * c.transpose();
        }
        let mean = sum / draws as f64;
        let cov = outer / draws as f64;
        for i in 0..dim {
            let se = (mom.sigma_beta_tilde[(i, i)] / draws as f64).sqrt();
            assert!((mean[i] - mom.beta_tilde[i]).abs() < 4.0 * se);
        }
        assert!((cov - &mom.sigma_beta_tilde).norm() / mom.sigma_beta_tilde.norm() < 0.05);
    }
}
