//! Metropolis-within-Gibbs over (Σ, ξ, λ) with conditional draws of B.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{KnotLayout, KnotSet};
use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_jitter, clip_negative_definite, inverse_wishart_log_density, inverse_wishart_sample, spd_inverse, standard_normal_vector,
    MultivariateT,
};
use crate::posterior::{opg_hessian, Model, ModelState, PosteriorMoments};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Updater {
    /// Tailored MH on blocks of knots (one joint block by default).
    #[default]
    Bmh,
    /// Tailored MH on one knot at a time.
    Smh,
    /// Gaussian random walk on one knot at a time.
    Srwm,
}

/// Curvature used for the knot proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KnotHessian {
    /// Outer product of the per-observation knot quasi-scores.
    Opg,
    /// Expected information with the coefficients integrated out.
    #[default]
    Fisher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(untagged)]
pub enum BlockSize {
    #[default]
    #[serde(with = "all_literal")]
    All,
    Knots(usize),
}

mod all_literal {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("all")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "all" {
            Ok(())
        } else {
            Err(serde::de::Error::custom("expected \"all\" or a knot count"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MHConfig {
    pub newton_steps: usize,
    pub proposal_df: f64,
    pub step_damping: f64,
    /// A Newton step is kept only if it achieves this fraction of the
    /// increase predicted by the quadratic model; otherwise it is halved.
    pub min_gain_ratio: f64,
    pub knot_block_size: BlockSize,
    pub updater: Updater,
    pub knot_hessian: KnotHessian,
    /// Initial random-walk sd per knot coordinate.
    pub srwm_scale: f64,
    pub srwm_target: f64,
}

impl Default for MHConfig {
    fn default() -> Self {
        Self {
            newton_steps: 2,
            proposal_df: 5.0,
            step_damping: 1.0,
            min_gain_ratio: 0.0,
            knot_block_size: BlockSize::All,
            updater: Updater::Bmh,
            knot_hessian: KnotHessian::Fisher,
            srwm_scale: 0.1,
            srwm_target: 0.25,
        }
    }
}

impl MHConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.proposal_df > 2.0) {
            return Err(Error::Config("proposal_df must exceed 2".into()));
        }
        if self.newton_steps == 0 {
            return Err(Error::Config("newton_steps must be at least 1".into()));
        }
        if !(self.step_damping > 0.0 && self.step_damping <= 1.0) {
            return Err(Error::Config("step_damping must lie in (0, 1]".into()));
        }
        if !(self.srwm_scale > 0.0) || !(self.srwm_target > 0.0 && self.srwm_target < 1.0) {
            return Err(Error::Config("srwm_scale must be positive and srwm_target in (0, 1)".into()));
        }
        if self.knot_block_size == BlockSize::Knots(0) {
            return Err(Error::Config("knot_block_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateFlags {
    pub sigma: bool,
    pub knots: bool,
    pub lambda: bool,
}

impl Default for UpdateFlags {
    fn default() -> Self {
        Self {
            sigma: true,
            knots: true,
            lambda: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub mh: MHConfig,
    pub update: UpdateFlags,
    /// Retained draws.
    pub iterations: usize,
    /// Discarded draws before the retained ones; SRWM adapts only here.
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            mh: MHConfig::default(),
            update: UpdateFlags::default(),
            iterations: 1000,
            burn_in: 200,
            seed: 1,
        }
    }
}

/// Log density with the Newton ingredients used by the tailored proposal.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub logpost: f64,
    pub grad: DVector<f64>,
    /// Negative-definite Hessian approximation.
    pub hess: DMatrix<f64>,
}

pub trait MhTarget {
    /// `None` signals a numerically unusable point.
    fn log_density(&mut self, theta: &DVector<f64>) -> Option<f64>;
    fn evaluate(&mut self, theta: &DVector<f64>) -> Option<Evaluation>;
}

/// Adapts plain closures to [`MhTarget`].
pub struct FnTarget<L, D>
where
    L: FnMut(&DVector<f64>) -> f64,
    D: FnMut(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    pub logpost: L,
    pub derivs: D,
}

impl<L, D> MhTarget for FnTarget<L, D>
where
    L: FnMut(&DVector<f64>) -> f64,
    D: FnMut(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    fn log_density(&mut self, theta: &DVector<f64>) -> Option<f64> {
        let v = (self.logpost)(theta);
        v.is_finite().then_some(v)
    }

    fn evaluate(&mut self, theta: &DVector<f64>) -> Option<Evaluation> {
        let logpost = self.log_density(theta)?;
        let (grad, hess) = (self.derivs)(theta);
        Some(Evaluation { logpost, grad, hess })
    }
}

#[derive(Debug, Clone)]
pub struct MhOutcome {
    pub theta: DVector<f64>,
    pub accepted: bool,
    pub log_accept_ratio: f64,
}

/// R damped Newton steps from `(theta, ev)`. Returns the end point and its
/// evaluation, or `None` if a point on the path is unusable.
fn newton_path<T: MhTarget + ?Sized>(
    target: &mut T,
    mut theta: DVector<f64>,
    mut ev: Evaluation,
    cfg: &MHConfig,
) -> Option<(DVector<f64>, Evaluation)> {
    for _ in 0..cfg.newton_steps {
        let neg_h = -&ev.hess;
        let step = cholesky_jitter(&neg_h, "Newton Hessian").ok()?.solve(&ev.grad);
        let gs = ev.grad.dot(&step);
        let mut alpha = cfg.step_damping;
        let mut moved = None;
        for _ in 0..=5 {
            let cand = &theta + &step * alpha;
            if let Some(lp) = target.log_density(&cand) {
                let predicted = alpha * gs * (1.0 - 0.5 * alpha);
                if lp >= ev.logpost && lp - ev.logpost >= cfg.min_gain_ratio * predicted {
                    moved = Some(cand);
                    break;
                }
            }
            alpha *= 0.5;
        }
        match moved {
            Some(cand) => {
                ev = target.evaluate(&cand)?;
                theta = cand;
            }
            None => break,
        }
    }
    Some((theta, ev))
}

fn t_proposal(center: DVector<f64>, hess: &DMatrix<f64>, df: f64) -> Option<MultivariateT> {
    let cov = spd_inverse(&(-hess), "proposal covariance").ok()?;
    MultivariateT::with_covariance(center, &cov, df).ok()
}

/// One tailored MH update: Newton to an approximate mode, a multivariate-t
/// proposal there, and the reverse Newton path from the proposal for the
/// reverse proposal density.
pub fn tailored_mh_step<T: MhTarget + ?Sized, R: Rng + ?Sized>(
    target: &mut T,
    theta_current: &DVector<f64>,
    cfg: &MHConfig,
    rng: &mut R,
) -> MhOutcome {
    let reject = |ratio: f64| MhOutcome {
        theta: theta_current.clone(),
        accepted: false,
        log_accept_ratio: ratio,
    };
    let Some(ev_c) = target.evaluate(theta_current) else {
        return reject(f64::NEG_INFINITY);
    };
    let lp_c = ev_c.logpost;
    let Some((mode_f, ev_f)) = newton_path(target, theta_current.clone(), ev_c, cfg) else {
        return reject(f64::NEG_INFINITY);
    };
    let Some(fwd) = t_proposal(mode_f, &ev_f.hess, cfg.proposal_df) else {
        return reject(f64::NEG_INFINITY);
    };
    let proposal = fwd.sample(rng);
    let Some(ev_p) = target.evaluate(&proposal) else {
        return reject(f64::NEG_INFINITY);
    };
    let lp_p = ev_p.logpost;
    let Some((mode_b, ev_b)) = newton_path(target, proposal.clone(), ev_p, cfg) else {
        return reject(f64::NEG_INFINITY);
    };
    let Some(bwd) = t_proposal(mode_b, &ev_b.hess, cfg.proposal_df) else {
        return reject(f64::NEG_INFINITY);
    };
    let ratio = lp_p + bwd.log_density(theta_current) - lp_c - fwd.log_density(&proposal);
    if !ratio.is_finite() {
        return reject(f64::NEG_INFINITY);
    }
    let u: f64 = rng.random();
    if u.ln() < ratio {
        MhOutcome {
            theta: proposal,
            accepted: true,
            log_accept_ratio: ratio,
        }
    } else {
        reject(ratio)
    }
}

/// Knot coordinates `indices` of the flat knot vector as the free variable.
struct KnotTarget<'a> {
    model: &'a Model,
    state: ModelState,
    full: DVector<f64>,
    indices: Vec<usize>,
    hessian: KnotHessian,
}

impl KnotTarget<'_> {
    fn state_at(&self, sub: &DVector<f64>) -> Option<ModelState> {
        let mut full = self.full.clone();
        for (k, &i) in self.indices.iter().enumerate() {
            full[i] = sub[k];
        }
        let knots = KnotSet::from_flat(&self.model.knot_layout, full.as_slice()).ok()?;
        Some(ModelState {
            knots,
            ..self.state.clone()
        })
    }
}

impl MhTarget for KnotTarget<'_> {
    fn log_density(&mut self, theta: &DVector<f64>) -> Option<f64> {
        let s = self.state_at(theta)?;
        self.model.log_marginal(&s).ok()
    }

    fn evaluate(&mut self, theta: &DVector<f64>) -> Option<Evaluation> {
        let s = self.state_at(theta)?;
        let mom = self.model.moments(&s).ok()?;
        let grad = self.model.grad_knots(&s, &mom).ok()?;
        let idx = &self.indices;
        let prior_h = self.model.knot_prior_hessian().select_rows(idx.iter()).select_columns(idx.iter());
        let hess = match self.hessian {
            KnotHessian::Opg => {
                let scores = self.model.knot_scores(&s, &mom).ok()?;
                opg_hessian(&scores.select_columns(idx.iter()), &prior_h)
            }
            KnotHessian::Fisher => {
                let info = self.model.knot_information(&s, &mom).ok()?;
                let h = prior_h - info.select_rows(idx.iter()).select_columns(idx.iter());
                let scale = h.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
                clip_negative_definite(&h, 1e-8 * scale)
            }
        };
        Some(Evaluation {
            logpost: mom.log_marginal,
            grad: DVector::from_fn(idx.len(), |k, _| grad[idx[k]]),
            hess,
        })
    }
}

struct LambdaTarget<'a> {
    model: &'a Model,
    state: ModelState,
}

impl MhTarget for LambdaTarget<'_> {
    fn log_density(&mut self, theta: &DVector<f64>) -> Option<f64> {
        let s = ModelState {
            log_lambda: theta.clone(),
            ..self.state.clone()
        };
        self.model.log_marginal(&s).ok()
    }

    fn evaluate(&mut self, theta: &DVector<f64>) -> Option<Evaluation> {
        let s = ModelState {
            log_lambda: theta.clone(),
            ..self.state.clone()
        };
        let mom = self.model.moments(&s).ok()?;
        let grad = self.model.grad_log_lambda(&s, &mom).ok()?;
        let scores = self.model.lambda_scores(&mom).ok()?;
        Some(Evaluation {
            logpost: mom.log_marginal,
            grad,
            hess: opg_hessian(&scores, &self.model.lambda_prior_hessian()),
        })
    }
}

/// Σ update. Exact inverse-Wishart draw for one response; otherwise an MH
/// step with the same inverse-Wishart form as a state-dependent proposal.
pub fn sigma_step<R: Rng + ?Sized>(model: &Model, state: &ModelState, rng: &mut R) -> Result<(DMatrix<f64>, bool)> {
    let df = model.prior.n0 + model.data.n() as f64;
    let mom_c = model.moments(state)?;
    let scale_c = model.sigma_proposal_scale(&mom_c);
    let proposal = inverse_wishart_sample(rng, &scale_c, df)?;
    if model.p() == 1 {
        return Ok((proposal, true));
    }
    let proposed_state = ModelState {
        sigma: proposal.clone(),
        ..state.clone()
    };
    let Ok(mom_p) = model.moments(&proposed_state) else {
        return Ok((state.sigma.clone(), false));
    };
    let scale_p = model.sigma_proposal_scale(&mom_p);
    let fwd = inverse_wishart_log_density(&proposal, &scale_c, df);
    let bwd = inverse_wishart_log_density(&state.sigma, &scale_p, df);
    let ratio = match (fwd, bwd) {
        (Ok(f), Ok(b)) => mom_p.log_marginal - mom_c.log_marginal + b - f,
        _ => f64::NEG_INFINITY,
    };
    let u: f64 = rng.random();
    if ratio.is_finite() && u.ln() < ratio {
        Ok((proposal, true))
    } else {
        Ok((state.sigma.clone(), false))
    }
}

/// Acceptances and attempts in one sweep of a block.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AcceptanceRecord {
    pub accepted: usize,
    pub attempted: usize,
}

impl AcceptanceRecord {
    pub fn rate(&self) -> f64 {
        if self.attempted == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.attempted as f64
        }
    }
}

/// Per-knot random-walk scales, adapted only while `adapting` is set.
#[derive(Debug, Clone)]
pub struct SrwmState {
    pub log_scales: Vec<f64>,
    pub visits: Vec<usize>,
    pub target: f64,
}

impl SrwmState {
    pub fn new(knots: usize, scale: f64, target: f64) -> Self {
        Self {
            log_scales: vec![scale.ln(); knots],
            visits: vec![0; knots],
            target,
        }
    }

    fn adapt(&mut self, k: usize, accept_prob: f64) {
        self.visits[k] += 1;
        let gain = 1.0 / (self.visits[k] as f64).powf(0.6);
        self.log_scales[k] += gain * (accept_prob - self.target);
    }
}

fn knot_groups(model: &Model, cfg: &MHConfig) -> Vec<Vec<usize>> {
    let blocks = model.knot_layout.knot_blocks();
    let per = match (cfg.updater, cfg.knot_block_size) {
        (Updater::Bmh, BlockSize::All) => blocks.len().max(1),
        (Updater::Bmh, BlockSize::Knots(k)) => k,
        _ => 1,
    };
    blocks.chunks(per).map(|ch| ch.iter().flat_map(|r| r.clone()).collect()).collect()
}

/// One sweep over the knot blocks.
pub fn knot_step<R: Rng + ?Sized>(
    model: &Model,
    state: &ModelState,
    cfg: &MHConfig,
    srwm: Option<(&mut SrwmState, bool)>,
    rng: &mut R,
) -> Result<(KnotSet, AcceptanceRecord)> {
    let mut full = state.knots.flatten();
    let mut rec = AcceptanceRecord::default();
    if full.is_empty() {
        return Ok((state.knots.clone(), rec));
    }
    let groups = knot_groups(model, cfg);
    match cfg.updater {
        Updater::Srwm => {
            let (srwm, adapting) = srwm.ok_or_else(|| Error::InvalidArgument("SRWM needs scale state".into()))?;
            let mut current_state = state.clone();
            let mut lp_c = model.log_marginal(&current_state)?;
            for (k, idx) in groups.iter().enumerate() {
                let scale = srwm.log_scales[k].exp();
                let z = standard_normal_vector(rng, idx.len());
                let mut cand = full.clone();
                for (j, &i) in idx.iter().enumerate() {
                    cand[i] += scale * z[j];
                }
                let lp_p = KnotSet::from_flat(&model.knot_layout, cand.as_slice())
                    .ok()
                    .and_then(|knots| {
                        model
                            .log_marginal(&ModelState {
                                knots,
                                ..current_state.clone()
                            })
                            .ok()
                    })
                    .unwrap_or(f64::NEG_INFINITY);
                let ratio = lp_p - lp_c;
                let u: f64 = rng.random();
                rec.attempted += 1;
                if ratio.is_finite() && u.ln() < ratio {
                    rec.accepted += 1;
                    full = cand;
                    lp_c = lp_p;
                    current_state.knots = KnotSet::from_flat(&model.knot_layout, full.as_slice())?;
                }
                if adapting {
                    let prob = if ratio.is_finite() { ratio.min(0.0).exp() } else { 0.0 };
                    srwm.adapt(k, prob);
                }
            }
        }
        Updater::Bmh | Updater::Smh => {
            for idx in &groups {
                let mut target = KnotTarget {
                    model,
                    state: ModelState {
                        knots: KnotSet::from_flat(&model.knot_layout, full.as_slice())?,
                        ..state.clone()
                    },
                    full: full.clone(),
                    indices: idx.clone(),
                    hessian: cfg.knot_hessian,
                };
                let sub = DVector::from_fn(idx.len(), |k, _| full[idx[k]]);
                let out = tailored_mh_step(&mut target, &sub, cfg, rng);
                rec.attempted += 1;
                if out.accepted {
                    rec.accepted += 1;
                    for (k, &i) in idx.iter().enumerate() {
                        full[i] = out.theta[k];
                    }
                }
            }
        }
    }
    Ok((KnotSet::from_flat(&model.knot_layout, full.as_slice())?, rec))
}

/// Joint tailored MH update of all log shrinkages.
pub fn lambda_step<R: Rng + ?Sized>(
    model: &Model,
    state: &ModelState,
    cfg: &MHConfig,
    rng: &mut R,
) -> (DVector<f64>, AcceptanceRecord) {
    let mut target = LambdaTarget {
        model,
        state: state.clone(),
    };
    let out = tailored_mh_step(&mut target, &state.log_lambda, cfg, rng);
    (
        out.theta,
        AcceptanceRecord {
            accepted: usize::from(out.accepted),
            attempted: 1,
        },
    )
}

/// Draw `B` (q x p) from its conditional posterior.
pub fn draw_b<R: Rng + ?Sized>(model: &Model, state: &ModelState, rng: &mut R) -> Result<(DMatrix<f64>, PosteriorMoments)> {
    let mom = model.moments(state)?;
    Ok((mom.sample_b(rng), mom))
}

/// One retained iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub knots: DVector<f64>,
    pub log_lambda: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Conditional posterior mean of B at this draw's (ξ, λ, Σ).
    pub b_tilde: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockTiming {
    pub sigma_secs: f64,
    pub knots_secs: f64,
    pub lambda_secs: f64,
    pub b_secs: f64,
    /// Wall time of the retained iterations only.
    pub sampling_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub draws: Vec<Draw>,
    /// Per retained iteration.
    pub sigma_acceptance: Vec<AcceptanceRecord>,
    pub knot_acceptance: Vec<AcceptanceRecord>,
    pub lambda_acceptance: Vec<AcceptanceRecord>,
    pub timing: BlockTiming,
    pub seed: u64,
    pub config: ChainConfig,
    pub final_state: ModelState,
    pub knot_layout: KnotLayout,
    pub srwm_scales: Option<Vec<f64>>,
}

fn mean_rate(recs: &[AcceptanceRecord]) -> f64 {
    let (a, t) = recs.iter().fold((0, 0), |(a, t), r| (a + r.accepted, t + r.attempted));
    if t == 0 {
        f64::NAN
    } else {
        a as f64 / t as f64
    }
}

impl ChainOutput {
    pub fn sigma_acceptance_rate(&self) -> f64 {
        mean_rate(&self.sigma_acceptance)
    }

    pub fn knot_acceptance_rate(&self) -> f64 {
        mean_rate(&self.knot_acceptance)
    }

    pub fn lambda_acceptance_rate(&self) -> f64 {
        mean_rate(&self.lambda_acceptance)
    }

    /// Flat knot draws as a matrix, one row per draw.
    pub fn knot_matrix(&self) -> DMatrix<f64> {
        let l = self.draws.first().map_or(0, |d| d.knots.len());
        DMatrix::from_fn(self.draws.len(), l, |i, j| self.draws[i].knots[j])
    }
}

/// Runs the three-block sampler from `init` (or the model's default start).
pub fn run_chain(model: &Model, cfg: &ChainConfig, init: Option<ModelState>) -> Result<ChainOutput> {
    cfg.mh.validate()?;
    let mut rng: ChaCha20Rng = stream_rng(cfg.seed, 0);
    let mut state = init.unwrap_or_else(|| model.initial_state());
    // Fail early on an unusable start.
    model.moments(&state)?;
    let mut srwm = (cfg.mh.updater == Updater::Srwm)
        .then(|| SrwmState::new(model.knot_layout.knot_blocks().len(), cfg.mh.srwm_scale, cfg.mh.srwm_target));
    let total = cfg.burn_in + cfg.iterations;
    let mut out = ChainOutput {
        draws: Vec::with_capacity(cfg.iterations),
        sigma_acceptance: Vec::with_capacity(cfg.iterations),
        knot_acceptance: Vec::with_capacity(cfg.iterations),
        lambda_acceptance: Vec::with_capacity(cfg.iterations),
        timing: BlockTiming::default(),
        seed: cfg.seed,
        config: cfg.clone(),
        final_state: state.clone(),
        knot_layout: model.knot_layout.clone(),
        srwm_scales: None,
    };
    let start = Instant::now();
    let mut sampling_start = start;
    let dump = |state: &ModelState, e: Error| -> Error {
        if e.is_numeric() {
            Error::NonFinite(format!(
                "{e}; chain state: knots {:?}, log lambda {:?}, sigma {:?}",
                state.knots.flatten().as_slice(),
                state.log_lambda.as_slice(),
                state.sigma.as_slice()
            ))
        } else {
            e
        }
    };
    for it in 0..total {
        if it == cfg.burn_in {
            sampling_start = Instant::now();
        }
        let keep = it >= cfg.burn_in;
        let mut sig_rec = AcceptanceRecord::default();
        if cfg.update.sigma {
            let t = Instant::now();
            let (sigma, accepted) = sigma_step(model, &state, &mut rng).map_err(|e| dump(&state, e))?;
            if model.p() == 1 {
                assert!(accepted, "exact Sigma update must always be accepted");
            }
            state.sigma = sigma;
            sig_rec = AcceptanceRecord {
                accepted: usize::from(accepted),
                attempted: 1,
            };
            out.timing.sigma_secs += t.elapsed().as_secs_f64();
        }
        let mut knot_rec = AcceptanceRecord::default();
        if cfg.update.knots {
            let t = Instant::now();
            let adapting = !keep;
            let (knots, rec) = knot_step(model, &state, &cfg.mh, srwm.as_mut().map(|s| (s, adapting)), &mut rng)
                .map_err(|e| dump(&state, e))?;
            state.knots = knots;
            knot_rec = rec;
            out.timing.knots_secs += t.elapsed().as_secs_f64();
        }
        let mut lam_rec = AcceptanceRecord::default();
        if cfg.update.lambda {
            let t = Instant::now();
            let (lam, rec) = lambda_step(model, &state, &cfg.mh, &mut rng);
            state.log_lambda = lam;
            lam_rec = rec;
            out.timing.lambda_secs += t.elapsed().as_secs_f64();
        }
        let t = Instant::now();
        let (b, mom) = draw_b(model, &state, &mut rng).map_err(|e| dump(&state, e))?;
        out.timing.b_secs += t.elapsed().as_secs_f64();
        if keep {
            out.draws.push(Draw {
                knots: state.knots.flatten(),
                log_lambda: state.log_lambda.clone(),
                sigma: state.sigma.clone(),
                b,
                b_tilde: mom.b_tilde,
            });
            out.sigma_acceptance.push(sig_rec);
            out.knot_acceptance.push(knot_rec);
            out.lambda_acceptance.push(lam_rec);
        }
    }
    if cfg.iterations > 0 {
        out.timing.sampling_secs = sampling_start.elapsed().as_secs_f64();
    }
    out.timing.total_secs = start.elapsed().as_secs_f64();
    out.srwm_scales = srwm.map(|s| s.log_scales.iter().map(|v| v.exp()).collect());
    out.final_state = state;
    Ok(out)
}
