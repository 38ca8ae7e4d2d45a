//! Update rules as pure step functions over explicit state.
//!
//! Every step takes the current state by reference and returns a fresh
//! state plus a [`StepReport`]. Randomness enters only through the
//! caller's [`SeededRng`], so identical `(state, rng)` pairs reproduce
//! identical trajectories.
//!
//! Notation: `N` is the number of training examples, `λ` the prior
//! precision and `λ̃ = λ/N`. The variational methods tie the scaling
//! vector `s` to the posterior variance through `σ² = 1/[N(s + λ̃)]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{schedule_rates, Schedule};
use crate::error::{Error, Result};
use crate::models::{GradRequest, GradientEstimate, Objective};
use crate::numkit::{sigmoid, softplus, SeededRng};
use crate::posteriors::GaussianMeanField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Step size α.
    pub alpha: f64,
    /// Scaling-vector rate β (plays the role of `1 − γ₂`).
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Prior precision λ.
    pub lambda: f64,
    /// Training-set size N.
    pub n: usize,
    pub delta: f64,
    /// Monte Carlo samples S per step.
    pub mc_samples: usize,
    /// L2 coefficient added to the first-moment gradient of Adam and RMSprop.
    pub l2: f64,
    /// Safety factor in (0, 1) for the reparameterization-Hessian back-tracking.
    pub backtrack: f64,
    /// Initial posterior precision `N(s₁ + λ̃)`; for VadaGrad, `s₁` itself.
    pub init_precision: f64,
    /// Polynomial decay of α and of the averaging rates.
    pub decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.001,
            gamma1: 0.9,
            gamma2: 0.999,
            lambda: 1.0,
            n: 1,
            delta: 1e-8,
            mc_samples: 1,
            l2: 0.0,
            backtrack: 0.9,
            init_precision: 10.0,
            decay: false,
        }
    }
}

/// Rates in effect at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub alpha: f64,
    pub beta: f64,
    pub gamma2: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("optimizer config: {what}")));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.gamma1) {
            return bad("gamma1 must lie in [0, 1)");
        }
        if !(self.gamma2 > 0.0 && self.gamma2 < 1.0) {
            return bad("gamma2 must lie in (0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be nonnegative");
        }
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) || !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("delta and l2 must be nonnegative");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad("backtrack must lie in (0, 1)");
        }
        if !(self.init_precision > 0.0 && self.init_precision.is_finite()) {
            return bad("init_precision must be positive");
        }
        Ok(())
    }

    /// λ̃ = λ/N.
    pub fn lambda_tilde(&self) -> f64 {
        self.lambda / self.n as f64
    }

    /// Rates for step `t ≥ 1`; with decay the first step uses the base rates.
    pub fn rates_at(&self, t: u64) -> Rates {
        if !self.decay {
            return Rates { alpha: self.alpha, beta: self.beta, gamma2: self.gamma2 };
        }
        let k = t.saturating_sub(1);
        let (alpha, gamma2) = schedule_rates(&self.schedule(self.gamma2), k);
        let (_, keep) = schedule_rates(&self.schedule(1.0 - self.beta), k);
        Rates { alpha, beta: 1.0 - keep, gamma2 }
    }

    fn schedule(&self, beta0: f64) -> Schedule {
        Schedule { alpha0: self.alpha, beta0, decay_exponent: Schedule::DEFAULT_EXPONENT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub mu: Vec<f64>,
    pub m: Vec<f64>,
    pub s: Vec<f64>,
    pub mu_prev: Vec<f64>,
    /// Step counter, starting at 1.
    pub t: u64,
}

impl OptimizerState {
    /// `m = 0`, `mu_prev = mu`, `t = 1`.
    pub fn new(mu: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        if mu.len() != s.len() {
            return Err(Error::DimensionMismatch { expected: mu.len(), found: s.len() });
        }
        let state = Self { m: vec![0.0; mu.len()], mu_prev: mu.clone(), mu, s, t: 1 };
        state.check_finite()?;
        Ok(state)
    }

    pub fn zeros(mu: Vec<f64>) -> Result<Self> {
        let p = mu.len();
        Self::new(mu, vec![0.0; p])
    }

    /// Scaling vector chosen so that `N(s₁ + λ̃) = cfg.init_precision`.
    pub fn with_precision(mu: Vec<f64>, cfg: &OptimizerConfig) -> Result<Self> {
        let s1 = (cfg.init_precision - cfg.lambda) / cfg.n as f64;
        if !(s1 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "init_precision {} must exceed lambda {} so that s starts positive",
                cfg.init_precision, cfg.lambda
            )));
        }
        let p = mu.len();
        Self::new(mu, vec![s1; p])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn check(&self, dim: usize) -> Result<()> {
        for v in [&self.mu, &self.m, &self.s, &self.mu_prev] {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
            }
        }
        if self.t == 0 {
            return Err(Error::InvalidArgument("step counter starts at 1".into()));
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        let all = self.mu.iter().chain(&self.m).chain(&self.s).chain(&self.mu_prev);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("optimizer state after step {}", self.t.saturating_sub(1))));
        }
        Ok(())
    }

    /// `σ² = 1/[N(s + λ̃)]`.
    pub fn variational_posterior(&self, cfg: &OptimizerConfig) -> Result<GaussianMeanField> {
        let sigma2 = precision_variances(&self.s, cfg)?;
        GaussianMeanField::new(self.mu.clone(), sigma2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// θ draws at which gradients were taken (μ itself for point methods).
    pub theta_sampled: Vec<Vec<f64>>,
    /// Gradient information averaged over the draws.
    pub grad_used: GradientEstimate,
    pub rates: Rates,
}

/// Which diagonal curvature feeds the scaling-vector update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Curvature {
    ExactDiag,
    /// `ĝ ∘ (ε/σ)`, with back-tracking on the rate.
    ReparamTrick,
    /// `(1/M) Σ (∇f_i)²`.
    Ggn,
    /// `ĝ ∘ ĝ`.
    GradMagnitude,
}

fn precision_variances(s: &[f64], cfg: &OptimizerConfig) -> Result<Vec<f64>> {
    let n = cfg.n as f64;
    let lt = cfg.lambda_tilde();
    s.iter()
        .enumerate()
        .map(|(j, &sj)| {
            let prec = n * (sj + lt);
            if prec > 0.0 && prec.is_finite() {
                Ok(1.0 / prec)
            } else {
                Err(Error::InvalidArgument(format!("posterior precision N(s + λ/N) = {prec} at coordinate {j} is not positive")))
            }
        })
        .collect()
}

struct Draws {
    thetas: Vec<Vec<f64>>,
    eps: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    mean: GradientEstimate,
}

/// Draws `S` perturbed weights `θ = μ + σ∘ε` and averages the estimates.
fn perturbed_estimates(
    obj: &dyn Objective,
    mu: &[f64],
    sigma: &[f64],
    batch: &[usize],
    rng: &mut SeededRng,
    samples: usize,
    want: GradRequest,
) -> Result<Draws> {
    let p = mu.len();
    let want = GradRequest { per_example: false, ..want };
    let mut draws = Draws {
        thetas: Vec::with_capacity(samples),
        eps: Vec::with_capacity(samples),
        grads: Vec::with_capacity(samples),
        mean: GradientEstimate {
            ghat: vec![0.0; p],
            per_example: None,
            ggn_diag: want.ggn.then(|| vec![0.0; p]),
            hess_diag: want.exact_hessian.then(|| vec![0.0; p]),
            batch_size: batch.len(),
        },
    };
    let inv = 1.0 / samples as f64;
    for _ in 0..samples {
        let eps = rng.sample_std_normal(p);
        let theta: Vec<f64> = mu.iter().zip(sigma).zip(&eps).map(|((m, s), e)| m + s * e).collect();
        let est = obj.estimate(&theta, batch, want)?;
        accumulate(&mut draws.mean, &est, inv)?;
        draws.thetas.push(theta);
        draws.eps.push(eps);
        draws.grads.push(est.ghat);
    }
    Ok(draws)
}

fn accumulate(acc: &mut GradientEstimate, est: &GradientEstimate, w: f64) -> Result<()> {
    fn add(a: &mut [f64], b: &[f64], w: f64) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += w * y);
    }
    add(&mut acc.ghat, &est.ghat, w);
    if let Some(a) = acc.ggn_diag.as_mut() {
        let b = est.ggn_diag.as_ref().ok_or_else(|| Error::Unsupported("objective gives no Gauss-Newton diagonal".into()))?;
        add(a, b, w);
    }
    if let Some(a) = acc.hess_diag.as_mut() {
        let b = est.hess_diag.as_ref().ok_or_else(|| Error::Unsupported("objective gives no exact Hessian diagonal".into()))?;
        add(a, b, w);
    }
    acc.batch_size = est.batch_size;
    Ok(())
}

fn point_estimate(obj: &dyn Objective, mu: &[f64], batch: &[usize]) -> Result<GradientEstimate> {
    let est = obj.estimate(mu, batch, GradRequest::MEAN)?;
    if est.ghat.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(est)
}

fn check_dim(state: &OptimizerState, obj: &dyn Objective) -> Result<()> {
    state.check(obj.dim())
}

fn finish(next: OptimizerState, report: StepReport) -> Result<(OptimizerState, StepReport)> {
    next.check_finite()?;
    Ok((next, report))
}

/// Shared Adam moment update; returns `(m, s, μ)`.
fn adam_moments(
    state: &OptimizerState,
    first: &[f64],
    second: &[f64],
    gamma1: f64,
    gamma2: f64,
    alpha: f64,
    denom_shift: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t = state.t as f64;
    let bc1 = 1.0 - gamma1.powf(t);
    let bc2 = 1.0 - gamma2.powf(t);
    let p = state.dim();
    let (mut m, mut s, mut mu) = (Vec::with_capacity(p), Vec::with_capacity(p), Vec::with_capacity(p));
    for j in 0..p {
        let mj = gamma1 * state.m[j] + (1.0 - gamma1) * first[j];
        let sj = gamma2 * state.s[j] + (1.0 - gamma2) * second[j] * second[j];
        let m_hat = mj / bc1;
        let s_hat = sj / bc2;
        mu.push(state.mu[j] - alpha * m_hat / (s_hat.sqrt() + denom_shift));
        m.push(mj);
        s.push(sj);
    }
    (m, s, mu)
}

/// Adam at `θ = μ`, with an optional L2 term `l2·μ` in the first moment.
pub fn adam_step(
    state: &OptimizerState,
    cfg: &OptimizerConfig,
    obj: &dyn Objective,
    batch: &[usize],
) -> Result<(OptimizerState, StepReport)> {
    check_dim(state, obj)?;
    let rates = cfg.rates_at(state.t);
    let est = point_estimate(obj, &state.mu, batch)?;
    let first: Vec<f64> = est.ghat.iter().zip(&state.mu).map(|(g, m)| g + cfg.l2 * m).collect();
    let (m, s, mu) = adam_moments(state, &first, &est.ghat, cfg.gamma1, rates.gamma2, rates.alpha, cfg.delta);
    let next = OptimizerState { mu, m, s, mu_prev: state.mu.clone(), t: state.t + 1 };
    finish(next, StepReport { theta_sampled: vec![state.mu.clone()], grad_used: est, rates })
}

/// Adam with weight perturbation: `θ = μ + σ∘ε`, `σ = 1/√(N s + λ)` from
/// the uncorrected `s`, prior term `λμ/N` in the first moment and `λ/N`
/// in place of δ.
pub fn vadam_step(
    state: &OptimizerState,
    cfg: &OptimizerConfig,
    obj: &dyn Objective,
    batch: &[usize],
    rng: &mut SeededRng,
) -> Result<(OptimizerState, StepReport)> {
    check_dim(state, obj)?;
    let rates = cfg.rates_at(state.t);
    let lt = cfg.lambda_tilde();
    let sigma: Vec<f64> = precision_variances(&state.s, cfg)?.into_iter().map(f64::sqrt).collect();
    let draws = perturbed_estimates(obj, &state.mu, &sigma, batch, rng, cfg.mc_samples, GradRequest::MEAN)?;
    let g = &draws.mean.ghat;
    let first: Vec<f64> = g.iter().zip(&state.mu).map(|(g, m)| g + lt * m).collect();
    let (m, s, mu) = adam_moments(state, &first, g, cfg.gamma1, rates.gamma2, rates.alpha, lt);
    let next = OptimizerState { mu, m, s, mu_prev: state.mu.clone(), t: state.t + 1 };
    finish(next, StepReport { theta_sampled: draws.thetas, grad_used: draws.mean, rates })
}

/// One natural-gradient step in natural-parameter space:
/// `σ⁻²′ = σ⁻² − 2β ∇_{σ²}L`, `μ′ = μ + β σ²′ ∘ ∇_μL`.
pub fn ngvi_step(
    q: &GaussianMeanField,
    beta: f64,
    grad_mu: &[f64],
    grad_sigma2: &[f64],
) -> Result<GaussianMeanField> {
    let p = q.dim();
    for g in [grad_mu, grad_sigma2] {
        if g.len() != p {
            return Err(Error::DimensionMismatch { expected: p, found: g.len() });
        }
    }
    let mut mu = Vec::with_capacity(p);
    let mut sigma2 = Vec::with_capacity(p);
    for j in 0..p {
        let prec = 1.0 / q.sigma2()[j] - 2.0 * beta * grad_sigma2[j];
        if !(prec > 0.0) {
            return Err(Error::PrecisionViolation { coordinate: j, value: prec });
        }
        let v = 1.0 / prec;
        mu.push(q.mu()[j] + beta * v * grad_mu[j]);
        sigma2.push(v);
    }
    GaussianMeanField::new(mu, sigma2)
}

/// Diagonal Hessian estimate `mean_k ĝ_k ∘ ε_k / σ` from reparameterized
/// draws `θ_k = μ + σ∘ε_k`; unbiased for `E_q[diag ∇²f]`.
pub fn reparam_hessian(grads: &[Vec<f64>], eps: &[Vec<f64>], sigma: &[f64]) -> Vec<f64> {
    let inv = 1.0 / grads.len() as f64;
    let mut h = vec![0.0; sigma.len()];
    for (g, e) in grads.iter().zip(eps) {
        for j in 0..h.len() {
            h[j] += inv * g[j] * e[j] / sigma[j];
        }
    }
    h
}

/// Largest safe rate: `min{β₀, c · min_{h_d<0} s_d/(s_d − h_d)}`.
///
/// With `c < 1` this keeps `(1−β)s + βh ≥ (1−c)s > 0`.
pub fn backtrack_rate(s: &[f64], h: &[f64], beta0: f64, factor: f64) -> Result<f64> {
    let mut beta = beta0;
    let mut worst = None;
    for (d, (&sd, &hd)) in s.iter().zip(h).enumerate() {
        if hd < 0.0 {
            let cap = factor * sd / (sd - hd);
            if cap < beta {
                beta = cap;
                worst = Some(d);
            }
        }
    }
    match worst {
        Some(coordinate) if !(beta > 0.0) => Err(Error::StalledStep { coordinate }),
        _ => Ok(beta),
    }
}

fn curvature_request(c: Curvature) -> GradRequest {
    match c {
        Curvature::ExactDiag => GradRequest::HESSIAN,
        Curvature::Ggn => GradRequest::GGN,
        Curvature::ReparamTrick | Curvature::GradMagnitude => GradRequest::MEAN,
    }
}

fn von_core(
    state: &OptimizerState,
    cfg: &OptimizerConfig,
    obj: &dyn Objective,
    batch: &[usize],
    rng: &mut SeededRng,
    curvature: Curvature,
    momentum: f64,
) -> Result<(OptimizerState, StepReport)> {
    check_dim(state, obj)?;
    let mut rates = cfg.rates_at(state.t);
    let lt = cfg.lambda_tilde();
    let sigma: Vec<f64> = precision_variances(&state.s, cfg)?.into_iter().map(f64::sqrt).collect();
    let draws = perturbed_estimates(obj, &state.mu, &sigma, batch, rng, cfg.mc_samples, curvature_request(curvature))?;
    let h: Vec<f64> = match curvature {
        Curvature::ExactDiag => draws.mean.hess_diag.clone().unwrap_or_default(),
        Curvature::Ggn => draws.mean.ggn_diag.clone().unwrap_or_default(),
        Curvature::GradMagnitude => draws.mean.ghat.iter().map(|g| g * g).collect(),
        Curvature::ReparamTrick => reparam_hessian(&draws.grads, &draws.eps, &sigma),
    };
    if curvature == Curvature::ReparamTrick {
        rates.beta = backtrack_rate(&state.s, &h, rates.beta, cfg.backtrack)?;
    }
    let beta = rates.beta;
    let g = &draws.mean.ghat;
    let p = state.dim();
    let mut s = Vec::with_capacity(p);
    let mut mu = Vec::with_capacity(p);
    for j in 0..p {
        let sj = (1.0 - beta) * state.s[j] + beta * h[j];
        let denom = sj + lt;
        if !(denom > 0.0) {
            return Err(Error::PrecisionViolation { coordinate: j, value: cfg.n as f64 * denom });
        }
        let mut mj = state.mu[j] - beta * (g[j] + lt * state.mu[j]) / denom;
        if momentum != 0.0 {
            mj += momentum * (state.s[j] + lt) / denom * (state.mu[j] - state.mu_prev[j]);
        }
        s.push(sj);
        mu.push(mj);
    }
    let next = OptimizerState { mu, m: state.m.clone(), s, mu_prev: state.mu.clone(), t: state.t + 1 };
    finish(next, StepReport { theta_sampled: draws.thetas, grad_used: draws.mean, rates })
}

/// Variational online-Newton:
/// `s′ = (1−β)s + β ĥ`, `μ′ = μ − β(ĝ + λ̃μ)/(s′ + λ̃)` at `θ ~ q`.
pub fn von_step(
    state: &OptimizerState,
    cfg: &OptimizerConfig,
    obj: &dyn Objective,
    batch: &[usize],
    rng: &mut SeededRng,
    curvature: Curvature,
) -> Result<(OptimizerState, StepReport)> {
    von_core(state, cfg, obj, batch, rng, curvature, 0.0)
}

/// VON with the Gauss-Newton diagonal.
pub fn vogn_step(
    state: &OptimizerState,
    cfg: &OptimizerConfig,
    obj: &dyn Objective,
    batch: &[usize],
    rng: &mut SeededRng,
) -> Result<(OptimizerState, StepReport)> {
    von_core(state, cfg, obj, batch, rng, Curvature::Ggn, 0.0)
}

/// VON plus natural momentum `γ̄ (s + λ̃)/(s′ + λ̃) ∘ (μ − μ_prev)`, with
/// `ᾱ = β` and `γ̄ = cfg.gamma1`.
pub fn von_momentum_step(
    state: &OptimizerState,
    cfg: &OptimizerConfig,
    obj: &dyn Objective,
    batch: &[usize],
    rng: &mut SeededRng,
    curvature: Curvature,
) -> Result<(OptimizerState, StepReport)> {
    von_core(state, cfg, obj, batch, rng, curvature, cfg.gamma1)
}

/// `s′ = (1−β)s + β ĝ²`, `μ′ = μ − α(ĝ + λ̃μ)/(√s′ + λ̃)` at `θ ~ q`.
pub fn vprop_step(
    state: &OptimizerState,
    cfg: &OptimizerConfig,
    obj: &dyn Objective,
    batch: &[usize],
    rng: &mut SeededRng,
) -> Result<(OptimizerState, StepReport)> {
    check_dim(state, obj)?;
    let rates = cfg.rates_at(state.t);
    let lt = cfg.lambda_tilde();
    let sigma: Vec<f64> = precision_variances(&state.s, cfg)?.into_iter().map(f64::sqrt).collect();
    let draws = perturbed_estimates(obj, &state.mu, &sigma, batch, rng, cfg.mc_samples, GradRequest::MEAN)?;
    let (s, mu) = rms_update(&state.s, &state.mu, &draws.mean.ghat, lt, lt, rates);
    let next = OptimizerState { mu, m: state.m.clone(), s, mu_prev: state.mu.clone(), t: state.t + 1 };
    finish(next, StepReport { theta_sampled: draws.thetas, grad_used: draws.mean, rates })
}

/// `s′ = (1−β)s + β ĝ²`, `θ′ = θ − α(ĝ + l2·θ)/(√s′ + δ)`.
pub fn rmsprop_step(
    state: &OptimizerState,
    cfg: &OptimizerConfig,
    obj: &dyn Objective,
    batch: &[usize],
) -> Result<(OptimizerState, StepReport)> {
    check_dim(state, obj)?;
    let rates = cfg.rates_at(state.t);
    let est = point_estimate(obj, &state.mu, batch)?;
    let (s, mu) = rms_update(&state.s, &state.mu, &est.ghat, cfg.l2, cfg.delta, rates);
    let next = OptimizerState { mu, m: state.m.clone(), s, mu_prev: state.mu.clone(), t: state.t + 1 };
    finish(next, StepReport { theta_sampled: vec![state.mu.clone()], grad_used: est, rates })
}

fn rms_update(s: &[f64], mu: &[f64], g: &[f64], decay: f64, shift: f64, rates: Rates) -> (Vec<f64>, Vec<f64>) {
    let beta = rates.beta;
    let s_new: Vec<f64> = s.iter().zip(g).map(|(s, g)| (1.0 - beta) * s + beta * g * g).collect();
    let mu_new = mu
        .iter()
        .zip(g)
        .zip(&s_new)
        .map(|((m, g), s)| m - rates.alpha * (g + decay * m) / (s.sqrt() + shift))
        .collect();
    (s_new, mu_new)
}

/// AdaGrad-shaped variational optimization with `θ ~ N(μ, 1/s)`:
/// `s′ = s + β ĝ²`, `μ′ = μ − α ĝ/√s′`.
pub fn vadagrad_step(
    state: &OptimizerState,
    cfg: &OptimizerConfig,
    obj: &dyn Objective,
    batch: &[usize],
    rng: &mut SeededRng,
) -> Result<(OptimizerState, StepReport)> {
    check_dim(state, obj)?;
    if let Some(j) = state.s.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument(format!("VadaGrad needs s > 0, coordinate {j} has {}", state.s[j])));
    }
    let rates = cfg.rates_at(state.t);
    let sigma: Vec<f64> = state.s.iter().map(|s| s.sqrt().recip()).collect();
    let draws = perturbed_estimates(obj, &state.mu, &sigma, batch, rng, cfg.mc_samples, GradRequest::MEAN)?;
    let g = &draws.mean.ghat;
    let s: Vec<f64> = state.s.iter().zip(g).map(|(s, g)| s + rates.beta * g * g).collect();
    let mu = state.mu.iter().zip(g).zip(&s).map(|((m, g), s)| m - rates.alpha * g / s.sqrt()).collect();
    let next = OptimizerState { mu, m: state.m.clone(), s, mu_prev: state.mu.clone(), t: state.t + 1 };
    finish(next, StepReport { theta_sampled: draws.thetas, grad_used: draws.mean, rates })
}

/// Reparameterization-gradient VI state with `σ = softplus(ρ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BbviState {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    /// Adam moments for the stacked vector `(μ, ρ)`.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl BbviState {
    /// Starts at `σ² = 1/cfg.init_precision` in every coordinate.
    pub fn new(mu: Vec<f64>, cfg: &OptimizerConfig) -> Result<Self> {
        let sigma = cfg.init_precision.sqrt().recip();
        let rho0 = sigma.exp_m1().ln();
        let p = mu.len();
        let state = Self { mu, rho: vec![rho0; p], m: vec![0.0; 2 * p], v: vec![0.0; 2 * p], t: 1 };
        if state.mu.iter().chain(&state.rho).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial BBVI state".into()));
        }
        Ok(state)
    }

    pub fn posterior(&self) -> Result<GaussianMeanField> {
        GaussianMeanField::new(self.mu.clone(), self.rho.iter().map(|r| softplus(*r).powi(2)).collect())
    }
}

/// Reparameterization gradient of the ELBO w.r.t. `(μ, ρ)` at given noise draws.
///
/// The ELBO is `−N·E_q[f̄(θ)] − KL(q‖N(0, I/λ))` with `f̄` the minibatch
/// mean NLL; each row of `eps` is one draw.
pub fn bbvi_elbo_gradient(
    mu: &[f64],
    rho: &[f64],
    cfg: &OptimizerConfig,
    obj: &dyn Objective,
    batch: &[usize],
    eps: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>, GradientEstimate)> {
    if !(cfg.lambda > 0.0) {
        return Err(Error::InvalidArgument("BBVI needs a proper prior, lambda > 0".into()));
    }
    if eps.is_empty() {
        return Err(Error::InvalidArgument("at least one noise draw is required".into()));
    }
    let p = mu.len();
    let n = cfg.n as f64;
    let sigma: Vec<f64> = rho.iter().map(|r| softplus(*r)).collect();
    let mut gmu = vec![0.0; p];
    let mut gsig = vec![0.0; p];
    let mut mean = GradientEstimate { ghat: vec![0.0; p], per_example: None, ggn_diag: None, hess_diag: None, batch_size: batch.len() };
    let inv = 1.0 / eps.len() as f64;
    for e in eps {
        let theta: Vec<f64> = mu.iter().zip(&sigma).zip(e).map(|((m, s), e)| m + s * e).collect();
        let est = obj.estimate(&theta, batch, GradRequest::MEAN)?;
        for j in 0..p {
            gmu[j] -= inv * n * est.ghat[j];
            gsig[j] -= inv * n * est.ghat[j] * e[j];
        }
        accumulate(&mut mean, &est, inv)?;
    }
    let lam = cfg.lambda;
    let grho = (0..p)
        .map(|j| {
            gmu[j] -= lam * mu[j];
            (gsig[j] - lam * sigma[j]) * sigmoid(rho[j]) + entropy_slope(rho[j])
        })
        .collect();
    if gmu.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("ELBO gradient".into()));
    }
    Ok((gmu, grho, mean))
}

/// `d log softplus(ρ)/dρ = sigmoid(ρ)/softplus(ρ)`, which tends to 1 as
/// `ρ → −∞` where both factors underflow.
fn entropy_slope(rho: f64) -> f64 {
    if rho < -40.0 {
        1.0
    } else {
        sigmoid(rho) / softplus(rho)
    }
}

/// Ascends the reparameterized ELBO with an inner Adam on `(μ, ρ)`.
pub fn bbvi_step(
    state: &BbviState,
    cfg: &OptimizerConfig,
    obj: &dyn Objective,
    batch: &[usize],
    rng: &mut SeededRng,
) -> Result<(BbviState, StepReport)> {
    let p = obj.dim();
    if state.mu.len() != p || state.rho.len() != p || state.m.len() != 2 * p || state.v.len() != 2 * p {
        return Err(Error::DimensionMismatch { expected: p, found: state.mu.len() });
    }
    let rates = cfg.rates_at(state.t);
    let eps: Vec<Vec<f64>> = (0..cfg.mc_samples).map(|_| rng.sample_std_normal(p)).collect();
    let (gmu, grho, est) = bbvi_elbo_gradient(&state.mu, &state.rho, cfg, obj, batch, &eps)?;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.gamma1.powf(t);
    let bc2 = 1.0 - rates.gamma2.powf(t);
    let mut next = state.clone();
    for (k, g) in gmu.iter().chain(&grho).enumerate() {
        let g = -g;
        next.m[k] = cfg.gamma1 * state.m[k] + (1.0 - cfg.gamma1) * g;
        next.v[k] = rates.gamma2 * state.v[k] + (1.0 - rates.gamma2) * g * g;
        let step = rates.alpha * (next.m[k] / bc1) / ((next.v[k] / bc2).sqrt() + cfg.delta);
        if k < p {
            next.mu[k] -= step;
        } else {
            next.rho[k - p] -= step;
        }
    }
    next.t += 1;
    if next.mu.iter().chain(&next.rho).chain(&next.m).chain(&next.v).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("BBVI state after step {}", state.t)));
    }
    let sigma: Vec<f64> = state.rho.iter().map(|r| softplus(*r)).collect();
    let thetas = eps.iter().map(|e| state.mu.iter().zip(&sigma).zip(e).map(|((m, s), e)| m + s * e).collect()).collect();
    Ok((next, StepReport { theta_sampled: thetas, grad_used: est, rates }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Adam,
    Rmsprop,
    Vadam,
    Vprop,
    /// VON with the exact diagonal Hessian.
    Von,
    /// VON with the reparameterization-trick Hessian.
    VonReparam,
    Vogn,
    VonMomentum,
    Vadagrad,
    Bbvi,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Adam,
        Method::Rmsprop,
        Method::Vadam,
        Method::Vprop,
        Method::Von,
        Method::VonReparam,
        Method::Vogn,
        Method::VonMomentum,
        Method::Vadagrad,
        Method::Bbvi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Adam => "adam",
            Method::Rmsprop => "rmsprop",
            Method::Vadam => "vadam",
            Method::Vprop => "vprop",
            Method::Von => "von",
            Method::VonReparam => "von-reparam",
            Method::Vogn => "vogn",
            Method::VonMomentum => "von-momentum",
            Method::Vadagrad => "vadagrad",
            Method::Bbvi => "bbvi",
        }
    }

    pub fn names() -> String {
        Self::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    }

    /// False for the point-estimate baselines.
    pub fn is_variational(self) -> bool {
        !matches!(self, Method::Adam | Method::Rmsprop)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown optimizer {s:?}; valid names: {}", Self::names())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum State {
    Moments(OptimizerState),
    Bbvi(BbviState),
}

impl State {
    pub fn mean(&self) -> &[f64] {
        match self {
            State::Moments(s) => &s.mu,
            State::Bbvi(s) => &s.mu,
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            State::Moments(s) => s.t,
            State::Bbvi(s) => s.t,
        }
    }
}

/// A method together with its configuration; dispatches to the step functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub method: Method,
    pub cfg: OptimizerConfig,
    /// Curvature used by `von-momentum`.
    pub momentum_curvature: Curvature,
}

impl Optimizer {
    pub fn new(method: Method, cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { method, cfg, momentum_curvature: Curvature::Ggn })
    }

    pub fn init(&self, mu0: Vec<f64>) -> Result<State> {
        let cfg = &self.cfg;
        Ok(match self.method {
            Method::Adam | Method::Rmsprop | Method::Vadam => State::Moments(OptimizerState::zeros(mu0)?),
            Method::Vadagrad => {
                let p = mu0.len();
                State::Moments(OptimizerState::new(mu0, vec![cfg.init_precision; p])?)
            }
            Method::Bbvi => State::Bbvi(BbviState::new(mu0, cfg)?),
            _ => State::Moments(OptimizerState::with_precision(mu0, cfg)?),
        })
    }

    pub fn step(
        &self,
        state: &State,
        obj: &dyn Objective,
        batch: &[usize],
        rng: &mut SeededRng,
    ) -> Result<(State, StepReport)> {
        let cfg = &self.cfg;
        match (self.method, state) {
            (Method::Bbvi, State::Bbvi(s)) => bbvi_step(s, cfg, obj, batch, rng).map(|(s, r)| (State::Bbvi(s), r)),
            (Method::Bbvi, _) | (_, State::Bbvi(_)) => {
                Err(Error::InvalidArgument(format!("state does not belong to optimizer {}", self.method)))
            }
            (method, State::Moments(s)) => {
                let out = match method {
                    Method::Adam => adam_step(s, cfg, obj, batch),
                    Method::Rmsprop => rmsprop_step(s, cfg, obj, batch),
                    Method::Vadam => vadam_step(s, cfg, obj, batch, rng),
                    Method::Vprop => vprop_step(s, cfg, obj, batch, rng),
                    Method::Von => von_step(s, cfg, obj, batch, rng, Curvature::ExactDiag),
                    Method::VonReparam => von_step(s, cfg, obj, batch, rng, Curvature::ReparamTrick),
                    Method::Vogn => vogn_step(s, cfg, obj, batch, rng),
                    Method::VonMomentum => von_momentum_step(s, cfg, obj, batch, rng, self.momentum_curvature),
                    Method::Vadagrad => vadagrad_step(s, cfg, obj, batch, rng),
                    Method::Bbvi => unreachable!(),
                }?;
                Ok((State::Moments(out.0), out.1))
            }
        }
    }

    /// Current Gaussian approximation. Point methods report a near-degenerate
    /// Gaussian with variance `f64::MIN_POSITIVE`.
    pub fn posterior(&self, state: &State) -> Result<GaussianMeanField> {
        match state {
            State::Bbvi(s) => s.posterior(),
            State::Moments(s) => match self.method {
                Method::Adam | Method::Rmsprop => {
                    GaussianMeanField::new(s.mu.clone(), vec![f64::MIN_POSITIVE; s.dim()])
                }
                Method::Vadagrad => GaussianMeanField::new(s.mu.clone(), s.s.iter().map(|v| 1.0 / v).collect()),
                _ => s.variational_posterior(&self.cfg),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DiagonalQuadratic, ScriptedObjective};

    fn cfg() -> OptimizerConfig {
        OptimizerConfig { alpha: 0.1, gamma1: 0.9, gamma2: 0.999, delta: 1e-8, ..Default::default() }
    }

    fn constant(g: f64) -> ScriptedObjective {
        ScriptedObjective::constant(vec![g], 1).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        for bad in [
            OptimizerConfig { alpha: 0.0, ..Default::default() },
            OptimizerConfig { gamma1: 1.0, ..Default::default() },
            OptimizerConfig { gamma2: 1.0, ..Default::default() },
            OptimizerConfig { lambda: -1.0, ..Default::default() },
            OptimizerConfig { n: 0, ..Default::default() },
            OptimizerConfig { mc_samples: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn decayed_rates_start_at_base() {
        let c = OptimizerConfig { decay: true, alpha: 0.1, beta: 0.2, gamma2: 0.9, ..Default::default() };
        let r = c.rates_at(1);
        assert_eq!((r.alpha, r.gamma2), (0.1, 0.9));
        assert!((r.beta - 0.2).abs() < 1e-15);
        let r2 = c.rates_at(2);
        assert_eq!(r2.alpha, 0.05);
        assert!((r2.beta - 0.1).abs() < 1e-15);
        assert!((r2.gamma2 - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient() {
        let s = OptimizerState::zeros(vec![0.3]).unwrap();
        let (n, _) = adam_step(&s, &cfg(), &constant(0.0), &[0]).unwrap();
        assert_eq!(n.mu, vec![0.3]);
        assert_eq!(n.t, 2);
    }

    #[test]
    fn adam_first_step() {
        let s = OptimizerState::zeros(vec![0.0]).unwrap();
        let (n, _) = adam_step(&s, &cfg(), &constant(1.0), &[0]).unwrap();
        assert!((n.mu[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-16);
    }

    #[test]
    fn bias_correction_identities() {
        let c = cfg();
        let obj = ScriptedObjective::new(vec![vec![1.0], vec![-1.0], vec![2.0], vec![0.5]], vec![0.0], 1).unwrap();
        let mut s = OptimizerState::zeros(vec![0.0]).unwrap();
        for _ in 0..4 {
            let t = s.t as f64;
            let (n, _) = adam_step(&s, &c, &obj, &[0]).unwrap();
            let m_hat = n.m[0] / (1.0 - c.gamma1.powf(t));
            let s_hat = n.s[0] / (1.0 - c.gamma2.powf(t));
            // Division then multiplication may round once each way.
            assert!((m_hat * (1.0 - c.gamma1.powf(t)) - n.m[0]).abs() <= f64::EPSILON * n.m[0].abs());
            assert!((s_hat * (1.0 - c.gamma2.powf(t)) - n.s[0]).abs() <= f64::EPSILON * n.s[0]);
            s = n;
        }
    }

    #[test]
    fn ngvi_examples() {
        let q = GaussianMeanField::new(vec![0.5], vec![1.0]).unwrap();
        assert_eq!(ngvi_step(&q, 1.0, &[0.0], &[0.0]).unwrap(), q);
        let out = ngvi_step(&q, 1.0, &[0.0], &[-0.5]).unwrap();
        assert_eq!(out.sigma2(), &[0.5]);
        assert!(matches!(ngvi_step(&q, 1.0, &[0.0], &[1.0]), Err(Error::PrecisionViolation { coordinate: 0, .. })));
        // The updated variance scales the mean step.
        let out = ngvi_step(&q, 1.0, &[2.0], &[-0.5]).unwrap();
        assert_eq!(out.mu(), &[0.5 + 0.5 * 2.0]);
    }

    #[test]
    fn von_fixed_point() {
        let c = OptimizerConfig { lambda: 0.0, beta: 0.3, ..cfg() };
        let obj = ScriptedObjective::new(vec![vec![0.0, 0.0]], vec![2.0, 0.5], 1).unwrap();
        let s = OptimizerState::new(vec![1.0, -1.0], vec![2.0, 0.5]).unwrap();
        let (n, _) = von_step(&s, &c, &obj, &[0], &mut SeededRng::new(1), Curvature::ExactDiag).unwrap();
        assert_eq!(n.mu, s.mu);
        assert_eq!(n.s, s.s);
    }

    #[test]
    fn von_geometric_convergence_of_s() {
        let c = OptimizerConfig { lambda: 1.0, beta: 0.25, ..cfg() };
        let obj = ScriptedObjective::new(vec![vec![0.0]], vec![1.0], 1).unwrap();
        let mut s = OptimizerState::new(vec![0.0], vec![5.0]).unwrap();
        let mut rng = SeededRng::new(2);
        for k in 1..=20 {
            s = von_step(&s, &c, &obj, &[0], &mut rng, Curvature::ExactDiag).unwrap().0;
            let expected = 1.0 + 4.0 * 0.75f64.powi(k);
            assert!((s.s[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn von_precision_violation() {
        let c = OptimizerConfig { lambda: 0.0, beta: 1.0, ..cfg() };
        let obj = ScriptedObjective::new(vec![vec![0.0]], vec![-1.0], 1).unwrap();
        let s = OptimizerState::new(vec![0.0], vec![1.0]).unwrap();
        let r = von_step(&s, &c, &obj, &[0], &mut SeededRng::new(0), Curvature::ExactDiag);
        assert!(matches!(r, Err(Error::PrecisionViolation { coordinate: 0, .. })));
    }

    #[test]
    fn backtracking_rules() {
        assert_eq!(backtrack_rate(&[1.0, 1.0], &[2.0, 0.0], 0.5, 0.9).unwrap(), 0.5);
        let b = backtrack_rate(&[1.0, 2.0], &[-3.0, 1.0], 0.5, 0.9).unwrap();
        assert!((b - 0.9 * 0.25).abs() < 1e-15);
        assert!((1.0 - b) * 1.0 + b * -3.0 > 0.0);
        assert!(matches!(backtrack_rate(&[0.0, 1.0], &[-1.0, 1.0], 0.5, 0.9), Err(Error::StalledStep { coordinate: 0 })));
    }

    #[test]
    fn vogn_single_example_matches_gradient_magnitude() {
        let mut rng_a = SeededRng::new(5);
        let mut rng_b = SeededRng::new(5);
        let c = OptimizerConfig { n: 10, beta: 0.2, ..cfg() };
        let obj = DiagonalQuadratic { diag: vec![1.5, 0.5] };
        let s = OptimizerState::with_precision(vec![0.4, -0.2], &c).unwrap();
        let a = vogn_step(&s, &c, &obj, &[0], &mut rng_a).unwrap().0;
        let b = von_step(&s, &c, &obj, &[0], &mut rng_b, Curvature::GradMagnitude).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn vprop_hand_trace() {
        let c = OptimizerConfig { alpha: 0.1, beta: 0.1, lambda: 1.0, n: 2, ..cfg() };
        let s = OptimizerState::new(vec![0.0], vec![0.0]).unwrap();
        let (n, _) = vprop_step(&s, &c, &constant(2.0), &[0], &mut SeededRng::new(3)).unwrap();
        assert!((n.s[0] - 0.4).abs() < 1e-15);
        let expected = -0.1 * 2.0 / (0.4f64.sqrt() + 0.5);
        assert!((n.mu[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn vprop_zero_gradient_without_prior() {
        let c = OptimizerConfig { lambda: 0.0, beta: 0.1, ..cfg() };
        let s = OptimizerState::new(vec![0.7], vec![1.0]).unwrap();
        let (n, _) = vprop_step(&s, &c, &constant(0.0), &[0], &mut SeededRng::new(3)).unwrap();
        assert_eq!(n.mu, vec![0.7]);
    }

    #[test]
    fn rmsprop_hand_trace_and_vprop_identity() {
        let c = OptimizerConfig { alpha: 0.1, beta: 0.5, delta: 0.0, ..cfg() };
        let s = OptimizerState::zeros(vec![0.0]).unwrap();
        let (n, _) = rmsprop_step(&s, &c, &constant(2.0), &[0]).unwrap();
        assert!((n.mu[0] - (-0.1 * 2.0 / 2f64.sqrt())).abs() < 1e-16);

        let vc = OptimizerConfig { alpha: 0.1, beta: 0.3, lambda: 2.0, n: 4, ..cfg() };
        let rc = OptimizerConfig { delta: vc.lambda_tilde(), l2: vc.lambda_tilde(), ..vc };
        let obj = ScriptedObjective::new(vec![vec![1.0, -0.5], vec![0.3, 2.0]], vec![0.0; 2], 1).unwrap();
        let obj2 = ScriptedObjective::new(vec![vec![1.0, -0.5], vec![0.3, 2.0]], vec![0.0; 2], 1).unwrap();
        let mut a = OptimizerState::new(vec![0.2, 0.1], vec![0.5, 0.5]).unwrap();
        let mut b = a.clone();
        let mut rng = SeededRng::new(1);
        for _ in 0..2 {
            a = vprop_step(&a, &vc, &obj, &[0], &mut rng).unwrap().0;
            b = rmsprop_step(&b, &rc, &obj2, &[0]).unwrap().0;
            assert_eq!(a.mu, b.mu);
            assert_eq!(a.s, b.s);
        }
    }

    #[test]
    fn vadam_zero_gradient_decays_s() {
        let c = OptimizerConfig { lambda: 1.0, n: 10, gamma2: 0.9, ..cfg() };
        let mut s = OptimizerState::new(vec![0.0], vec![4.0]).unwrap();
        let mut rng = SeededRng::new(0);
        for k in 1..=5 {
            s = vadam_step(&s, &c, &constant(0.0), &[0], &mut rng).unwrap().0;
            assert_eq!(s.mu, vec![0.0]);
            assert!((s.s[0] - 4.0 * 0.9f64.powi(k)).abs() < 1e-14);
        }
    }

    #[test]
    fn vadam_rejects_improper_start() {
        let c = OptimizerConfig { lambda: 0.0, ..cfg() };
        let s = OptimizerState::zeros(vec![0.0]).unwrap();
        assert!(vadam_step(&s, &c, &constant(1.0), &[0], &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn vadagrad_examples() {
        let c = OptimizerConfig { alpha: 1.0, beta: 1.0, ..cfg() };
        let s = OptimizerState::new(vec![0.0], vec![1.0]).unwrap();
        let (n, _) = vadagrad_step(&s, &c, &constant(3.0), &[0], &mut SeededRng::new(0)).unwrap();
        assert_eq!(n.s, vec![10.0]);
        assert!((n.mu[0] + 3.0 / 10f64.sqrt()).abs() < 1e-16);
        let (z, _) = vadagrad_step(&s, &c, &constant(0.0), &[0], &mut SeededRng::new(0)).unwrap();
        assert_eq!((z.mu.clone(), z.s.clone()), (s.mu.clone(), s.s.clone()));
        let bad = OptimizerState::new(vec![0.0], vec![0.0]).unwrap();
        assert!(vadagrad_step(&bad, &c, &constant(1.0), &[0], &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn momentum_off_is_bitwise_von() {
        let c = OptimizerConfig { gamma1: 0.0, n: 5, beta: 0.2, ..cfg() };
        let obj = DiagonalQuadratic { diag: vec![1.0, 3.0] };
        let mut a = OptimizerState::with_precision(vec![1.0, 2.0], &c).unwrap();
        let mut b = a.clone();
        let (mut ra, mut rb) = (SeededRng::new(4), SeededRng::new(4));
        for _ in 0..20 {
            a = von_momentum_step(&a, &c, &obj, &[0], &mut ra, Curvature::ExactDiag).unwrap().0;
            b = von_step(&b, &c, &obj, &[0], &mut rb, Curvature::ExactDiag).unwrap().0;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn momentum_with_constant_s_is_heavy_ball() {
        // s already equals the Hessian, so (s + λ̃)/(s′ + λ̃) = 1.
        let c = OptimizerConfig { gamma1: 0.5, lambda: 1.0, n: 1, beta: 0.1, ..cfg() };
        let obj = ScriptedObjective::new(vec![vec![0.4]], vec![2.0], 1).unwrap();
        let mut s = OptimizerState::new(vec![1.0], vec![2.0]).unwrap();
        s.mu_prev = vec![0.8];
        let (n, _) = von_momentum_step(&s, &c, &obj, &[0], &mut SeededRng::new(0), Curvature::ExactDiag).unwrap();
        let expected = 1.0 - 0.1 * (0.4 + 1.0) / 3.0 + 0.5 * 0.2;
        assert!((n.mu[0] - expected).abs() < 1e-15);
        assert_eq!(n.s, vec![2.0]);
    }

    #[test]
    fn bbvi_kl_gradient_vanishes_at_prior() {
        let c = OptimizerConfig { lambda: 4.0, n: 7, ..cfg() };
        let obj = ScriptedObjective::constant(vec![0.0, 0.0], 7).unwrap();
        let rho = vec![0.5f64.exp_m1().ln(); 2];
        let (gmu, grho, _) = bbvi_elbo_gradient(&[0.0, 0.0], &rho, &c, &obj, &[0], &[vec![0.3, -1.0]]).unwrap();
        assert_eq!(gmu, vec![0.0, 0.0]);
        assert!(grho.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        let err = "sgd".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("vadam") && err.contains("vogn"));
    }

    #[test]
    fn state_json_snapshot() {
        let s = OptimizerState::new(vec![1.0], vec![2.0]).unwrap();
        let text = serde_json::to_string(&State::Moments(s.clone())).unwrap();
        for key in ["\"mu\"", "\"m\"", "\"s\"", "\"mu_prev\"", "\"t\""] {
            assert!(text.contains(key));
        }
        assert_eq!(serde_json::from_str::<State>(&text).unwrap(), State::Moments(s));
    }
}
