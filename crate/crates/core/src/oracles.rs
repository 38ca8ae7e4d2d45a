//! Reference solutions used to validate the optimizers.
//!
//! * exact enumeration of the expected squared minibatch gradient,
//! * the closed-form posterior and evidence of Bayesian linear regression,
//! * a deterministic optimizer of the quadrature ELBO for GLMs,
//! * fixed-point residuals of the variational objective,
//! * exact-expectation runs of the VON and Vprop recursions.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Dataset, GradRequest, Model, ModelKind};
use crate::numkit::{gauss_hermite, norm2, SeededRng};
use crate::objectives::{quadrature_elbo_with_grad, DEFAULT_QUADRATURE_ORDER};
use crate::posteriors::{GaussianMeanField, IsotropicGaussianPrior};

/// Largest `N` accepted by [`theorem1_enumerate`].
pub const ENUMERATION_BOUND: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub n: usize,
    pub m: usize,
    /// `E_{p(M)}[ĝ_j²]` by enumeration.
    pub lhs: Vec<f64>,
    /// `w h_j + (1 − w) g_j²`.
    pub rhs: Vec<f64>,
    pub w: f64,
    pub max_abs_diff: f64,
}

/// `w = (1/M)(N − M)/(N − 1)`, with `w = 1` when `N = 1`.
pub fn theorem1_weight(n: usize, m: usize) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    (n - m) as f64 / ((m * (n - 1)) as f64)
}

/// Visits every `m`-subset of `0..n` in lexicographic order.
fn for_each_combination(n: usize, m: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        f(&idx);
        let mut i = m;
        while i > 0 && idx[i - 1] == i - 1 + n - m {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..m {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Expected squared minibatch gradient over all `C(N, M)` minibatches
/// drawn uniformly without replacement, against its closed form.
pub fn theorem1_enumerate(model: &Model, theta: &[f64], data: &Dataset, m: usize) -> Result<Theorem1Report> {
    let n = data.len();
    if n > ENUMERATION_BOUND {
        return Err(Error::EnumerationBound { n, max: ENUMERATION_BOUND });
    }
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("minibatch size {m} must lie in 1..={n}")));
    }
    let all = data.all_indices();
    let want = GradRequest { per_example: true, ggn: true, exact_hessian: false };
    let full = model.minibatch_grad(theta, data, &all, want)?;
    let rows = full.per_example.expect("requested");
    let h = full.ggn_diag.expect("requested");
    let g = full.ghat;
    let p = g.len();
    let mut lhs = vec![0.0; p];
    let mut count = 0usize;
    let mut ghat = vec![0.0; p];
    for_each_combination(n, m, |batch| {
        ghat.iter_mut().for_each(|v| *v = 0.0);
        for &i in batch {
            for (a, r) in ghat.iter_mut().zip(&rows[i]) {
                *a += r;
            }
        }
        for (l, a) in lhs.iter_mut().zip(&ghat) {
            let mean = a / m as f64;
            *l += mean * mean;
        }
        count += 1;
    });
    lhs.iter_mut().for_each(|v| *v /= count as f64);
    let w = theorem1_weight(n, m);
    let rhs: Vec<f64> = h.iter().zip(&g).map(|(h, g)| w * h + (1.0 - w) * g * g).collect();
    let max_abs_diff = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(Theorem1Report { n, m, lhs, rhs, w, max_abs_diff })
}

fn design(data: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
    (
        DMatrix::from_row_slice(data.len(), data.dim(), data.features()),
        DVector::from_column_slice(data.targets()),
    )
}

/// Exact Gaussian posterior of Bayesian linear regression.
#[derive(Debug, Clone)]
pub struct ConjugatePosterior {
    pub mean: Vec<f64>,
    pub precision: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub log_evidence: f64,
}

/// Posterior for `y ~ N(Xθ, I/τ)`, `θ ~ N(0, I/λ)`:
/// `Λ = λI + τXᵀX`, `μ = τΛ⁻¹Xᵀy`, with the log marginal likelihood.
pub fn conjugate_posterior(data: &Dataset, lambda: f64, tau: f64) -> Result<ConjugatePosterior> {
    if !(lambda > 0.0 && tau > 0.0) {
        return Err(Error::InvalidArgument(format!("need lambda > 0 and tau > 0, got ({lambda}, {tau})")));
    }
    let (x, y) = design(data);
    let (n, d) = (data.len() as f64, data.dim());
    let precision = DMatrix::identity(d, d) * lambda + x.transpose() * &x * tau;
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NonFinite("posterior precision is not positive definite".into()))?;
    let b = x.transpose() * &y * tau;
    let mean = chol.solve(&b);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_evidence = -0.5 * n * (2.0 * std::f64::consts::PI).ln() + 0.5 * n * tau.ln() + 0.5 * d as f64 * lambda.ln()
        - 0.5 * log_det
        - 0.5 * tau * y.dot(&y)
        + 0.5 * b.dot(&mean);
    Ok(ConjugatePosterior {
        mean: mean.iter().copied().collect(),
        covariance: chol.inverse(),
        precision,
        log_evidence,
    })
}

/// Optimal factorized Gaussian for the conjugate posterior: the exact mean
/// and `σ_j² = 1/Λ_jj`.
pub fn conjugate_meanfield_optimum(data: &Dataset, lambda: f64, tau: f64) -> Result<GaussianMeanField> {
    let post = conjugate_posterior(data, lambda, tau)?;
    let sigma2 = post.precision.diagonal().iter().map(|v| 1.0 / v).collect();
    GaussianMeanField::new(post.mean, sigma2)
}

pub fn log_evidence(data: &Dataset, lambda: f64, tau: f64) -> Result<f64> {
    Ok(conjugate_posterior(data, lambda, tau)?.log_evidence)
}

/// Deterministic optimizers for [`mf_exact_glm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MfSchedule {
    /// L-BFGS on `(μ, log σ)` with Armijo back-tracking.
    Lbfgs,
    /// Damped natural-gradient fixed-point iteration.
    NaturalGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfExactResult {
    pub q: GaussianMeanField,
    pub elbo: f64,
    /// Euclidean norm of the gradient w.r.t. `(μ, log σ)`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const MF_EXACT_TOLERANCE: f64 = 1e-8;

struct QuadObjective<'a> {
    model: &'a Model,
    data: &'a Dataset,
    prior: IsotropicGaussianPrior,
    rule: crate::numkit::QuadratureRule,
}

impl QuadObjective<'_> {
    /// Negative ELBO and its gradient in `x = (μ, log σ)`.
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = x.len() / 2;
        let sigma2: Vec<f64> = x[p..].iter().map(|l| (2.0 * l).exp()).collect();
        let q = GaussianMeanField::new(x[..p].to_vec(), sigma2)?;
        let out = quadrature_elbo_with_grad(&q, self.model, self.data, &self.prior, &self.rule)?;
        let mut g: Vec<f64> = out.grad_mu.iter().map(|v| -v).collect();
        g.extend(out.grad_sigma2.iter().zip(q.sigma2()).map(|(gs, s2)| -2.0 * s2 * gs));
        Ok((-out.value, g))
    }
}

fn pack(q: &GaussianMeanField) -> Vec<f64> {
    let mut x = q.mu().to_vec();
    x.extend(q.sigma2().iter().map(|v| 0.5 * v.ln()));
    x
}

fn unpack(x: &[f64]) -> Result<GaussianMeanField> {
    let p = x.len() / 2;
    GaussianMeanField::new(x[..p].to_vec(), x[p..].iter().map(|l| (2.0 * l).exp()).collect())
}

/// Maximizes the quadrature ELBO of a GLM over mean-field Gaussians,
/// starting from the prior. Exhausting `budget` iterations is reported
/// through `converged = false`, not as an error.
pub fn mf_exact_glm(model: &Model, data: &Dataset, lambda: f64, budget: usize) -> Result<MfExactResult> {
    mf_exact_glm_with(model, data, lambda, budget, MfSchedule::Lbfgs, None)
}

pub fn mf_exact_glm_with(
    model: &Model,
    data: &Dataset,
    lambda: f64,
    budget: usize,
    schedule: MfSchedule,
    start: Option<&GaussianMeanField>,
) -> Result<MfExactResult> {
    if !model.is_glm() {
        return Err(Error::Unsupported(format!("mf-exact needs a GLM, got {}", model.kind().name())));
    }
    let prior = IsotropicGaussianPrior::new(lambda)?;
    let obj = QuadObjective { model, data, prior, rule: gauss_hermite(DEFAULT_QUADRATURE_ORDER)? };
    let x0 = match start {
        Some(q) => pack(q),
        None => pack(&prior.as_mean_field(model.param_dim())),
    };
    let (x, f, g, iterations) = match schedule {
        MfSchedule::Lbfgs => lbfgs(&obj, x0, budget)?,
        MfSchedule::NaturalGradient => natural_fixed_point(&obj, x0, budget)?,
    };
    let grad_norm = norm2(&g);
    Ok(MfExactResult { q: unpack(&x)?, elbo: -f, grad_norm, iterations, converged: grad_norm <= MF_EXACT_TOLERANCE })
}

type Solution = (Vec<f64>, f64, Vec<f64>, usize);

fn lbfgs(obj: &QuadObjective, mut x: Vec<f64>, budget: usize) -> Result<Solution> {
    const MEMORY: usize = 10;
    let (mut f, mut g) = obj.eval(&x)?;
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    for it in 0..budget {
        if norm2(&g) <= MF_EXACT_TOLERANCE {
            return Ok((x, f, g, it));
        }
        // Two-loop recursion.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &d);
            axpy(&mut d, -a, y);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            axpy(&mut d, a - b, s);
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + step * d).collect();
            if let Ok((ft, gt)) = obj.eval(&trial) {
                // Near the optimum the decrease drops below rounding; accept a
                // step that leaves f unchanged to rounding but shrinks the gradient.
                let flat = (ft - f).abs() <= 1e-14 * f.abs().max(1.0) && norm2(&gt) < norm2(&g);
                if ft <= f + 1e-4 * step * slope || flat {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            return Ok((x, f, g, it));
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if hist.len() == MEMORY {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        f = fn_;
        g = gn;
    }
    Ok((x, f, g, budget))
}

/// Natural-gradient iteration: the precision moves toward
/// `λ + Σ_i E_q[f_i″] x_i²` and the mean takes a `σ²`-preconditioned step,
/// with the rate halved whenever the ELBO would decrease.
fn natural_fixed_point(obj: &QuadObjective, mut x: Vec<f64>, budget: usize) -> Result<Solution> {
    let p = x.len() / 2;
    let (mut f, mut g) = obj.eval(&x)?;
    let mut rate: f64 = 0.5;
    for it in 0..budget {
        if norm2(&g) <= MF_EXACT_TOLERANCE {
            return Ok((x, f, g, it));
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = x.clone();
            for j in 0..p {
                let s2 = (2.0 * x[p + j]).exp();
                // ∂(−L)/∂log σ = −2σ² ∂L/∂σ², so ∂L/∂σ² = −g/(2σ²).
                let grad_s2 = -g[p + j] / (2.0 * s2);
                let prec = 1.0 / s2 - 2.0 * rate * grad_s2;
                if !(prec > 0.0) {
                    trial.clear();
                    break;
                }
                let v = 1.0 / prec;
                trial[j] = x[j] - rate * v * g[j];
                trial[p + j] = 0.5 * v.ln();
            }
            if !trial.is_empty() {
                if let Ok((ft, gt)) = obj.eval(&trial) {
                    if ft <= f {
                        x = trial;
                        f = ft;
                        g = gt;
                        accepted = true;
                        rate = (rate * 1.5).min(1.0);
                        break;
                    }
                }
            }
            rate *= 0.5;
        }
        if !accepted {
            return Ok((x, f, g, it));
        }
    }
    Ok((x, f, g, budget))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// How expectations under `q` are computed in [`fixed_point_residual`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expectation {
    /// Closed form; linear regression only.
    ExactConjugate,
    /// Monte Carlo with the given sample count and seed.
    Mc { samples: usize, seed: u64 },
}

/// Stationarity residuals of the ELBO:
/// `N·E_q[∇f] + λμ` and `N·E_q[diag ∇²f] + λ − σ⁻²`, with `f` the mean NLL.
pub fn fixed_point_residual(
    q: &GaussianMeanField,
    model: &Model,
    data: &Dataset,
    lambda: f64,
    mode: Expectation,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let all = data.all_indices();
    let n = data.len() as f64;
    let (eg, eh) = match mode {
        Expectation::ExactConjugate => {
            if !matches!(model.kind(), ModelKind::LinearRegression { .. }) {
                return Err(Error::Unsupported("exact expectations need linear regression".into()));
            }
            // ∇f is affine and ∇²f constant in θ.
            let est = model.minibatch_grad(q.mu(), data, &all, GradRequest::HESSIAN)?;
            (est.ghat, est.hess_diag.expect("requested"))
        }
        Expectation::Mc { samples, seed } => {
            if samples == 0 {
                return Err(Error::InvalidArgument("need at least one sample".into()));
            }
            let mut rng = SeededRng::new(seed);
            let thetas: Vec<Vec<f64>> = (0..samples).map(|_| q.sample(&mut rng)).collect();
            let ests = thetas
                .par_iter()
                .map(|t| model.minibatch_grad(t, data, &all, GradRequest::HESSIAN))
                .collect::<Result<Vec<_>>>()?;
            let p = q.dim();
            let (mut eg, mut eh) = (vec![0.0; p], vec![0.0; p]);
            for e in &ests {
                axpy(&mut eg, 1.0 / samples as f64, &e.ghat);
                axpy(&mut eh, 1.0 / samples as f64, e.hess_diag.as_ref().expect("requested"));
            }
            (eg, eh)
        }
    };
    let mean_res = eg.iter().zip(q.mu()).map(|(g, m)| n * g + lambda * m).collect();
    let prec_res = eh.iter().zip(q.sigma2()).map(|(h, s2)| n * h + lambda - 1.0 / s2).collect();
    Ok((mean_res, prec_res))
}

/// Mean-step shape of an exact-expectation recursion on linear regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExactUpdate {
    /// `μ′ = μ − β(g + λ̃μ)/(s′ + λ̃)`.
    Von,
    /// `μ′ = μ − α(g + λ̃μ)/(s′ + λ̃)`.
    VpropNoSqrt,
    /// `μ′ = μ − α(g + λ̃μ)/(√s′ + λ̃)`.
    VpropSqrt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactRun {
    pub q: GaussianMeanField,
    pub s: Vec<f64>,
    pub steps: usize,
    /// Largest `|Δμ|` of the final step.
    pub last_change: f64,
}

/// Runs `s′ = (1−β)s + β E_q[diag ∇²f]` together with the chosen mean step,
/// replacing every stochastic quantity by its exact expectation under `q`.
/// Stops once `|Δμ|` and `|Δs|` fall below `tol` or after `max_steps`.
#[allow(clippy::too_many_arguments)]
pub fn run_exact_linear(
    data: &Dataset,
    lambda: f64,
    tau: f64,
    update: ExactUpdate,
    alpha: f64,
    beta: f64,
    s0: f64,
    max_steps: usize,
    tol: f64,
) -> Result<ExactRun> {
    let model = Model::new(ModelKind::LinearRegression { noise_precision: tau }, data.dim())?;
    let n = data.len() as f64;
    let lt = lambda / n;
    let all = data.all_indices();
    let p = data.dim();
    let h = model.minibatch_grad(&vec![0.0; p], data, &all, GradRequest::HESSIAN)?.hess_diag.expect("requested");
    let mut mu = vec![0.0; p];
    let mut s = vec![s0; p];
    let mut steps = 0;
    let mut last_change = f64::INFINITY;
    while steps < max_steps {
        let g = model.minibatch_grad(&mu, data, &all, GradRequest::MEAN)?.ghat;
        let mut dmu: f64 = 0.0;
        let mut ds: f64 = 0.0;
        for j in 0..p {
            let sj = (1.0 - beta) * s[j] + beta * h[j];
            let num = g[j] + lt * mu[j];
            let step = match update {
                ExactUpdate::Von => beta * num / (sj + lt),
                ExactUpdate::VpropNoSqrt => alpha * num / (sj + lt),
                ExactUpdate::VpropSqrt => alpha * num / (sj.sqrt() + lt),
            };
            mu[j] -= step;
            dmu = dmu.max(step.abs());
            ds = ds.max((sj - s[j]).abs());
            s[j] = sj;
        }
        steps += 1;
        last_change = dmu;
        if !mu.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("exact recursion diverged at step {steps}")));
        }
        if dmu <= tol && ds <= tol {
            break;
        }
    }
    let sigma2 = s.iter().map(|v| 1.0 / (n * (v + lt))).collect();
    Ok(ExactRun { q: GaussianMeanField::new(mu, sigma2)?, s, steps, last_change })
}
