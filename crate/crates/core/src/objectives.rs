//! ELBO estimators and predictive metrics.
//!
//! The ELBO is `L(μ, σ²) = Σ_i E_q[log p(y_i | θ)] − KL(q ‖ p)` with the
//! isotropic Gaussian prior `p = N(0, I/λ)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Dataset, Model, ModelKind, Task};
use crate::numkit::{gauss_hermite, logsumexp, sigmoid, softplus, QuadratureRule, SeededRng};
use crate::posteriors::{GaussianMeanField, IsotropicGaussianPrior};

pub const DEFAULT_QUADRATURE_ORDER: usize = 32;
pub const MIN_QUADRATURE_ORDER: usize = 16;

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    /// Nats.
    pub value: f64,
    /// Zero for deterministic estimates.
    pub std_error: f64,
    pub samples_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub test_log_loss: f64,
    pub test_rmse: f64,
    pub test_log_likelihood: f64,
    pub train_neg_elbo: f64,
}

fn check_q(q: &GaussianMeanField, model: &Model, data: &Dataset) -> Result<()> {
    if q.dim() != model.param_dim() {
        return Err(Error::DimensionMismatch { expected: model.param_dim(), found: q.dim() });
    }
    if data.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), found: data.dim() });
    }
    Ok(())
}

/// Draws `count` samples from `q`, in order, from `rng`.
fn draw(q: &GaussianMeanField, rng: &mut SeededRng, count: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| q.sample(rng)).collect()
}

/// Monte Carlo ELBO: the average of `−Σ_i f_i(θ_s)` over `S` draws minus
/// the closed-form KL. The standard error comes from the `S` likelihood terms.
pub fn elbo_mc(
    q: &GaussianMeanField,
    model: &Model,
    data: &Dataset,
    prior: &IsotropicGaussianPrior,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<ElboEstimate> {
    check_q(q, model, data)?;
    if samples == 0 {
        return Err(Error::InvalidArgument("elbo_mc needs S >= 1".into()));
    }
    let mut terms = Vec::with_capacity(samples);
    let mut left = samples;
    while left > 0 {
        let k = left.min(CHUNK);
        let thetas = draw(q, rng, k);
        let chunk: Vec<f64> = thetas.par_iter().map(|t| -model.sum_nll(t, data)).collect();
        terms.extend(chunk);
        left -= k;
    }
    if let Some(i) = terms.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("log-likelihood at sample {i}")));
    }
    // Shifting by the first term keeps identical terms at zero spread.
    let s = samples as f64;
    let shift = terms[0];
    let mean_dev = terms.iter().map(|v| v - shift).sum::<f64>() / s;
    let std_error = if samples > 1 {
        let var = terms.iter().map(|v| (v - shift - mean_dev).powi(2)).sum::<f64>() / (s - 1.0);
        (var / s).sqrt()
    } else {
        0.0
    };
    Ok(ElboEstimate { value: shift + mean_dev - prior.kl_from(q), std_error, samples_used: samples })
}

/// NLL of a GLM as a function of the activation: `(f, f′, f″)`.
fn glm_terms(kind: ModelKind, a: f64, y: f64) -> (f64, f64, f64) {
    match kind {
        ModelKind::LogisticRegression => {
            let p = sigmoid(a);
            (softplus(-y * a), -y * sigmoid(-y * a), p * (1.0 - p))
        }
        ModelKind::LinearRegression { noise_precision: tau } => {
            let r = a - y;
            (0.5 * tau * r * r + 0.5 * (2.0 * std::f64::consts::PI / tau).ln(), tau * r, tau)
        }
        _ => unreachable!("checked by caller"),
    }
}

/// Quadrature ELBO with its gradients w.r.t. `μ` and `σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureElbo {
    pub value: f64,
    pub grad_mu: Vec<f64>,
    pub grad_sigma2: Vec<f64>,
}

/// Exact-up-to-quadrature ELBO for a GLM. Each activation `a_i = x_iᵀθ` is
/// Gaussian under `q` with mean `x_iᵀμ` and variance `Σ_j x_ij² σ_j²`, so
/// `E_q[log p(y_i|a_i)]` is a 1-D Gauss-Hermite integral.
pub fn quadrature_elbo_with_grad(
    q: &GaussianMeanField,
    model: &Model,
    data: &Dataset,
    prior: &IsotropicGaussianPrior,
    rule: &QuadratureRule,
) -> Result<QuadratureElbo> {
    if !model.is_glm() {
        return Err(Error::Unsupported(format!("quadrature ELBO needs a GLM, got {}", model.kind().name())));
    }
    check_q(q, model, data)?;
    let kind = model.kind();
    let p = q.dim();
    let (mu, s2) = (q.mu(), q.sigma2());
    let rows: Vec<(f64, Vec<f64>)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = data.row(i);
            let y = data.target(i);
            let mean: f64 = x.iter().zip(mu).map(|(x, m)| x * m).sum();
            let var: f64 = x.iter().zip(s2).map(|(x, v)| x * x * v).sum();
            let mut ef = 0.0;
            let mut ed1 = 0.0;
            let mut ed2 = 0.0;
            let scale = (2.0 * var).sqrt();
            for (z, w) in rule.nodes().iter().zip(rule.weights()) {
                let (f, d1, d2) = glm_terms(kind, mean + scale * z, y);
                ef += w * f;
                ed1 += w * d1;
                ed2 += w * d2;
            }
            let norm = std::f64::consts::PI.sqrt();
            (ef / norm, vec![ed1 / norm, ed2 / norm])
        })
        .collect();
    let lam = prior.lambda();
    let mut value = -prior.kl_from(q);
    let mut grad_mu: Vec<f64> = mu.iter().map(|m| -lam * m).collect();
    let mut grad_sigma2: Vec<f64> = s2.iter().map(|v| -0.5 * (lam - 1.0 / v)).collect();
    for (i, (ef, d)) in rows.iter().enumerate() {
        value -= ef;
        let x = data.row(i);
        for j in 0..p {
            grad_mu[j] -= d[0] * x[j];
            grad_sigma2[j] -= 0.5 * d[1] * x[j] * x[j];
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("quadrature ELBO".into()));
    }
    Ok(QuadratureElbo { value, grad_mu, grad_sigma2 })
}

/// Deterministic GLM ELBO with `K` Gauss-Hermite nodes per example.
pub fn elbo_quadrature_glm(
    q: &GaussianMeanField,
    model: &Model,
    data: &Dataset,
    prior: &IsotropicGaussianPrior,
    order: usize,
) -> Result<ElboEstimate> {
    if order < MIN_QUADRATURE_ORDER {
        return Err(Error::InvalidArgument(format!("quadrature order must be at least {MIN_QUADRATURE_ORDER}, got {order}")));
    }
    let rule = gauss_hermite(order)?;
    let out = quadrature_elbo_with_grad(q, model, data, prior, &rule)?;
    Ok(ElboEstimate { value: out.value, std_error: 0.0, samples_used: 0 })
}

/// Log predictive density of each test row under `S` posterior draws, plus the
/// MC-mean prediction (probability of `+1` for classification).
fn predictive(model: &Model, thetas: &[Vec<f64>], test: &Dataset) -> Vec<(f64, f64)> {
    let ln_s = (thetas.len() as f64).ln();
    (0..test.len())
        .into_par_iter()
        .map(|i| {
            let x = test.row(i);
            let y = test.target(i);
            let outs: Vec<f64> = thetas.iter().map(|t| model.forward(t, x)).collect();
            let logp: Vec<f64> = outs.iter().map(|&a| -model_nll_at(model, a, y)).collect();
            let pred = match model.task() {
                Task::Classification => outs.iter().map(|&a| sigmoid(a)).sum::<f64>(),
                Task::Regression => outs.iter().sum::<f64>(),
            } / thetas.len() as f64;
            (logsumexp(&logp) - ln_s, pred)
        })
        .collect()
}

fn model_nll_at(model: &Model, a: f64, y: f64) -> f64 {
    match model.kind() {
        ModelKind::LogisticRegression => softplus(-y * a),
        ModelKind::LinearRegression { noise_precision: tau } | ModelKind::MlpRegression { noise_precision: tau, .. } => {
            0.5 * tau * (y - a) * (y - a) + 0.5 * (2.0 * std::f64::consts::PI / tau).ln()
        }
        ModelKind::Constant { value } => value,
    }
}

/// Predictive metrics from `S` draws of `q` plus the MC negative ELBO on
/// `train`. Classification RMSE compares the predicted probability of `+1`
/// with `(y + 1)/2`.
pub fn evaluate_metrics(
    q: &GaussianMeanField,
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    prior: &IsotropicGaussianPrior,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    check_q(q, model, test)?;
    if samples == 0 {
        return Err(Error::InvalidArgument("metrics need S >= 1".into()));
    }
    let thetas = draw(q, rng, samples);
    let rows = predictive(model, &thetas, test);
    let n = test.len() as f64;
    let ll = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let mse = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let target = match model.task() {
                Task::Classification => 0.5 * (test.target(i) + 1.0),
                Task::Regression => test.target(i),
            };
            (r.1 - target).powi(2)
        })
        .sum::<f64>()
        / n;
    let elbo = elbo_mc(q, model, train, prior, samples, rng)?;
    let report = MetricReport { test_log_loss: -ll, test_rmse: mse.sqrt(), test_log_likelihood: ll, train_neg_elbo: -elbo.value };
    if [report.test_log_loss, report.test_rmse, report.train_neg_elbo].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_linear, synthetic_logistic};

    fn prior(l: f64) -> IsotropicGaussianPrior {
        IsotropicGaussianPrior::new(l).unwrap()
    }

    #[test]
    fn constant_model_at_prior() {
        let data = synthetic_linear(1, 7, 3, 1.0).unwrap();
        let model = Model::new(ModelKind::Constant { value: 0.8 }, 3).unwrap();
        let p = prior(2.0);
        let q = p.as_mean_field(3);
        let e = elbo_mc(&q, &model, &data, &p, 50, &mut SeededRng::new(0)).unwrap();
        assert!((e.value + 7.0 * 0.8).abs() <= 4.0 * f64::EPSILON * 5.6);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn standard_error_scaling() {
        let data = synthetic_logistic(2, 30, 3).unwrap();
        let model = Model::new(ModelKind::LogisticRegression, 3).unwrap();
        let p = prior(1.0);
        let q = GaussianMeanField::new(vec![0.2, -0.1, 0.4], vec![0.3, 0.2, 0.5]).unwrap();
        let a = elbo_mc(&q, &model, &data, &p, 1_000, &mut SeededRng::new(3)).unwrap();
        let b = elbo_mc(&q, &model, &data, &p, 100_000, &mut SeededRng::new(4)).unwrap();
        let ratio = a.std_error / b.std_error;
        assert!((7.0..14.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn quadrature_linear_matches_gaussian_moments() {
        let tau = 2.5;
        let data = synthetic_linear(5, 20, 3, tau).unwrap();
        let model = Model::new(ModelKind::LinearRegression { noise_precision: tau }, 3).unwrap();
        let p = prior(0.7);
        let q = GaussianMeanField::new(vec![0.5, -1.0, 0.2], vec![0.1, 0.4, 0.05]).unwrap();
        let got = elbo_quadrature_glm(&q, &model, &data, &p, 32).unwrap().value;
        // E[(y − a)²] = (y − xᵀμ)² + Σ x² σ².
        let mut expected = -p.kl_from(&q);
        for i in 0..data.len() {
            let x = data.row(i);
            let m: f64 = x.iter().zip(q.mu()).map(|(a, b)| a * b).sum();
            let v: f64 = x.iter().zip(q.sigma2()).map(|(a, b)| a * a * b).sum();
            expected -= 0.5 * tau * ((data.target(i) - m).powi(2) + v) + 0.5 * (2.0 * std::f64::consts::PI / tau).ln();
        }
        assert!((got - expected).abs() <= 1e-10 * expected.abs().max(1.0));
    }

    #[test]
    fn quadrature_point_mass_limit() {
        let data = synthetic_logistic(6, 25, 2).unwrap();
        let model = Model::new(ModelKind::LogisticRegression, 2).unwrap();
        let p = prior(1.0);
        let mu = vec![0.7, -0.3];
        let q = GaussianMeanField::new(mu.clone(), vec![1e-14; 2]).unwrap();
        let got = elbo_quadrature_glm(&q, &model, &data, &p, 32).unwrap().value + p.kl_from(&q);
        let plug = -25.0 * model.mean_nll(&mu, &data);
        assert!((got - plug).abs() <= 1e-8);
    }

    #[test]
    fn quadrature_rejects_low_order_and_mlp() {
        let data = synthetic_linear(1, 5, 2, 1.0).unwrap();
        let lin = Model::new(ModelKind::LinearRegression { noise_precision: 1.0 }, 2).unwrap();
        let q = GaussianMeanField::isotropic(2, 0.0, 1.0).unwrap();
        assert!(elbo_quadrature_glm(&q, &lin, &data, &prior(1.0), 8).is_err());
        let mlp = Model::new(ModelKind::MlpRegression { hidden: 2, noise_precision: 1.0 }, 2).unwrap();
        let q = GaussianMeanField::isotropic(mlp.param_dim(), 0.0, 1.0).unwrap();
        assert!(matches!(elbo_quadrature_glm(&q, &mlp, &data, &prior(1.0), 32), Err(Error::Unsupported(_))));
    }

    #[test]
    fn quadrature_gradient_matches_finite_differences() {
        let data = synthetic_logistic(8, 40, 3).unwrap();
        let model = Model::new(ModelKind::LogisticRegression, 3).unwrap();
        let p = prior(1.5);
        let rule = gauss_hermite(32).unwrap();
        let mu = vec![0.3, -0.6, 0.9];
        let s2 = vec![0.2, 0.5, 0.1];
        let f = |mu: &[f64], s2: &[f64]| {
            let q = GaussianMeanField::new(mu.to_vec(), s2.to_vec()).unwrap();
            quadrature_elbo_with_grad(&q, &model, &data, &p, &rule).unwrap().value
        };
        let q = GaussianMeanField::new(mu.clone(), s2.clone()).unwrap();
        let g = quadrature_elbo_with_grad(&q, &model, &data, &p, &rule).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let (mut a, mut b) = (mu.clone(), mu.clone());
            a[j] += h;
            b[j] -= h;
            let fd = (f(&a, &s2) - f(&b, &s2)) / (2.0 * h);
            assert!((fd - g.grad_mu[j]).abs() <= 1e-6 * fd.abs().max(1.0));
            let (mut a, mut b) = (s2.clone(), s2.clone());
            a[j] += h;
            b[j] -= h;
            let fd = (f(&mu, &a) - f(&mu, &b)) / (2.0 * h);
            assert!((fd - g.grad_sigma2[j]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn perfect_predictor_has_zero_rmse() {
        let x = vec![1.0, 2.0, -1.0, 0.5, 3.0, 1.0];
        let mu = [0.5, -2.0];
        let y = (0..3).map(|i| x[2 * i] * mu[0] + x[2 * i + 1] * mu[1]).collect();
        let data = Dataset::new(x, y, 2, Task::Regression).unwrap();
        let model = Model::new(ModelKind::LinearRegression { noise_precision: 1.0 }, 2).unwrap();
        let q = GaussianMeanField::new(mu.to_vec(), vec![f64::MIN_POSITIVE; 2]).unwrap();
        let m = evaluate_metrics(&q, &model, &data, &data, &prior(1.0), 4, &mut SeededRng::new(1)).unwrap();
        assert_eq!(m.test_rmse, 0.0);
    }

    #[test]
    fn uniform_predictive_log_loss_is_ln2() {
        let data = synthetic_logistic(3, 10, 2).unwrap();
        let model = Model::new(ModelKind::LogisticRegression, 2).unwrap();
        let q = GaussianMeanField::new(vec![0.0; 2], vec![f64::MIN_POSITIVE; 2]).unwrap();
        let m = evaluate_metrics(&q, &model, &data, &data, &prior(1.0), 3, &mut SeededRng::new(1)).unwrap();
        assert!((m.test_log_loss - 2f64.ln()).abs() < 1e-15);
        assert!((m.test_rmse - 0.5).abs() < 1e-15);
    }

    #[test]
    fn logistic_point_mass_matches_plugin() {
        let data = synthetic_logistic(4, 20, 3).unwrap();
        let model = Model::new(ModelKind::LogisticRegression, 3).unwrap();
        let mu = vec![0.4, -1.2, 0.8];
        let q = GaussianMeanField::new(mu.clone(), vec![1e-20; 3]).unwrap();
        let m = evaluate_metrics(&q, &model, &data, &data, &prior(1.0), 10, &mut SeededRng::new(2)).unwrap();
        let plug = model.mean_nll(&mu, &data);
        assert!((m.test_log_loss - plug).abs() <= 1e-8);
    }

    #[test]
    fn metrics_invariant_to_row_permutation() {
        let data = synthetic_logistic(9, 30, 2).unwrap();
        let model = Model::new(ModelKind::LogisticRegression, 2).unwrap();
        let q = GaussianMeanField::new(vec![0.3, -0.2], vec![0.2, 0.3]).unwrap();
        let perm: Vec<usize> = (0..30).rev().collect();
        let shuffled = data.subset(&perm).unwrap();
        let p = prior(1.0);
        let a = evaluate_metrics(&q, &model, &data, &data, &p, 200, &mut SeededRng::new(5)).unwrap();
        let b = evaluate_metrics(&q, &model, &data, &shuffled, &p, 200, &mut SeededRng::new(5)).unwrap();
        assert!((a.test_log_loss - b.test_log_loss).abs() < 1e-12);
        assert!((a.test_rmse - b.test_rmse).abs() < 1e-12);
    }

    #[test]
    fn mc_is_unbiased_against_quadrature() {
        let data = synthetic_logistic(10, 20, 2).unwrap();
        let model = Model::new(ModelKind::LogisticRegression, 2).unwrap();
        let p = prior(1.0);
        let q = GaussianMeanField::new(vec![0.5, -0.5], vec![0.3, 0.6]).unwrap();
        let quad = elbo_quadrature_glm(&q, &model, &data, &p, 32).unwrap().value;
        let mut rng = SeededRng::new(11);
        let runs = 100_000;
        let vals: Vec<f64> = (0..runs).map(|_| elbo_mc(&q, &model, &data, &p, 1, &mut rng).unwrap().value).collect();
        let mean = vals.iter().sum::<f64>() / runs as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs as f64 - 1.0)).sqrt();
        assert!((mean - quad).abs() <= 3.0 * sd / (runs as f64).sqrt());
    }
}
