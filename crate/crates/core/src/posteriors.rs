//! Diagonal Gaussian posteriors and their exponential-family coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::SeededRng;

/// `q(θ) = N(μ, diag(σ²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeanField")]
pub struct GaussianMeanField {
    mu: Vec<f64>,
    sigma2: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMeanField {
    mu: Vec<f64>,
    sigma2: Vec<f64>,
}

impl TryFrom<RawMeanField> for GaussianMeanField {
    type Error = Error;

    fn try_from(raw: RawMeanField) -> Result<Self> {
        GaussianMeanField::new(raw.mu, raw.sigma2)
    }
}

impl GaussianMeanField {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma2.len() {
            return Err(Error::DimensionMismatch { expected: mu.len(), found: sigma2.len() });
        }
        if let Some(j) = mu.iter().position(|m| !m.is_finite()) {
            return Err(Error::InvalidPosterior(format!("mean {j} is not finite")));
        }
        if let Some(j) = sigma2.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidPosterior(format!(
                "variance {j} must be positive and finite, got {}",
                sigma2[j]
            )));
        }
        Ok(Self { mu, sigma2 })
    }

    pub fn isotropic(dim: usize, mean: f64, variance: f64) -> Result<Self> {
        Self::new(vec![mean; dim], vec![variance; dim])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.sigma2.iter().map(|v| v.sqrt()).collect()
    }

    pub fn precision(&self) -> Vec<f64> {
        self.sigma2.iter().map(|v| 1.0 / v).collect()
    }

    /// `θ = μ + σ∘ε` with a fresh `ε ~ N(0, I)`.
    pub fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        let eps = rng.sample_std_normal(self.dim());
        self.reparameterize(&eps)
    }

    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma2)
            .zip(eps)
            .map(|((m, v), e)| m + v.sqrt() * e)
            .collect()
    }

    pub fn to_natural(&self) -> NaturalParams {
        NaturalParams {
            eta1: self.mu.iter().zip(&self.sigma2).map(|(m, v)| m / v).collect(),
            eta2: self.sigma2.iter().map(|v| -0.5 / v).collect(),
        }
    }

    pub fn to_expectation(&self) -> ExpectationParams {
        ExpectationParams {
            m1: self.mu.clone(),
            m2: self.mu.iter().zip(&self.sigma2).map(|(m, v)| m * m + v).collect(),
        }
    }

    pub fn from_natural(eta: &NaturalParams) -> Result<Self> {
        if eta.eta1.len() != eta.eta2.len() {
            return Err(Error::DimensionMismatch { expected: eta.eta1.len(), found: eta.eta2.len() });
        }
        if let Some(j) = eta.eta2.iter().position(|e| !(*e < 0.0)) {
            return Err(Error::InvalidPosterior(format!("eta2[{j}] = {} is not negative", eta.eta2[j])));
        }
        let sigma2: Vec<f64> = eta.eta2.iter().map(|e| -0.5 / e).collect();
        let mu = eta.eta1.iter().zip(&sigma2).map(|(e, v)| e * v).collect();
        Self::new(mu, sigma2)
    }

    pub fn from_expectation(m: &ExpectationParams) -> Result<Self> {
        if m.m1.len() != m.m2.len() {
            return Err(Error::DimensionMismatch { expected: m.m1.len(), found: m.m2.len() });
        }
        let sigma2 = m.m1.iter().zip(&m.m2).map(|(a, b)| b - a * a).collect();
        Self::new(m.m1.clone(), sigma2)
    }
}

/// `η⁽¹⁾ = σ⁻²∘μ`, `η⁽²⁾ = −½σ⁻²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams {
    pub eta1: Vec<f64>,
    pub eta2: Vec<f64>,
}

/// `m⁽¹⁾ = μ`, `m⁽²⁾ = μ² + σ²` (diagonal of the second moment).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationParams {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
}

/// Zero-mean isotropic Gaussian prior `N(0, I/λ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicGaussianPrior {
    lambda: f64,
}

impl IsotropicGaussianPrior {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("prior precision must be positive, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `λ̃ = λ / N`.
    pub fn scaled(&self, n: usize) -> f64 {
        self.lambda / n as f64
    }

    pub fn as_mean_field(&self, dim: usize) -> GaussianMeanField {
        GaussianMeanField { mu: vec![0.0; dim], sigma2: vec![1.0 / self.lambda; dim] }
    }

    /// `KL(q ‖ p)` against this prior.
    pub fn kl_from(&self, q: &GaussianMeanField) -> f64 {
        q.mu
            .iter()
            .zip(&q.sigma2)
            .map(|(m, v)| 0.5 * (self.lambda * (v + m * m) - 1.0 - (self.lambda * v).ln()))
            .sum()
    }
}

/// Closed-form `KL(q ‖ p)` for diagonal Gaussians, in nats.
pub fn kl_diag_gauss(q: &GaussianMeanField, p: &GaussianMeanField) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch { expected: q.dim(), found: p.dim() });
    }
    let kl = (0..q.dim())
        .map(|j| {
            let ratio = q.sigma2[j] / p.sigma2[j];
            let diff = q.mu[j] - p.mu[j];
            0.5 * (ratio + diff * diff / p.sigma2[j] - 1.0 - ratio.ln())
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

pub fn symmetric_kl(q1: &GaussianMeanField, q2: &GaussianMeanField) -> Result<f64> {
    Ok(kl_diag_gauss(q1, q2)? + kl_diag_gauss(q2, q1)?)
}
