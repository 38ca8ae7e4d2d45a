//! Differentiable likelihood models with per-example gradients.
//!
//! Every model exposes the per-example negative log-likelihood
//! `f_i(θ) = −log p(D_i | θ)` and its gradient. Minibatch estimates are
//! assembled from those per-example pieces, which also yields the
//! Gauss-Newton diagonal `(1/M) Σ (∇f_i)²` at no extra cost.
//!
//! MLP parameters are packed as `(W₁ row-major, b₁, W₂, b₂)` with
//! `W₁ ∈ R^{H×D}`, `W₂ ∈ R^{1×H}` and a scalar output bias.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Regression,
    /// Targets in `{−1, +1}`.
    Classification,
}

/// Dense row-major design matrix with targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    targets: Vec<f64>,
    dim: usize,
    task: Task,
}

impl Dataset {
    pub fn new(features: Vec<f64>, targets: Vec<f64>, dim: usize, task: Task) -> Result<Self> {
        let n = targets.len();
        if n == 0 || dim == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one row and one feature".into()));
        }
        if features.len() != n * dim {
            return Err(Error::DimensionMismatch { expected: n * dim, found: features.len() });
        }
        if features.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entry".into()));
        }
        if task == Task::Classification {
            if let Some(i) = targets.iter().position(|&y| y != 1.0 && y != -1.0) {
                return Err(Error::InvalidArgument(format!("classification target {i} is {}, expected ±1", targets[i])));
            }
        }
        Ok(Self { features, targets, dim, task })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            features.extend_from_slice(self.row(i));
            targets.push(self.targets[i]);
        }
        Self::new(features, targets, self.dim, self.task)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegression { noise_precision: f64 },
    LogisticRegression,
    /// One hidden ReLU layer, scalar Gaussian output.
    MlpRegression { hidden: usize, noise_precision: f64 },
    /// `f_i ≡ value`; a likelihood that ignores θ.
    Constant { value: f64 },
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::LinearRegression { .. } => "linear-regression",
            ModelKind::LogisticRegression => "logistic-regression",
            ModelKind::MlpRegression { .. } => "mlp-regression",
            ModelKind::Constant { .. } => "constant",
        }
    }
}

/// Which optional pieces [`Model::minibatch_grad`] should produce.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub per_example: bool,
    pub ggn: bool,
    pub exact_hessian: bool,
}

impl GradRequest {
    pub const MEAN: Self = Self { per_example: false, ggn: false, exact_hessian: false };
    pub const GGN: Self = Self { per_example: false, ggn: true, exact_hessian: false };
    pub const HESSIAN: Self = Self { per_example: false, ggn: false, exact_hessian: true };
    pub const ALL: Self = Self { per_example: true, ggn: true, exact_hessian: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// Minibatch mean gradient ĝ.
    pub ghat: Vec<f64>,
    pub per_example: Option<Vec<Vec<f64>>>,
    /// `(1/M) Σ_i (∇f_i)²`.
    pub ggn_diag: Option<Vec<f64>>,
    /// `(1/M) Σ_i diag ∇²f_i`.
    pub hess_diag: Option<Vec<f64>>,
    pub batch_size: usize,
}

/// Anything the optimizers can query for minibatch gradient information.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    /// Number of terms `N` the full objective averages over.
    fn num_examples(&self) -> usize;

    fn estimate(&self, theta: &[f64], batch: &[usize], want: GradRequest) -> Result<GradientEstimate>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    input_dim: usize,
}

impl Model {
    pub fn new(kind: ModelKind, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("model input dimension must be positive".into()));
        }
        match kind {
            ModelKind::LinearRegression { noise_precision } | ModelKind::MlpRegression { noise_precision, .. }
                if !(noise_precision > 0.0 && noise_precision.is_finite()) =>
            {
                return Err(Error::InvalidArgument(format!("noise precision must be positive, got {noise_precision}")));
            }
            ModelKind::MlpRegression { hidden: 0, .. } => {
                return Err(Error::InvalidArgument("MLP needs at least one hidden unit".into()));
            }
            _ => {}
        }
        Ok(Self { kind, input_dim })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn param_dim(&self) -> usize {
        match self.kind {
            ModelKind::MlpRegression { hidden, .. } => hidden * self.input_dim + 2 * hidden + 1,
            _ => self.input_dim,
        }
    }

    pub fn is_glm(&self) -> bool {
        matches!(self.kind, ModelKind::LinearRegression { .. } | ModelKind::LogisticRegression)
    }

    pub fn task(&self) -> Task {
        match self.kind {
            ModelKind::LogisticRegression => Task::Classification,
            _ => Task::Regression,
        }
    }

    pub fn noise_precision(&self) -> Option<f64> {
        match self.kind {
            ModelKind::LinearRegression { noise_precision } | ModelKind::MlpRegression { noise_precision, .. } => {
                Some(noise_precision)
            }
            _ => None,
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::DimensionMismatch { expected: self.param_dim(), found: theta.len() });
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, found: data.dim() });
        }
        Ok(())
    }

    /// Network output (regression mean, or logit for classification).
    pub fn forward(&self, theta: &[f64], x: &[f64]) -> f64 {
        match self.kind {
            ModelKind::MlpRegression { hidden, .. } => {
                let d = self.input_dim;
                let (w1, rest) = theta.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut out = b2[0];
                for h in 0..hidden {
                    let z: f64 = w1[h * d..(h + 1) * d].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b1[h];
                    if z > 0.0 {
                        out += w2[h] * z;
                    }
                }
                out
            }
            ModelKind::Constant { .. } => 0.0,
            _ => theta.iter().zip(x).map(|(t, xi)| t * xi).sum(),
        }
    }

    /// `f_i(θ)` for one example.
    pub fn nll(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        let a = self.forward(theta, x);
        self.nll_from_output(a, y)
    }

    fn nll_from_output(&self, a: f64, y: f64) -> f64 {
        match self.kind {
            ModelKind::LogisticRegression => softplus(-y * a),
            ModelKind::LinearRegression { noise_precision: tau }
            | ModelKind::MlpRegression { noise_precision: tau, .. } => {
                0.5 * tau * (y - a) * (y - a) + 0.5 * (2.0 * std::f64::consts::PI / tau).ln()
            }
            ModelKind::Constant { value } => value,
        }
    }

    /// Writes `∇f_i(θ)` into `grad` and returns `f_i(θ)`.
    pub fn nll_and_grad(&self, theta: &[f64], x: &[f64], y: f64, grad: &mut [f64]) -> f64 {
        match self.kind {
            ModelKind::LogisticRegression => {
                let a: f64 = theta.iter().zip(x).map(|(t, xi)| t * xi).sum();
                let coef = -y * sigmoid(-y * a);
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g = coef * xi;
                }
                softplus(-y * a)
            }
            ModelKind::LinearRegression { noise_precision: tau } => {
                let a: f64 = theta.iter().zip(x).map(|(t, xi)| t * xi).sum();
                let r = tau * (a - y);
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g = r * xi;
                }
                self.nll_from_output(a, y)
            }
            ModelKind::MlpRegression { hidden, noise_precision: tau } => {
                let d = self.input_dim;
                let (w1, rest) = theta.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut pre = vec![0.0; hidden];
                let mut out = b2[0];
                for h in 0..hidden {
                    pre[h] = w1[h * d..(h + 1) * d].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b1[h];
                    if pre[h] > 0.0 {
                        out += w2[h] * pre[h];
                    }
                }
                let r = tau * (out - y);
                let (gw1, rest) = grad.split_at_mut(hidden * d);
                let (gb1, rest) = rest.split_at_mut(hidden);
                let (gw2, gb2) = rest.split_at_mut(hidden);
                gb2[0] = r;
                for h in 0..hidden {
                    // ReLU subgradient at 0 is 0.
                    let active = pre[h] > 0.0;
                    gw2[h] = if active { r * pre[h] } else { 0.0 };
                    let dz = if active { r * w2[h] } else { 0.0 };
                    gb1[h] = dz;
                    for (g, xi) in gw1[h * d..(h + 1) * d].iter_mut().zip(x) {
                        *g = dz * xi;
                    }
                }
                self.nll_from_output(out, y)
            }
            ModelKind::Constant { value } => {
                grad.fill(0.0);
                value
            }
        }
    }

    /// Adds `diag ∇²f_i(θ)` into `acc`. GLMs and the constant model only.
    fn add_hess_diag(&self, theta: &[f64], x: &[f64], acc: &mut [f64]) -> Result<()> {
        match self.kind {
            ModelKind::LogisticRegression => {
                let a: f64 = theta.iter().zip(x).map(|(t, xi)| t * xi).sum();
                let p = sigmoid(a);
                let c = p * (1.0 - p);
                for (h, xi) in acc.iter_mut().zip(x) {
                    *h += c * xi * xi;
                }
                Ok(())
            }
            ModelKind::LinearRegression { noise_precision: tau } => {
                for (h, xi) in acc.iter_mut().zip(x) {
                    *h += tau * xi * xi;
                }
                Ok(())
            }
            ModelKind::Constant { .. } => Ok(()),
            ModelKind::MlpRegression { .. } => {
                Err(Error::Unsupported("exact diagonal Hessian is not available for mlp-regression".into()))
            }
        }
    }

    pub fn per_example_nll(&self, theta: &[f64], data: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        self.check_data(data)?;
        indices
            .iter()
            .map(|&i| {
                if i >= data.len() {
                    return Err(Error::IndexOutOfRange { index: i, len: data.len() });
                }
                Ok(self.nll(theta, data.row(i), data.target(i)))
            })
            .collect()
    }

    /// `f(θ) = (1/N) Σ_i f_i(θ)` over the whole dataset.
    pub fn mean_nll(&self, theta: &[f64], data: &Dataset) -> f64 {
        self.sum_nll(theta, data) / data.len() as f64
    }

    /// `Σ_i f_i(θ)`, the negative log-likelihood of the whole dataset.
    pub fn sum_nll(&self, theta: &[f64], data: &Dataset) -> f64 {
        (0..data.len()).map(|i| self.nll(theta, data.row(i), data.target(i))).sum()
    }

    pub fn minibatch_grad(
        &self,
        theta: &[f64],
        data: &Dataset,
        batch: &[usize],
        want: GradRequest,
    ) -> Result<GradientEstimate> {
        self.check_theta(theta)?;
        self.check_data(data)?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("minibatch is empty".into()));
        }
        if want.exact_hessian && matches!(self.kind, ModelKind::MlpRegression { .. }) {
            return Err(Error::Unsupported("exact diagonal Hessian is not available for mlp-regression".into()));
        }
        let p = self.param_dim();
        let m = batch.len() as f64;
        let mut ghat = vec![0.0; p];
        let mut ggn = want.ggn.then(|| vec![0.0; p]);
        let mut hess = want.exact_hessian.then(|| vec![0.0; p]);
        let mut rows = want.per_example.then(|| Vec::with_capacity(batch.len()));
        let mut g = vec![0.0; p];
        for &i in batch {
            if i >= data.len() {
                return Err(Error::IndexOutOfRange { index: i, len: data.len() });
            }
            let x = data.row(i);
            self.nll_and_grad(theta, x, data.target(i), &mut g);
            for (acc, gi) in ghat.iter_mut().zip(&g) {
                *acc += gi;
            }
            if let Some(ggn) = ggn.as_mut() {
                for (acc, gi) in ggn.iter_mut().zip(&g) {
                    *acc += gi * gi;
                }
            }
            if let Some(hess) = hess.as_mut() {
                self.add_hess_diag(theta, x, hess)?;
            }
            if let Some(rows) = rows.as_mut() {
                rows.push(g.clone());
            }
        }
        for v in ghat.iter_mut().chain(ggn.iter_mut().flatten()).chain(hess.iter_mut().flatten()) {
            *v /= m;
        }
        if ghat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("minibatch gradient".into()));
        }
        Ok(GradientEstimate { ghat, per_example: rows, ggn_diag: ggn, hess_diag: hess, batch_size: batch.len() })
    }
}

/// A model bound to its training data.
#[derive(Debug, Clone, Copy)]
pub struct ModelObjective<'a> {
    pub model: &'a Model,
    pub data: &'a Dataset,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a Model, data: &'a Dataset) -> Self {
        Self { model, data }
    }
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.model.param_dim()
    }

    fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn estimate(&self, theta: &[f64], batch: &[usize], want: GradRequest) -> Result<GradientEstimate> {
        self.model.minibatch_grad(theta, self.data, batch, want)
    }
}

/// `f(θ) = ½ θᵀ diag(d) θ` as a single-example objective.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalQuadratic {
    pub diag: Vec<f64>,
}

impl Objective for DiagonalQuadratic {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn num_examples(&self) -> usize {
        1
    }

    fn estimate(&self, theta: &[f64], _batch: &[usize], want: GradRequest) -> Result<GradientEstimate> {
        if theta.len() != self.diag.len() {
            return Err(Error::DimensionMismatch { expected: self.diag.len(), found: theta.len() });
        }
        let ghat: Vec<f64> = theta.iter().zip(&self.diag).map(|(t, d)| t * d).collect();
        Ok(GradientEstimate {
            per_example: want.per_example.then(|| vec![ghat.clone()]),
            ggn_diag: want.ggn.then(|| ghat.iter().map(|g| g * g).collect()),
            hess_diag: want.exact_hessian.then(|| self.diag.clone()),
            ghat,
            batch_size: 1,
        })
    }
}

/// Replays a fixed sequence of gradients regardless of θ; the last entry repeats.
///
/// Curvature requests return `hessian` for the exact diagonal and `ĝ²` for
/// the Gauss-Newton diagonal. Useful for deterministic hand traces.
#[derive(Debug)]
pub struct ScriptedObjective {
    grads: Vec<Vec<f64>>,
    hessian: Vec<f64>,
    num_examples: usize,
    calls: AtomicUsize,
}

impl ScriptedObjective {
    pub fn new(grads: Vec<Vec<f64>>, hessian: Vec<f64>, num_examples: usize) -> Result<Self> {
        let dim = hessian.len();
        if grads.is_empty() || grads.iter().any(|g| g.len() != dim) {
            return Err(Error::InvalidArgument("scripted gradients must be nonempty and match the Hessian length".into()));
        }
        Ok(Self { grads, hessian, num_examples: num_examples.max(1), calls: AtomicUsize::new(0) })
    }

    pub fn constant(grad: Vec<f64>, num_examples: usize) -> Result<Self> {
        let dim = grad.len();
        Self::new(vec![grad], vec![0.0; dim], num_examples)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Objective for ScriptedObjective {
    fn dim(&self) -> usize {
        self.hessian.len()
    }

    fn num_examples(&self) -> usize {
        self.num_examples
    }

    fn estimate(&self, theta: &[f64], batch: &[usize], want: GradRequest) -> Result<GradientEstimate> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: theta.len() });
        }
        let k = self.calls.fetch_add(1, Ordering::Relaxed).min(self.grads.len() - 1);
        let ghat = self.grads[k].clone();
        Ok(GradientEstimate {
            per_example: want.per_example.then(|| vec![ghat.clone(); batch.len().max(1)]),
            ggn_diag: want.ggn.then(|| ghat.iter().map(|g| g * g).collect()),
            hess_diag: want.exact_hessian.then(|| self.hessian.clone()),
            ghat,
            batch_size: batch.len().max(1),
        })
    }
}
