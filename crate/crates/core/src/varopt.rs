//! Variational optimization of black-box functions.
//!
//! A deterministic function `F(θ)` is minimized by running VadaGrad (or
//! Vadam annealed toward VadaGrad) on `E_{N(θ|μ,σ²)}[F(θ)]` and tracking
//! the mean `μ_t`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{GradRequest, GradientEstimate, Objective};
use crate::numkit::{central_diff_grad, SeededRng};
use crate::optimizers::{vadagrad_step, vadam_step, OptimizerConfig, OptimizerState};

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// `F(θ)` with an optional analytic gradient; otherwise central differences.
pub struct BlackBoxObjective {
    dim: usize,
    eval: Box<ScalarFn>,
    grad: Option<Box<GradFn>>,
    /// Box constraints, informational only.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub fd_step: f64,
}

impl std::fmt::Debug for BlackBoxObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlackBoxObjective")
            .field("dim", &self.dim)
            .field("analytic_gradient", &self.grad.is_some())
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl BlackBoxObjective {
    pub fn new(dim: usize, eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { dim, eval: Box::new(eval), grad: None, bounds: None, fd_step: 1e-6 }
    }

    pub fn with_gradient(mut self, grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.grad = Some(Box::new(grad));
        self
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn has_gradient(&self) -> bool {
        self.grad.is_some()
    }

    pub fn evaluate(&self, theta: &[f64]) -> f64 {
        (self.eval)(theta)
    }

    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        match &self.grad {
            Some(g) => Ok(g(theta)),
            None => central_diff_grad(|t| (self.eval)(t), theta, self.fd_step),
        }
    }
}

impl Objective for BlackBoxObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_examples(&self) -> usize {
        1
    }

    fn estimate(&self, theta: &[f64], _batch: &[usize], want: GradRequest) -> Result<GradientEstimate> {
        if theta.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: theta.len() });
        }
        let ghat = self.gradient(theta)?;
        if ghat.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("black-box gradient".into()));
        }
        Ok(GradientEstimate {
            per_example: want.per_example.then(|| vec![ghat.clone()]),
            ggn_diag: want.ggn.then(|| ghat.iter().map(|g| g * g).collect()),
            hess_diag: None,
            ghat,
            batch_size: 1,
        })
    }
}

/// `h(x, y) = exp{−(x sin 20y + y sin 20x)² − (x cos 10y − y sin 10x)²}`.
pub fn toy_landscape(x: f64, y: f64) -> f64 {
    let (a, b) = landscape_terms(x, y);
    (-(a * a) - b * b).exp()
}

fn landscape_terms(x: f64, y: f64) -> (f64, f64) {
    (x * (20.0 * y).sin() + y * (20.0 * x).sin(), x * (10.0 * y).cos() - y * (10.0 * x).sin())
}

pub fn toy_landscape_grad(x: f64, y: f64) -> [f64; 2] {
    let (a, b) = landscape_terms(x, y);
    let h = (-(a * a) - b * b).exp();
    let ax = (20.0 * y).sin() + 20.0 * y * (20.0 * x).cos();
    let ay = 20.0 * x * (20.0 * y).cos() + (20.0 * x).sin();
    let bx = (10.0 * y).cos() - 10.0 * y * (10.0 * x).cos();
    let by = -10.0 * x * (10.0 * y).sin() - (10.0 * x).sin();
    [-2.0 * h * (a * ax + b * bx), -2.0 * h * (a * ay + b * by)]
}

/// Whether the landscape is minimized as `−h` or as `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LandscapeSign {
    /// Minimize `−h`, i.e. seek the peak of `h`.
    MinimizeNegative,
    MinimizePositive,
}

impl LandscapeSign {
    fn factor(self) -> f64 {
        match self {
            LandscapeSign::MinimizeNegative => -1.0,
            LandscapeSign::MinimizePositive => 1.0,
        }
    }
}

pub fn landscape_objective(sign: LandscapeSign) -> BlackBoxObjective {
    let c = sign.factor();
    BlackBoxObjective::new(2, move |t| c * toy_landscape(t[0], t[1]))
        .with_gradient(move |t| toy_landscape_grad(t[0], t[1]).iter().map(|g| c * g).collect())
        .with_bounds(vec![(-1.0, 1.0); 2])
}

/// `F(θ) = ½‖θ‖²`.
pub fn quadratic_bowl(dim: usize) -> BlackBoxObjective {
    BlackBoxObjective::new(dim, |t| 0.5 * t.iter().map(|v| v * v).sum::<f64>()).with_gradient(|t| t.to_vec())
}

pub fn flat_objective(dim: usize) -> BlackBoxObjective {
    BlackBoxObjective::new(dim, |_| 0.0).with_gradient(move |t| vec![0.0; t.len()])
}

/// Four starting points spread over the landscape's `[−1, 1]²` window.
pub const DEFAULT_INITS: [[f64; 2]; 4] = [[-0.9, -0.9], [0.9, -0.9], [-0.9, 0.9], [0.9, 0.9]];

/// Weight `τ_t` between Vadam (`τ = 1`) and VadaGrad (`τ = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnnealSchedule {
    /// `τ_t` falls linearly from 1 at `t = 1` to 0 at `t = total`, then stays 0.
    Linear { total: u64 },
    Constant { tau: f64 },
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AnnealSchedule::Linear { total } if total < 2 => {
                Err(Error::InvalidArgument("linear annealing needs at least two steps".into()))
            }
            AnnealSchedule::Constant { tau } if !(0.0..=1.0).contains(&tau) => {
                Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")))
            }
            _ => Ok(()),
        }
    }

    pub fn tau(&self, t: u64) -> f64 {
        match *self {
            AnnealSchedule::Linear { total } => {
                let k = t.saturating_sub(1).min(total - 1);
                1.0 - k as f64 / (total - 1) as f64
            }
            AnnealSchedule::Constant { tau } => tau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoMethod {
    Vadagrad,
    VadamAnnealed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// `F(μ_t)`.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    /// Set when a non-finite value ended the run early.
    pub truncated: bool,
}

impl Trajectory {
    pub fn last(&self) -> &TrajectoryRow {
        self.rows.last().expect("trajectories start with the initial row")
    }
}

/// One step of Vadam annealed toward VadaGrad with weight `τ`.
///
/// The sampling precision is `N s + τλ`; the new scaling vector mixes
/// Vadam's average and VadaGrad's accumulation, `τ s_adam + (1−τ) s_ada`;
/// the mean step mixes the Vadam step (prior terms scaled by `τ`) and the
/// VadaGrad step in the same proportion. `τ = 1` and `τ = 0` call the pure
/// rules directly.
pub fn annealed_step(
    state: &OptimizerState,
    cfg: &OptimizerConfig,
    obj: &dyn Objective,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<OptimizerState> {
    if tau == 1.0 {
        return vadam_step(state, cfg, obj, &[0], rng).map(|r| r.0);
    }
    if tau == 0.0 {
        return vadagrad_step(state, cfg, obj, &[0], rng).map(|r| r.0);
    }
    let n = cfg.n as f64;
    let lam = tau * cfg.lambda;
    let lt = lam / n;
    let rates = cfg.rates_at(state.t);
    let p = state.dim();
    let sigma: Vec<f64> = state
        .s
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let prec = n * s + lam;
            if prec > 0.0 {
                Ok(prec.sqrt().recip())
            } else {
                Err(Error::InvalidArgument(format!("sampling precision {prec} at coordinate {j} is not positive")))
            }
        })
        .collect::<Result<_>>()?;
    let mut g = vec![0.0; p];
    for _ in 0..cfg.mc_samples {
        let eps = rng.sample_std_normal(p);
        let theta: Vec<f64> = state.mu.iter().zip(&sigma).zip(&eps).map(|((m, s), e)| m + s * e).collect();
        let est = obj.estimate(&theta, &[0], GradRequest::MEAN)?;
        for (a, b) in g.iter_mut().zip(&est.ghat) {
            *a += b / cfg.mc_samples as f64;
        }
    }
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.gamma1.powf(t);
    let bc2 = 1.0 - rates.gamma2.powf(t);
    let mut next = state.clone();
    for j in 0..p {
        let gj = g[j];
        let m = cfg.gamma1 * state.m[j] + (1.0 - cfg.gamma1) * (gj + lt * state.mu[j]);
        let s_adam = rates.gamma2 * state.s[j] + (1.0 - rates.gamma2) * gj * gj;
        let s_ada = state.s[j] + rates.beta * gj * gj;
        let s = tau * s_adam + (1.0 - tau) * s_ada;
        let d_adam = -rates.alpha * (m / bc1) / ((s / bc2).sqrt() + lt);
        let d_ada = -rates.alpha * gj / s.sqrt();
        next.m[j] = m;
        next.s[j] = s;
        next.mu[j] = state.mu[j] + tau * d_adam + (1.0 - tau) * d_ada;
    }
    next.mu_prev = state.mu.clone();
    next.t += 1;
    if next.mu.iter().chain(&next.s).chain(&next.m).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("annealed state after step {}", state.t)));
    }
    Ok(next)
}

fn sigma2_for(method: VoMethod, state: &OptimizerState, cfg: &OptimizerConfig, tau: f64) -> Vec<f64> {
    match method {
        VoMethod::Vadagrad => state.s.iter().map(|s| 1.0 / s).collect(),
        VoMethod::VadamAnnealed => state.s.iter().map(|s| 1.0 / (cfg.n as f64 * s + tau * cfg.lambda)).collect(),
    }
}

/// Runs one trajectory per initial point, each with its own RNG stream
/// `(seed, index)`. Both methods start from `s₁ = cfg.init_precision`.
pub fn vo_run(
    obj: &BlackBoxObjective,
    method: VoMethod,
    cfg: &OptimizerConfig,
    anneal: Option<AnnealSchedule>,
    inits: &[Vec<f64>],
    seed: u64,
    steps: u64,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let anneal = anneal.unwrap_or(AnnealSchedule::Linear { total: steps.max(2) });
    anneal.validate()?;
    for x in inits {
        if x.len() != obj.dim {
            return Err(Error::DimensionMismatch { expected: obj.dim, found: x.len() });
        }
    }
    inits
        .par_iter()
        .enumerate()
        .map(|(k, x0)| {
            let mut rng = SeededRng::with_stream(seed, k as u64);
            let mut state = OptimizerState::new(x0.clone(), vec![cfg.init_precision; x0.len()])?;
            let tau0 = anneal.tau(1);
            let mut rows = vec![TrajectoryRow {
                step: 0,
                mu: state.mu.clone(),
                sigma2: sigma2_for(method, &state, cfg, tau0),
                objective: obj.evaluate(&state.mu),
            }];
            let mut truncated = !rows[0].objective.is_finite();
            for step in 1..=steps {
                if truncated {
                    break;
                }
                let tau = anneal.tau(state.t);
                let out = match method {
                    VoMethod::Vadagrad => vadagrad_step(&state, cfg, obj, &[0], &mut rng).map(|r| r.0),
                    VoMethod::VadamAnnealed => annealed_step(&state, cfg, obj, tau, &mut rng),
                };
                match out {
                    Ok(next) => state = next,
                    Err(e) if e.is_numerical() => {
                        truncated = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
                let objective = obj.evaluate(&state.mu);
                truncated = !objective.is_finite();
                rows.push(TrajectoryRow { step, mu: state.mu.clone(), sigma2: sigma2_for(method, &state, cfg, tau), objective });
            }
            Ok(Trajectory { rows, truncated })
        })
        .collect()
}

/// Plain gradient descent `θ′ = θ − α∇F(θ)` from each initial point.
pub fn gd_baseline(obj: &BlackBoxObjective, alpha: f64, inits: &[Vec<f64>], steps: u64) -> Result<Vec<Trajectory>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("gradient descent needs alpha > 0".into()));
    }
    inits
        .par_iter()
        .map(|x0| {
            let mut theta = x0.clone();
            let zeros = vec![0.0; theta.len()];
            let mut rows = vec![TrajectoryRow { step: 0, mu: theta.clone(), sigma2: zeros.clone(), objective: obj.evaluate(&theta) }];
            let mut truncated = false;
            for step in 1..=steps {
                let g = match obj.gradient(&theta) {
                    Ok(g) if g.iter().all(|v| v.is_finite()) => g,
                    Ok(_) => {
                        truncated = true;
                        break;
                    }
                    Err(e) if e.is_numerical() => {
                        truncated = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                theta.iter_mut().zip(&g).for_each(|(t, g)| *t -= alpha * g);
                let objective = obj.evaluate(&theta);
                if !objective.is_finite() || theta.iter().any(|v| !v.is_finite()) {
                    truncated = true;
                    break;
                }
                rows.push(TrajectoryRow { step, mu: theta.clone(), sigma2: zeros.clone(), objective });
            }
            Ok(Trajectory { rows, truncated })
        })
        .collect()
}

/// CSV with columns `step, mu_1..mu_D, sigma2_1..sigma2_D, objective`.
pub fn write_trajectory_csv(traj: &Trajectory, out: impl Write) -> Result<()> {
    let d = traj.rows.first().map_or(0, |r| r.mu.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend((1..=d).map(|j| format!("mu_{j}")));
    header.extend((1..=d).map(|j| format!("sigma2_{j}")));
    header.push("objective".into());
    w.write_record(&header)?;
    for r in &traj.rows {
        let mut rec = vec![r.step.to_string()];
        rec.extend(r.mu.iter().chain(&r.sigma2).map(|v| v.to_string()));
        rec.push(r.objective.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
