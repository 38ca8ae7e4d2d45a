use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use vadam::models::{Dataset, Model, ModelKind, ModelObjective};
use vadam::numkit::SeededRng;
use vadam::objectives::evaluate_metrics;
use vadam::optimizers::{Method, Optimizer, OptimizerConfig, State};
use vadam::oracles::{mf_exact_glm, MfExactResult};
use vadam::posteriors::{symmetric_kl, GaussianMeanField, IsotropicGaussianPrior};

use crate::config::{output_dir, parse_strict, write_effective, CliError, CliResult, RawConfig};
use crate::datasets::DataConfig;

pub const TRACE_FILE: &str = "trace.csv";
pub const POSTERIOR_FILE: &str = "posterior.json";
pub const TRACE_HEADER: [&str; 7] =
    ["iteration", "epoch", "neg_elbo", "log_loss", "rmse", "test_log_likelihood", "sym_kl"];

// RNG streams under the run seed.
pub const STREAM_EPS: u64 = 0;
pub const STREAM_BATCH: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_EVAL: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    None,
    MfExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSection {
    pub method: String,
    #[serde(flatten)]
    pub params: OptimizerConfig,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self { method: "vadam".into(), params: OptimizerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub minibatch: usize,
    /// Iterations between evaluations; 0 means once per epoch.
    pub eval_every: u64,
    pub eval_samples: usize,
    /// Initial mean drawn as `init_scale · N(0, I)`.
    pub init_scale: f64,
    pub reference: Reference,
    pub reference_budget: usize,
    /// Adds a `wall_time` column; the trace is then no longer reproducible.
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            minibatch: 10,
            eval_every: 0,
            eval_samples: 100,
            init_scale: 0.0,
            reference: Reference::None,
            reference_budget: 10_000,
            wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelKind,
    pub optimizer: OptimizerSection,
    pub train: TrainConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            data: DataConfig::default(),
            model: ModelKind::LogisticRegression,
            optimizer: OptimizerSection::default(),
            train: TrainConfig::default(),
        }
    }
}

pub fn parse_method(name: &str) -> CliResult<Method> {
    name.parse().map_err(|e: vadam::Error| CliError::Invalid(e.to_string().replace("invalid argument: ", "")))
}

/// Model/optimizer combinations that cannot run.
pub fn check_capability(method: Method, model: &Model, cfg: &OptimizerConfig) -> CliResult<()> {
    if method == Method::Von && !model.is_glm() {
        return Err(CliError::Invalid(format!(
            "optimizer von needs the exact diagonal Hessian, which {} does not provide; use vogn or von-reparam",
            model.kind().name()
        )));
    }
    if method.is_variational() && cfg.lambda <= 0.0 {
        return Err(CliError::Invalid(format!("optimizer {method} needs a positive prior precision lambda")));
    }
    Ok(())
}

pub fn build_model(kind: ModelKind, train: &Dataset) -> CliResult<Model> {
    let model = Model::new(kind, train.dim()).map_err(|e| CliError::Invalid(format!("model: {e}")))?;
    if model.task() != train.task() {
        return Err(CliError::Invalid(format!(
            "model {} expects a {:?} dataset, got {:?}",
            kind.name(),
            model.task(),
            train.task()
        )));
    }
    Ok(model)
}

pub fn reference(model: &Model, train: &Dataset, lambda: f64, budget: usize) -> CliResult<MfExactResult> {
    if !model.is_glm() {
        return Err(CliError::Invalid(format!("the mf-exact reference needs a GLM, not {}", model.kind().name())));
    }
    if lambda <= 0.0 {
        return Err(CliError::Invalid("the mf-exact reference needs a positive lambda".into()));
    }
    mf_exact_glm(model, train, lambda, budget).map_err(CliError::at("mf-exact reference"))
}

/// One training run with fixed streams. `on_step` sees every iteration
/// number and state after the step, starting with iteration 0.
#[allow(clippy::too_many_arguments)]
pub fn train(
    opt: &Optimizer,
    model: &Model,
    data: &Dataset,
    seed: u64,
    iterations: u64,
    minibatch: usize,
    init_scale: f64,
    mut on_step: impl FnMut(u64, &State) -> CliResult<()>,
) -> CliResult<State> {
    let obj = ModelObjective::new(model, data);
    let mu0: Vec<f64> = SeededRng::with_stream(seed, STREAM_INIT)
        .sample_std_normal(model.param_dim())
        .into_iter()
        .map(|z| init_scale * z)
        .collect();
    let mut state = opt.init(mu0).map_err(|e| CliError::Invalid(e.to_string()))?;
    let mut eps_rng = SeededRng::with_stream(seed, STREAM_EPS);
    let mut batch_rng = SeededRng::with_stream(seed, STREAM_BATCH);
    let m = minibatch.min(data.len());
    on_step(0, &state)?;
    for it in 1..=iterations {
        let batch = batch_rng.minibatch(data.len(), m);
        state = opt.step(&state, &obj, &batch, &mut eps_rng).map_err(CliError::at(format!("iteration {it}")))?.0;
        on_step(it, &state)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub neg_elbo: Option<f64>,
    pub log_loss: f64,
    pub rmse: f64,
    pub test_log_likelihood: f64,
}

/// Metrics for `q`; the ELBO is left out for point estimates.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    q: &GaussianMeanField,
    method: Method,
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    lambda: f64,
    samples: usize,
    rng: &mut SeededRng,
) -> CliResult<Evaluation> {
    let prior = IsotropicGaussianPrior::new(if lambda > 0.0 { lambda } else { 1.0 })?;
    let r = evaluate_metrics(q, model, train, test, &prior, samples, rng)?;
    Ok(Evaluation {
        neg_elbo: (method.is_variational() && lambda > 0.0).then_some(r.train_neg_elbo),
        log_loss: r.test_log_loss,
        rmse: r.test_rmse,
        test_log_likelihood: r.test_log_likelihood,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct PosteriorFile<'a> {
    method: Method,
    model: ModelKind,
    iterations: u64,
    posterior: &'a GaussianMeanField,
    state: &'a State,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<&'a MfExactResult>,
}

pub fn run(raw: &RawConfig, out_flag: Option<&Path>) -> CliResult<PathBuf> {
    let mut cfg: FitConfig = parse_strict(&raw.table)?;
    let method = parse_method(&cfg.optimizer.method)?;
    cfg.data.resolve(raw)?;
    let (train_set, test_set) = cfg.data.load(0)?;
    if !raw.has("optimizer.n") {
        cfg.optimizer.params.n = train_set.len();
    }
    let model = build_model(cfg.model, &train_set)?;
    let ocfg = cfg.optimizer.params;
    let opt = Optimizer::new(method, ocfg).map_err(|e| CliError::Invalid(e.to_string()))?;
    check_capability(method, &model, &ocfg)?;
    let t = &cfg.train;
    if t.minibatch == 0 {
        return Err(CliError::Invalid("train.minibatch must be at least 1".into()));
    }
    if t.eval_samples == 0 {
        return Err(CliError::Invalid("train.eval_samples must be at least 1".into()));
    }
    if !(t.init_scale >= 0.0 && t.init_scale.is_finite()) {
        return Err(CliError::Invalid("train.init_scale must be nonnegative".into()));
    }
    let reference = match t.reference {
        Reference::MfExact => Some(reference(&model, &train_set, ocfg.lambda, t.reference_budget)?),
        Reference::None => None,
    };

    let dir = output_dir(out_flag, cfg.output_dir.as_deref());
    std::fs::create_dir_all(&dir)?;
    write_effective(&dir, &cfg)?;

    let n = train_set.len() as u64;
    let m = t.minibatch.min(train_set.len()) as u64;
    let every = if t.eval_every == 0 { n.div_ceil(m) } else { t.eval_every };
    let mut eval_rng = SeededRng::with_stream(cfg.seed, STREAM_EVAL);
    let mut writer = csv::Writer::from_path(dir.join(crate::fit::TRACE_FILE))?;
    let mut header: Vec<&str> = TRACE_HEADER.to_vec();
    if t.wall_time {
        header.push("wall_time");
    }
    writer.write_record(&header)?;
    let start = Instant::now();
    let final_state = train(&opt, &model, &train_set, cfg.seed, t.iterations, t.minibatch, t.init_scale, |it, st| {
        if it % every != 0 && it != t.iterations {
            return Ok(());
        }
        let q = opt.posterior(st).map_err(CliError::at(format!("iteration {it}")))?;
        let ev = evaluate(&q, method, &model, &train_set, &test_set, ocfg.lambda, t.eval_samples, &mut eval_rng)
            .map_err(|e| match e {
                CliError::Core { source, .. } => CliError::Core { context: Some(format!("evaluation at iteration {it}")), source },
                other => other,
            })?;
        let kl = match &reference {
            Some(r) => Some(symmetric_kl(&q, &r.q)?),
            None => None,
        };
        let mut row = vec![
            it.to_string(),
            (it as f64 * m as f64 / n as f64).to_string(),
            fmt_opt(ev.neg_elbo),
            ev.log_loss.to_string(),
            ev.rmse.to_string(),
            ev.test_log_likelihood.to_string(),
            fmt_opt(kl),
        ];
        if t.wall_time {
            row.push(start.elapsed().as_secs_f64().to_string());
        }
        writer.write_record(&row)?;
        Ok(())
    })?;
    writer.flush()?;

    let q = opt.posterior(&final_state)?;
    let file = PosteriorFile {
        method,
        model: cfg.model,
        iterations: t.iterations,
        posterior: &q,
        state: &final_state,
        reference: reference.as_ref(),
    };
    std::fs::write(dir.join(POSTERIOR_FILE), serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(dir)
}
