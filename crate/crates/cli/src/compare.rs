use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use toml::Table;
use vadam::models::{Dataset, Model, ModelKind};
use vadam::numkit::SeededRng;
use vadam::objectives::{elbo_quadrature_glm, DEFAULT_QUADRATURE_ORDER};
use vadam::optimizers::{Method, Optimizer, OptimizerConfig};
use vadam::oracles::MfExactResult;
use vadam::posteriors::{symmetric_kl, IsotropicGaussianPrior};

use crate::config::{output_dir, parse_strict, to_table, write_effective, CliError, CliResult, RawConfig};
use crate::datasets::DataConfig;
use crate::fit::{build_model, check_capability, evaluate, parse_method, reference, train, STREAM_EVAL};

pub const COMPARISON_FILE: &str = "comparison.csv";
pub const REFERENCE_FILE: &str = "reference.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareSection {
    /// Optimizer names; a name may repeat.
    pub methods: Vec<String>,
    pub minibatch: Vec<usize>,
    /// Number of seeds. Seed `k` also selects data split `k`.
    pub seeds: u64,
    pub iterations: u64,
    pub init_scale: f64,
    pub eval_samples: usize,
    pub reference_budget: usize,
    /// Per-method optimizer settings layered over `[optimizer]`.
    pub overrides: BTreeMap<String, Table>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            methods: vec!["vadam".into(), "vogn".into()],
            minibatch: vec![1, 8, 16, 32, 64],
            seeds: 20,
            iterations: 2000,
            init_scale: 0.0,
            eval_samples: 1000,
            reference_budget: 10_000,
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelKind,
    pub optimizer: OptimizerConfig,
    pub compare: CompareSection,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            data: DataConfig::default(),
            model: ModelKind::LogisticRegression,
            optimizer: OptimizerConfig::default(),
            compare: CompareSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub minibatch: usize,
    pub effective_minibatch: usize,
    pub seed: u64,
    pub sym_kl: f64,
    pub neg_elbo: f64,
    pub log_loss: f64,
}

struct Split {
    train: Dataset,
    test: Dataset,
    model: Model,
    reference: MfExactResult,
}

fn method_config(base: &OptimizerConfig, name: &str, overrides: &BTreeMap<String, Table>) -> CliResult<OptimizerConfig> {
    let Some(extra) = overrides.get(name) else { return Ok(*base) };
    let mut t = to_table(base)?;
    for (k, v) in extra {
        t.insert(k.clone(), v.clone());
    }
    parse_strict(&t).map_err(|e| CliError::Invalid(format!("compare.overrides.{name}: {e}")))
}

pub fn run(raw: &RawConfig, out_flag: Option<&Path>) -> CliResult<PathBuf> {
    let mut cfg: CompareConfig = parse_strict(&raw.table)?;
    cfg.data.resolve(raw)?;
    let c = cfg.compare.clone();
    if c.methods.is_empty() || c.minibatch.is_empty() || c.seeds == 0 {
        return Err(CliError::Invalid("compare needs at least one method, minibatch size and seed".into()));
    }
    if c.minibatch.contains(&0) {
        return Err(CliError::Invalid("minibatch sizes must be at least 1".into()));
    }
    if c.eval_samples == 0 {
        return Err(CliError::Invalid("compare.eval_samples must be at least 1".into()));
    }
    if let Some(k) = c.overrides.keys().find(|k| !c.methods.contains(k)) {
        return Err(CliError::Invalid(format!("compare.overrides.{k} names a method that is not listed")));
    }

    let splits: Vec<Split> = (0..c.seeds)
        .into_par_iter()
        .map(|k| {
            let (train, test) = cfg.data.load(k)?;
            let model = build_model(cfg.model, &train)?;
            let reference = reference(&model, &train, cfg.optimizer.lambda, c.reference_budget)?;
            Ok(Split { train, test, model, reference })
        })
        .collect::<CliResult<_>>()?;
    if !raw.has("optimizer.n") {
        cfg.optimizer.n = splits[0].train.len();
    }

    let mut methods = Vec::new();
    for name in &c.methods {
        let method = parse_method(name)?;
        let ocfg = method_config(&cfg.optimizer, name, &c.overrides)?;
        let opt = Optimizer::new(method, ocfg).map_err(|e| CliError::Invalid(format!("{name}: {e}")))?;
        check_capability(method, &splits[0].model, &ocfg)?;
        methods.push((name.clone(), method, opt));
    }

    let dir = output_dir(out_flag, cfg.output_dir.as_deref());
    std::fs::create_dir_all(&dir)?;
    write_effective(&dir, &cfg)?;
    let refs: Vec<&MfExactResult> = splits.iter().map(|s| &s.reference).collect();
    std::fs::write(dir.join(REFERENCE_FILE), serde_json::to_string_pretty(&refs)? + "\n")?;

    let jobs: Vec<(usize, usize, u64)> = (0..methods.len())
        .flat_map(|i| c.minibatch.iter().flat_map(move |&m| (0..c.seeds).map(move |k| (i, m, k))))
        .collect();
    let rows: Vec<ComparisonRow> = jobs
        .par_iter()
        .map(|&(i, m, k)| {
            let (name, method, opt) = &methods[i];
            run_one(name, *method, opt, &splits[k as usize], cfg.seed.wrapping_add(k), m, k, &c)
        })
        .collect::<CliResult<_>>()?;

    let mut w = csv::Writer::from_path(dir.join(COMPARISON_FILE))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(dir)
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    name: &str,
    method: Method,
    opt: &Optimizer,
    split: &Split,
    seed: u64,
    m: usize,
    k: u64,
    c: &CompareSection,
) -> CliResult<ComparisonRow> {
    let tag = |e: CliError| match e {
        CliError::Core { context, source } => CliError::Core {
            context: Some(format!("{name} M={m} seed {k}: {}", context.unwrap_or_default())),
            source,
        },
        other => other,
    };
    let state =
        train(opt, &split.model, &split.train, seed, c.iterations, m, c.init_scale, |_, _| Ok(())).map_err(tag)?;
    let q = opt.posterior(&state)?;
    let lambda = opt.cfg.lambda;
    let prior = IsotropicGaussianPrior::new(lambda)?;
    let neg_elbo = -elbo_quadrature_glm(&q, &split.model, &split.train, &prior, DEFAULT_QUADRATURE_ORDER)?.value;
    let mut eval_rng = SeededRng::with_stream(seed, STREAM_EVAL);
    let ev = evaluate(&q, method, &split.model, &split.train, &split.test, lambda, c.eval_samples, &mut eval_rng)?;
    Ok(ComparisonRow {
        method: name.to_string(),
        minibatch: m,
        effective_minibatch: m.min(split.train.len()),
        seed: k,
        sym_kl: symmetric_kl(&q, &split.reference.q)?,
        neg_elbo,
        log_loss: ev.log_loss,
    })
}
