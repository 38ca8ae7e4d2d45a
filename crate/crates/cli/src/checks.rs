//! `theorem1` and `gradcheck`.

use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use vadam::data::{synthetic_linear, synthetic_logistic, synthetic_nonlinear};
use vadam::models::{GradRequest, Model, ModelKind};
use vadam::numkit::{central_diff_grad, relative_error, SeededRng};
use vadam::oracles::{theorem1_enumerate, ENUMERATION_BOUND};

use crate::config::{CliError, CliResult};

pub const THEOREM1_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GlmKind {
    LogisticRegression,
    LinearRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelName {
    LinearRegression,
    LogisticRegression,
    MlpRegression,
    Constant,
}

#[derive(Debug, Args)]
pub struct Theorem1Args {
    /// Dataset size N (at most 14).
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Minibatch sizes, comma separated; defaults to 1..=N.
    #[arg(long, value_delimiter = ',')]
    pub m: Vec<usize>,
    #[arg(long, value_enum, default_value = "logistic-regression")]
    pub model: GlmKind,
    #[arg(long, default_value_t = 3)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random parameter vectors per minibatch size.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Also write the table to this CSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn theorem1(args: &Theorem1Args, stdout: &mut dyn Write) -> CliResult<()> {
    if args.n < 1 || args.n > ENUMERATION_BOUND {
        return Err(CliError::Invalid(format!("--n must lie in 1..={ENUMERATION_BOUND}, got {}", args.n)));
    }
    if args.dim == 0 || args.repeats == 0 {
        return Err(CliError::Invalid("--dim and --repeats must be at least 1".into()));
    }
    let ms: Vec<usize> = if args.m.is_empty() { (1..=args.n).collect() } else { args.m.clone() };
    if let Some(m) = ms.iter().find(|m| **m == 0 || **m > args.n) {
        return Err(CliError::Invalid(format!("minibatch size {m} outside 1..={}", args.n)));
    }
    let (kind, data) = match args.model {
        GlmKind::LogisticRegression => (ModelKind::LogisticRegression, synthetic_logistic(args.seed, args.n, args.dim)),
        GlmKind::LinearRegression => (
            ModelKind::LinearRegression { noise_precision: 1.0 },
            synthetic_linear(args.seed, args.n, args.dim, 1.0),
        ),
    };
    let data = data.map_err(|e| CliError::Invalid(e.to_string()))?;
    let model = Model::new(kind, args.dim)?;
    let mut rng = SeededRng::with_stream(args.seed, 2);
    let thetas: Vec<Vec<f64>> = (0..args.repeats).map(|_| rng.sample_std_normal(model.param_dim())).collect();

    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["repeat", "n", "m", "w", "max_abs_diff"])?;
    let mut worst: f64 = 0.0;
    for (r, theta) in thetas.iter().enumerate() {
        for &m in &ms {
            let rep = theorem1_enumerate(&model, theta, &data, m)?;
            worst = worst.max(rep.max_abs_diff);
            table.write_record([
                r.to_string(),
                rep.n.to_string(),
                rep.m.to_string(),
                rep.w.to_string(),
                rep.max_abs_diff.to_string(),
            ])?;
        }
    }
    let bytes = table.into_inner().map_err(|e| CliError::from(std::io::Error::other(e.to_string())))?;
    stdout.write_all(&bytes)?;
    if let Some(path) = &args.out {
        std::fs::write(path, &bytes)?;
    }
    if worst > THEOREM1_TOLERANCE {
        return Err(CliError::CheckFailed(format!("max_abs_diff {worst:e} exceeds {THEOREM1_TOLERANCE:e}")));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Models to check, comma separated; defaults to all.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub models: Vec<ModelName>,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Perturb the analytic gradient; the check must then fail.
    #[arg(long)]
    pub corrupt_gradient: bool,
}

pub fn gradcheck(args: &GradcheckArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if args.points == 0 {
        return Err(CliError::Invalid("--points must be at least 1".into()));
    }
    if !(args.tolerance > 0.0) {
        return Err(CliError::Invalid("--tolerance must be positive".into()));
    }
    let names = if args.models.is_empty() {
        vec![ModelName::LinearRegression, ModelName::LogisticRegression, ModelName::MlpRegression, ModelName::Constant]
    } else {
        args.models.clone()
    };
    let dim = 3;
    let reg = synthetic_nonlinear(args.seed, 20, dim, 0.3)?;
    let cls = synthetic_logistic(args.seed, 20, dim)?;
    let mut failed = Vec::new();
    writeln!(stdout, "model,points,worst_relative_error,status")?;
    for name in names {
        let kind = match name {
            ModelName::LinearRegression => ModelKind::LinearRegression { noise_precision: 2.0 },
            ModelName::LogisticRegression => ModelKind::LogisticRegression,
            ModelName::MlpRegression => ModelKind::MlpRegression { hidden: 5, noise_precision: 2.0 },
            ModelName::Constant => ModelKind::Constant { value: 0.7 },
        };
        let model = Model::new(kind, dim)?;
        let data = if kind == ModelKind::LogisticRegression { &cls } else { &reg };
        let all = data.all_indices();
        let mut rng = SeededRng::with_stream(args.seed, 2);
        let mut worst: f64 = 0.0;
        let mut ok = true;
        for _ in 0..args.points {
            let theta = rng.sample_std_normal(model.param_dim());
            let mut g = model.minibatch_grad(&theta, data, &all, GradRequest::MEAN)?.ghat;
            if args.corrupt_gradient {
                g[0] += 1e-2 * (1.0 + g[0].abs());
            }
            if matches!(kind, ModelKind::Constant { .. }) && g.iter().any(|v| *v != 0.0) {
                ok = false;
            }
            let fd = central_diff_grad(|t| model.mean_nll(t, data), &theta, args.step)?;
            worst = worst.max(relative_error(&g, &fd));
        }
        ok &= worst <= args.tolerance;
        writeln!(stdout, "{},{},{worst:e},{}", kind.name(), args.points, if ok { "pass" } else { "fail" })?;
        if !ok {
            failed.push(kind.name());
        }
    }
    if !failed.is_empty() {
        return Err(CliError::CheckFailed(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}
