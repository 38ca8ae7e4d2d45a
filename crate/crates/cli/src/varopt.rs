use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vadam::optimizers::OptimizerConfig;
use vadam::varopt::{
    gd_baseline, landscape_objective, quadratic_bowl, vo_run, write_trajectory_csv, AnnealSchedule, LandscapeSign,
    Trajectory, VoMethod, DEFAULT_INITS,
};

use crate::config::{output_dir, parse_strict, write_effective, CliError, CliResult, RawConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoObjective {
    /// The bounded 2-D landscape with a flat peak.
    Landscape,
    /// `½‖θ‖²` in as many dimensions as the initial points have.
    Bowl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaroptConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub objective: VoObjective,
    pub sign: LandscapeSign,
    pub method: VoMethod,
    pub steps: u64,
    /// Annealed runs only; defaults to a linear ramp over all steps.
    pub anneal: Option<AnnealSchedule>,
    pub optimizer: OptimizerConfig,
    pub inits: Vec<Vec<f64>>,
    /// Also run plain gradient descent from the same points.
    pub gd: bool,
    pub gd_alpha: f64,
}

impl Default for VaroptConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            objective: VoObjective::Landscape,
            sign: LandscapeSign::MinimizeNegative,
            method: VoMethod::Vadagrad,
            steps: 2000,
            anneal: None,
            optimizer: OptimizerConfig { alpha: 0.01, beta: 0.01, init_precision: 100.0, ..Default::default() },
            inits: DEFAULT_INITS.iter().map(|p| p.to_vec()).collect(),
            gd: false,
            gd_alpha: 0.01,
        }
    }
}

fn method_tag(m: VoMethod) -> &'static str {
    match m {
        VoMethod::Vadagrad => "vadagrad",
        VoMethod::VadamAnnealed => "vadam-annealed",
    }
}

fn write_all(dir: &Path, tag: &str, trajectories: &[Trajectory]) -> CliResult<()> {
    for (k, tr) in trajectories.iter().enumerate() {
        let f = BufWriter::new(File::create(dir.join(format!("{tag}_{}.csv", k + 1)))?);
        write_trajectory_csv(tr, f)?;
    }
    Ok(())
}

pub fn run(raw: &RawConfig, out_flag: Option<&Path>) -> CliResult<PathBuf> {
    let cfg: VaroptConfig = parse_strict(&raw.table)?;
    if cfg.inits.is_empty() {
        return Err(CliError::Invalid("varopt needs at least one initial point".into()));
    }
    let dim = cfg.inits[0].len();
    if dim == 0 || cfg.inits.iter().any(|p| p.len() != dim) {
        return Err(CliError::Invalid("initial points must share one nonzero dimension".into()));
    }
    let obj = match cfg.objective {
        VoObjective::Landscape if dim != 2 => {
            return Err(CliError::Invalid(format!("the landscape is 2-D, initial points have {dim} coordinates")));
        }
        VoObjective::Landscape => landscape_objective(cfg.sign),
        VoObjective::Bowl => quadratic_bowl(dim),
    };
    if cfg.anneal.is_some() && cfg.method != VoMethod::VadamAnnealed {
        return Err(CliError::Invalid("anneal applies to method vadam-annealed only".into()));
    }
    if let Some(a) = &cfg.anneal {
        a.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
    }
    cfg.optimizer.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
    if cfg.gd && !(cfg.gd_alpha > 0.0 && cfg.gd_alpha.is_finite()) {
        return Err(CliError::Invalid("gd_alpha must be positive".into()));
    }

    let dir = output_dir(out_flag, cfg.output_dir.as_deref());
    std::fs::create_dir_all(&dir)?;
    write_effective(&dir, &cfg)?;
    let runs = vo_run(&obj, cfg.method, &cfg.optimizer, cfg.anneal, &cfg.inits, cfg.seed, cfg.steps)?;
    write_all(&dir, method_tag(cfg.method), &runs)?;
    if cfg.gd {
        write_all(&dir, "gd", &gd_baseline(&obj, cfg.gd_alpha, &cfg.inits, cfg.steps)?)?;
    }
    let truncated = runs.iter().filter(|t| t.truncated).count();
    if truncated > 0 {
        return Err(CliError::Core {
            context: Some(format!("{truncated} trajectories stopped early")),
            source: vadam::Error::NonFinite("variational optimization".into()),
        });
    }
    Ok(dir)
}
