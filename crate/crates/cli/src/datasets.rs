use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use vadam::data::{
    split, synthetic_linear, synthetic_logistic, synthetic_nonlinear, toy_two_gaussians, DatasetManifest, SplitSpec,
};
use vadam::models::Dataset;

use crate::config::{CliError, CliResult, RawConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Synthetic {
    /// Two 2-D Gaussian classes; `dim` is ignored.
    ToyMixture,
    Logistic,
    Linear,
    Nonlinear,
}

/// `[data]` section. A manifest, when given, replaces the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub synthetic: Synthetic,
    pub n: usize,
    pub dim: usize,
    pub noise_precision: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// `1.0` trains and evaluates on the same rows.
    pub train_fraction: f64,
    pub split_seed: u64,
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: Synthetic::ToyMixture,
            n: 60,
            dim: 2,
            noise_precision: 1.0,
            noise_sd: 0.3,
            seed: 0,
            train_fraction: 1.0,
            split_seed: 0,
            standardize: false,
        }
    }
}

impl DataConfig {
    /// Makes the manifest path absolute so the effective config can be rerun
    /// from any directory. Fails if the file is missing.
    pub fn resolve(&mut self, raw: &RawConfig) -> CliResult<()> {
        if let Some(p) = &self.manifest {
            let full = raw.resolve(p);
            let full = full
                .canonicalize()
                .map_err(|e| CliError::Invalid(format!("dataset manifest {}: {e}", full.display())))?;
            self.manifest = Some(full);
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(CliError::Invalid(format!("data.train_fraction must lie in (0, 1], got {}", self.train_fraction)));
        }
        Ok(())
    }

    fn full(&self) -> CliResult<(Dataset, Option<SplitSpec>)> {
        if let Some(path) = &self.manifest {
            let m = DatasetManifest::from_file(path).map_err(CliError::at(format!("manifest {}", path.display())))?;
            let data = m.load().map_err(CliError::at(format!("dataset {}", m.path.display())))?;
            return Ok((data, m.split));
        }
        let data = match self.synthetic {
            Synthetic::ToyMixture => toy_two_gaussians(self.seed, self.n),
            Synthetic::Logistic => synthetic_logistic(self.seed, self.n, self.dim),
            Synthetic::Linear => synthetic_linear(self.seed, self.n, self.dim, self.noise_precision),
            Synthetic::Nonlinear => synthetic_nonlinear(self.seed, self.n, self.dim, self.noise_sd),
        }
        .map_err(|e| CliError::Invalid(format!("data: {e}")))?;
        Ok((data, None))
    }

    /// Train and test sets for split number `offset`. A manifest split is
    /// used only when `train_fraction` is left at 1.
    pub fn load(&self, offset: u64) -> CliResult<(Dataset, Dataset)> {
        let (data, manifest_split) = self.full()?;
        let spec = if self.train_fraction < 1.0 {
            Some(SplitSpec {
                train_fraction: self.train_fraction,
                seed: self.split_seed.wrapping_add(offset),
                standardize: self.standardize,
            })
        } else {
            manifest_split.map(|s| SplitSpec { seed: s.seed.wrapping_add(offset), ..s })
        };
        match spec {
            Some(spec) => {
                let (train, test, _) = split(&data, &spec).map_err(|e| CliError::Invalid(format!("data split: {e}")))?;
                Ok((train, test))
            }
            None => Ok((data.clone(), data)),
        }
    }
}
