//! Dataset ingestion, synthetic generators, standardization and splits.

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Dataset, Task};
use crate::numkit::{sigmoid, SeededRng};

/// Reads LIBSVM text: `<label> <idx>:<val> ...` with 1-based increasing indices.
///
/// Any positive label maps to `+1`, everything else to `−1`. The feature
/// dimension is the largest index seen (at least 1).
pub fn parse_libsvm(reader: impl BufRead) -> Result<Dataset> {
    parse_libsvm_dim(reader, 0)
}

/// As [`parse_libsvm`] but with at least `min_dim` features.
pub fn parse_libsvm_dim(reader: impl BufRead, min_dim: usize) -> Result<Dataset> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut dim = min_dim.max(1);
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut tokens = body.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 = label_tok
            .parse()
            .ok()
            .filter(|v: &f64| !v.is_nan())
            .ok_or_else(|| Error::Parse { line: lineno, message: format!("unmappable label {label_tok:?}") })?;
        let mut row = Vec::new();
        let mut last = 0usize;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| Error::Parse { line: lineno, message: format!("malformed token {tok:?}") })?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Parse { line: lineno, message: format!("bad feature index in {tok:?}") })?;
            let val: f64 = val
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Parse { line: lineno, message: format!("bad feature value in {tok:?}") })?;
            if idx == 0 || idx <= last {
                return Err(Error::Parse { line: lineno, message: format!("feature indices must be 1-based and increasing, got {idx} after {last}") });
            }
            last = idx;
            row.push((idx - 1, val));
        }
        dim = dim.max(last);
        rows.push(row);
        labels.push(if label > 0.0 { 1.0 } else { -1.0 });
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 0, message: "no examples".into() });
    }
    let mut features = vec![0.0; rows.len() * dim];
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            features[i * dim + j] = v;
        }
    }
    Dataset::new(features, labels, dim, Task::Classification)
}

/// Writes LIBSVM text. The last feature index is always emitted so the
/// dimension survives a round trip.
pub fn write_libsvm(data: &Dataset, mut out: impl Write) -> Result<()> {
    let d = data.dim();
    for i in 0..data.len() {
        write!(out, "{}", if data.target(i) > 0.0 { "+1" } else { "-1" })?;
        for (j, &v) in data.row(i).iter().enumerate() {
            if v != 0.0 || j + 1 == d {
                write!(out, " {}:{}", j + 1, v)?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvOptions {
    /// Zero-based target column; `None` means the last column.
    pub target_column: Option<usize>,
    pub has_header: bool,
    pub delimiter: u8,
    pub task: Task,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self { target_column: None, has_header: false, delimiter: b',', task: Task::Regression }
    }
}

/// Reads a numeric CSV. Every non-target column becomes a feature.
pub fn parse_csv_numeric(reader: impl Read, opts: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .delimiter(opts.delimiter)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut width = None;
    for (k, record) in rdr.records().enumerate() {
        let lineno = k + 1 + usize::from(opts.has_header);
        let record = record.map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let w = record.len();
        if *width.get_or_insert(w) != w {
            return Err(Error::Parse { line: lineno, message: format!("ragged row with {w} fields") });
        }
        if w < 2 {
            return Err(Error::Parse { line: lineno, message: "need at least one feature and a target".into() });
        }
        let target = opts.target_column.unwrap_or(w - 1);
        if target >= w {
            return Err(Error::Parse { line: lineno, message: format!("target column {target} out of range") });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Parse { line: lineno, message: format!("non-numeric cell {cell:?} in column {j}") })?;
            if j == target {
                targets.push(match opts.task {
                    Task::Classification => {
                        if v > 0.0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    Task::Regression => v,
                });
            } else {
                features.push(v);
            }
        }
    }
    let Some(w) = width else {
        return Err(Error::Parse { line: 0, message: "no rows".into() });
    };
    Dataset::new(features, targets, w - 1, opts.task)
}

/// Per-feature affine map `x ↦ (x − mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Population statistics of `train`; zero-variance features get scale 1.
    pub fn fit(train: &Dataset) -> Self {
        let (n, d) = (train.len() as f64, train.dim());
        let mut mean = vec![0.0; d];
        for i in 0..train.len() {
            for (m, x) in mean.iter_mut().zip(train.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..train.len() {
            for ((v, x), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var.iter().map(|v| if *v > 0.0 { (v / n).sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        self.map(data, |x, m, s| (x - m) / s)
    }

    pub fn inverse(&self, data: &Dataset) -> Result<Dataset> {
        self.map(data, |x, m, s| x * s + m)
    }

    fn map(&self, data: &Dataset, f: impl Fn(f64, f64, f64) -> f64) -> Result<Dataset> {
        if data.dim() != self.mean.len() {
            return Err(Error::DimensionMismatch { expected: self.mean.len(), found: data.dim() });
        }
        let d = data.dim();
        let features = data
            .features()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, self.mean[k % d], self.scale[k % d]))
            .collect();
        Dataset::new(features, data.targets().to_vec(), d, data.task())
    }
}

/// Standardizes features with statistics from `train` only.
pub fn standardize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, Standardizer)> {
    let t = Standardizer::fit(train);
    Ok((t.apply(train)?, t.apply(test)?, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub standardize: bool,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        Ok(())
    }

    /// Shuffled train/test index sets; together they partition `0..n`.
    pub fn indices(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        self.validate()?;
        if n < 2 {
            return Err(Error::InvalidArgument("splitting needs at least two rows".into()));
        }
        let perm = SeededRng::new(self.seed).minibatch(n, n);
        let n_train = ((self.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let (train, test) = perm.split_at(n_train);
        Ok((train.to_vec(), test.to_vec()))
    }
}

pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Option<Standardizer>)> {
    let (tr, te) = spec.indices(data.len())?;
    let (train, test) = (data.subset(&tr)?, data.subset(&te)?);
    if spec.standardize {
        let (train, test, t) = standardize(&train, &test)?;
        Ok((train, test, Some(t)))
    } else {
        Ok((train, test, None))
    }
}

/// Polynomial learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub alpha0: f64,
    pub beta0: f64,
    pub decay_exponent: f64,
}

impl Schedule {
    pub const DEFAULT_EXPONENT: f64 = 0.55;

    pub fn new(alpha0: f64, beta0: f64) -> Result<Self> {
        if !(alpha0 > 0.0) || !(beta0 > 0.0 && beta0 < 1.0) {
            return Err(Error::InvalidArgument(format!("schedule needs alpha0 > 0 and 0 < beta0 < 1, got ({alpha0}, {beta0})")));
        }
        Ok(Self { alpha0, beta0, decay_exponent: Self::DEFAULT_EXPONENT })
    }
}

/// `α_t = α₀/(1 + t^p)`, `β_t = 1 − (1 − β₀)/(1 + t^p)`.
pub fn schedule_rates(sch: &Schedule, t: u64) -> (f64, f64) {
    let denom = 1.0 + (t as f64).powf(sch.decay_exponent);
    (sch.alpha0 / denom, 1.0 - (1.0 - sch.beta0) / denom)
}

/// Two-class Gaussian mixture in 2-D with a shared covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyMixture {
    pub mean_pos: [f64; 2],
    pub mean_neg: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Default for ToyMixture {
    fn default() -> Self {
        Self { mean_pos: [1.0, 1.0], mean_neg: [-1.0, -1.0], cov: [[1.0, 0.3], [0.3, 1.0]] }
    }
}

impl ToyMixture {
    fn cholesky(&self) -> Result<[f64; 3]> {
        let [[a, b], [c, d]] = self.cov;
        if b != c || !(a > 0.0) {
            return Err(Error::InvalidArgument("toy covariance must be symmetric positive definite".into()));
        }
        let l11 = a.sqrt();
        let l21 = b / l11;
        let r = d - l21 * l21;
        if !(r > 0.0) {
            return Err(Error::InvalidArgument("toy covariance must be symmetric positive definite".into()));
        }
        Ok([l11, l21, r.sqrt()])
    }

    /// Alternating labels starting with `+1`, so classes are balanced.
    pub fn sample(&self, seed: u64, n: usize) -> Result<Dataset> {
        if n < 2 {
            return Err(Error::InvalidArgument("toy dataset needs N >= 2".into()));
        }
        let [l11, l21, l22] = self.cholesky()?;
        let mut rng = SeededRng::new(seed);
        let mut features = Vec::with_capacity(2 * n);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let (y, m) = if i % 2 == 0 { (1.0, self.mean_pos) } else { (-1.0, self.mean_neg) };
            let z = rng.sample_std_normal(2);
            features.push(m[0] + l11 * z[0]);
            features.push(m[1] + l21 * z[0] + l22 * z[1]);
            targets.push(y);
        }
        Dataset::new(features, targets, 2, Task::Classification)
    }
}

pub fn toy_two_gaussians(seed: u64, n: usize) -> Result<Dataset> {
    ToyMixture::default().sample(seed, n)
}

/// Logistic-regression data with standard-normal features and a
/// standard-normal true weight vector.
pub fn synthetic_logistic(seed: u64, n: usize, d: usize) -> Result<Dataset> {
    let mut rng = SeededRng::new(seed);
    let w = rng.sample_std_normal(d);
    let features = rng.sample_std_normal(n * d);
    let targets = (0..n)
        .map(|i| {
            let a: f64 = features[i * d..(i + 1) * d].iter().zip(&w).map(|(x, w)| x * w).sum();
            if rng.uniform() < sigmoid(a) {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    Dataset::new(features, targets, d, Task::Classification)
}

/// `y = Xw + ε` with `w ~ N(0, I)` and `ε ~ N(0, 1/τ)`.
pub fn synthetic_linear(seed: u64, n: usize, d: usize, noise_precision: f64) -> Result<Dataset> {
    if !(noise_precision > 0.0) {
        return Err(Error::InvalidArgument("noise precision must be positive".into()));
    }
    let mut rng = SeededRng::new(seed);
    let w = rng.sample_std_normal(d);
    let features = rng.sample_std_normal(n * d);
    let noise = rng.sample_std_normal(n);
    let sd = noise_precision.sqrt().recip();
    let targets = (0..n)
        .map(|i| features[i * d..(i + 1) * d].iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + sd * noise[i])
        .collect();
    Dataset::new(features, targets, d, Task::Regression)
}

/// Nonlinear regression: `y = (1/√D) Σ_j sin(2 x_j) + ½ x₁ + ε`, `x ~ N(0, I)`.
pub fn synthetic_nonlinear(seed: u64, n: usize, d: usize, noise_sd: f64) -> Result<Dataset> {
    let mut rng = SeededRng::new(seed);
    let features = rng.sample_std_normal(n * d);
    let noise = rng.sample_std_normal(n);
    let c = (d as f64).sqrt().recip();
    let targets = (0..n)
        .map(|i| {
            let x = &features[i * d..(i + 1) * d];
            c * x.iter().map(|v| (2.0 * v).sin()).sum::<f64>() + 0.5 * x[0] + noise_sd * noise[i]
        })
        .collect();
    Dataset::new(features, targets, d, Task::Regression)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Libsvm,
    Csv,
}

/// JSON description of a dataset file. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub format: DataFormat,
    #[serde(default)]
    pub target_column: Option<usize>,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default)]
    pub split: Option<SplitSpec>,
}

fn default_delimiter() -> char {
    ','
}

fn default_task() -> Task {
    Task::Classification
}

impl DatasetManifest {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: Self = serde_json::from_str(&text)?;
        if m.path.is_relative() {
            if let Some(dir) = path.parent() {
                m.path = dir.join(&m.path);
            }
        }
        Ok(m)
    }

    pub fn load(&self) -> Result<Dataset> {
        let file = std::fs::File::open(&self.path)?;
        match self.format {
            DataFormat::Libsvm => parse_libsvm(std::io::BufReader::new(file)),
            DataFormat::Csv => {
                if !self.delimiter.is_ascii() {
                    return Err(Error::InvalidArgument(format!("delimiter {:?} is not ASCII", self.delimiter)));
                }
                let opts = CsvOptions {
                    target_column: self.target_column,
                    has_header: self.has_header,
                    delimiter: self.delimiter as u8,
                    task: self.task,
                };
                parse_csv_numeric(file, &opts)
            }
        }
    }
}
