//! Experiment configuration: a TOML file plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use ngvi::optim::{Cadence, Estimator, LikGradMode, Schedule, SgdGradient};
use ngvi::{McSpec, ModelSpec, PriorSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Linreg,
    Logistic,
    Poisson,
}

impl FromStr for ModelChoice {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linreg" | "linear-regression" => Ok(Self::Linreg),
            "logistic" => Ok(Self::Logistic),
            "poisson" => Ok(Self::Poisson),
            _ => bail!("unknown model {s:?} (expected linreg, logistic or poisson)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelChoice,
    /// Observation noise variance (linear regression only).
    #[serde(default = "one")]
    pub noise_var: f64,
    /// Variance of the isotropic zero-mean prior.
    #[serde(default = "one")]
    pub prior_var: f64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n: usize,
        d: usize,
        #[serde(default)]
        seed: u64,
        /// Noise variance for linear-regression targets; defaults to the model's.
        #[serde(default)]
        noise_var: Option<f64>,
    },
    Csv {
        path: PathBuf,
        target: String,
        #[serde(default)]
        categorical: Vec<String>,
        #[serde(default = "yes")]
        standardize: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ngd,
    Sgd,
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ngd" => Ok(Self::Ngd),
            "sgd" => Ok(Self::Sgd),
            _ => bail!("unknown optimizer {s:?} (expected ngd or sgd)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorChoice {
    Exact,
    Subsample,
    Price,
    Reparam,
}

impl FromStr for EstimatorChoice {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "subsample" => Ok(Self::Subsample),
            "price" | "bonnet-price" => Ok(Self::Price),
            "reparam" => Ok(Self::Reparam),
            _ => bail!("unknown estimator {s:?} (expected exact, subsample, price or reparam)"),
        }
    }
}

/// Step-size schedule as written in configs: `2/(2+t)`, `constant:<g>` or `inverse:<c>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec(pub Schedule);

impl FromStr for ScheduleSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if matches!(s, "2/(2+t)" | "default" | "two-over-two-plus-t") {
            return Ok(Self(Schedule::TwoOverTwoPlusT));
        }
        let (kind, value) = s
            .split_once(':')
            .with_context(|| format!("unknown schedule {s:?} (expected 2/(2+t), constant:<g> or inverse:<c>)"))?;
        let v: f64 = value.trim().parse().with_context(|| format!("bad schedule parameter in {s:?}"))?;
        match kind.trim() {
            "constant" => Ok(Self(Schedule::Constant(v))),
            "inverse" => Ok(Self(Schedule::InverseDecay(v))),
            _ => bail!("unknown schedule kind {kind:?}"),
        }
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Schedule::TwoOverTwoPlusT => write!(f, "2/(2+t)"),
            Schedule::Constant(g) => write!(f, "constant:{g}"),
            Schedule::InverseDecay(c) => write!(f, "inverse:{c}"),
        }
    }
}

impl Serialize for ScheduleSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScheduleSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Metric cadence as written in configs: `default`, `every`, `endpoints` or `log:<k>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CadenceSpec(pub Cadence);

impl FromStr for CadenceSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(Self(match s.trim() {
            "default" => Cadence::Default,
            "every" => Cadence::Every,
            "endpoints" => Cadence::Endpoints,
            other => match other.strip_prefix("log:") {
                Some(k) => Cadence::LogSpaced(k.parse().with_context(|| format!("bad cadence {s:?}"))?),
                None => bail!("unknown cadence {s:?} (expected default, every, endpoints or log:<k>)"),
            },
        }))
    }
}

impl fmt::Display for CadenceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Cadence::Default => write!(f, "default"),
            Cadence::Every => write!(f, "every"),
            Cadence::Endpoints => write!(f, "endpoints"),
            Cadence::LogSpaced(k) => write!(f, "log:{k}"),
        }
    }
}

impl Serialize for CadenceSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CadenceSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelConfig,
    pub data: DataSource,
    #[serde(default = "default_method")]
    pub optimizer: Method,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorChoice,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleSpec,
    /// `T`; each run performs `T + 1` updates.
    pub iterations: usize,
    /// Mini-batch size `m`; full data when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Monte Carlo samples per gradient estimate.
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    /// Monte Carlo samples for ELBO and NLPD metrics of non-conjugate models.
    #[serde(default = "default_metric_mc")]
    pub metric_samples: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_cadence")]
    pub cadence: CadenceSpec,
    /// Also compute the negative ELBO and NLPD at cadence points.
    #[serde(default = "yes")]
    pub full_metrics: bool,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Fill the wall-time column; off by default so output is byte-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Cap on concurrently running seeds.
    #[serde(default)]
    pub jobs: Option<usize>,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_method() -> Method {
    Method::Ngd
}
fn default_estimator() -> EstimatorChoice {
    EstimatorChoice::Subsample
}
fn default_schedule() -> ScheduleSpec {
    ScheduleSpec(Schedule::TwoOverTwoPlusT)
}
fn default_mc() -> usize {
    McSpec::TRAINING_SAMPLES
}
fn default_metric_mc() -> usize {
    McSpec::METRIC_SAMPLES
}
fn default_cadence() -> CadenceSpec {
    CadenceSpec(Cadence::Default)
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub output: Option<PathBuf>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub estimator: Option<EstimatorChoice>,
    pub schedule: Option<ScheduleSpec>,
    pub model: Option<ModelChoice>,
    pub optimizer: Option<Method>,
    pub jobs: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        // Relative CSV paths are resolved against the config file's directory.
        if let DataSource::Csv { path: csv, .. } = &mut cfg.data {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(p) = &o.output {
            self.output = p.clone();
        }
        if let Some(t) = o.iterations {
            self.iterations = t;
        }
        if let Some(m) = o.batch_size {
            self.batch_size = Some(m);
        }
        if let Some(e) = o.estimator {
            self.estimator = e;
        }
        if let Some(s) = o.schedule {
            self.schedule = s;
        }
        if let Some(m) = o.model {
            self.model.kind = m;
        }
        if let Some(m) = o.optimizer {
            self.optimizer = m;
        }
        if let Some(j) = o.jobs {
            self.jobs = Some(j);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            bail!("seeds must be distinct");
        }
        if !(self.model.prior_var > 0.0) {
            bail!("prior_var must be positive");
        }
        if self.model.kind == ModelChoice::Linreg && !(self.model.noise_var > 0.0) {
            bail!("noise_var must be positive");
        }
        match &self.data {
            DataSource::Synthetic { n, d, .. } => {
                if *n == 0 || *d == 0 {
                    bail!("synthetic data needs n >= 1 and d >= 1");
                }
            }
            DataSource::Csv { path, .. } => {
                if !path.is_file() {
                    bail!("data file {} does not exist", path.display());
                }
            }
        }
        if self.batch_size == Some(0) {
            bail!("batch_size must be >= 1");
        }
        if self.mc_samples == 0 || self.metric_samples == 0 {
            bail!("Monte Carlo sample counts must be >= 1");
        }
        if self.jobs == Some(0) {
            bail!("jobs must be >= 1");
        }
        if self.optimizer == Method::Ngd {
            self.schedule.0.validate_for_ngd()?;
        }
        let closed = self.model.kind != ModelChoice::Logistic;
        match self.estimator {
            EstimatorChoice::Exact | EstimatorChoice::Subsample if !closed => {
                bail!("the {:?} estimator needs a closed-form expected log-likelihood; use price or reparam for logistic", self.estimator)
            }
            EstimatorChoice::Subsample if self.batch_size.is_none() => bail!("the subsample estimator needs batch_size"),
            _ => {}
        }
        Ok(())
    }

    /// SHA-256 over the settings that determine the output (not where it goes or how many
    /// threads produce it).
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = PathBuf::new();
        canonical.jobs = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn model_spec(&self, d: usize) -> Result<ModelSpec> {
        let latent = match self.model.kind {
            ModelChoice::Logistic => d + 1,
            _ => d,
        };
        let prior = PriorSpec::zero_mean(ngvi::linalg::Matrix::identity(latent, latent) * self.model.prior_var)?;
        Ok(match self.model.kind {
            ModelChoice::Linreg => ModelSpec::linear_regression(self.model.noise_var, prior)?,
            ModelChoice::Logistic => ModelSpec::logistic(prior),
            ModelChoice::Poisson => ModelSpec::poisson(prior),
        })
    }

    pub fn ngd_estimator(&self) -> Estimator {
        match self.estimator {
            EstimatorChoice::Exact => Estimator::Exact,
            EstimatorChoice::Subsample => Estimator::Subsample {
                batch_size: self.batch_size.unwrap_or(1),
            },
            EstimatorChoice::Price => Estimator::Price {
                samples: self.mc_samples,
                batch_size: self.batch_size,
            },
            EstimatorChoice::Reparam => Estimator::Reparam {
                samples: self.mc_samples,
                batch_size: self.batch_size,
            },
        }
    }

    pub fn sgd_gradient(&self) -> SgdGradient {
        let mode = match self.estimator {
            EstimatorChoice::Exact | EstimatorChoice::Subsample => LikGradMode::Closed,
            EstimatorChoice::Price => LikGradMode::Price {
                samples: self.mc_samples,
            },
            EstimatorChoice::Reparam => LikGradMode::Reparam {
                samples: self.mc_samples,
            },
        };
        let batch_size = match self.estimator {
            EstimatorChoice::Exact => None,
            _ => self.batch_size,
        };
        SgdGradient { mode, batch_size }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
name = "toy"
iterations = 100
seeds = [1, 2, 3]
batch_size = 10
schedule = "2/(2+t)"

[model]
kind = "linreg"
noise_var = 0.5

[data]
source = "synthetic"
n = 200
d = 3
seed = 7
"#;

    #[test]
    fn parses_and_overrides() {
        let mut cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.optimizer, Method::Ngd);
        assert_eq!(cfg.cadence.0, Cadence::Default);
        cfg.apply(&Overrides {
            iterations: Some(5),
            schedule: Some("constant:0.5".parse().unwrap()),
            seeds: Some(vec![9]),
            ..Overrides::default()
        });
        assert_eq!(cfg.iterations, 5);
        assert_eq!(cfg.schedule.0, Schedule::Constant(0.5));
        assert_eq!(cfg.seeds, vec![9]);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        let mut b = a.clone();
        b.output = PathBuf::from("/elsewhere");
        b.jobs = Some(3);
        assert_eq!(a.hash(), b.hash());
        b.iterations += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        cfg.model.kind = ModelChoice::Logistic;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        cfg.schedule = ScheduleSpec(Schedule::Constant(1.5));
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("iterations = 1").is_err());
        assert!("inverse:nope".parse::<ScheduleSpec>().is_err());
        assert_eq!("log:5".parse::<CadenceSpec>().unwrap().0, Cadence::LogSpaced(5));
    }
}
