//! JSON run configuration.
//!
//! Field precedence, highest first: command-line flag, the `ASYNC_SGD_SEED`
//! environment variable (seed only), the config document, built-in defaults.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::{NoiseMode, Problem, ProblemError, DEFAULT_ROWS_PER_DIM};
use crate::scheduler::{SchedulerError, SpeedModel};
use crate::schedules::{ProblemConstants, ScheduleError, ScheduleKind, StepSchedule};

pub const SEED_ENV: &str = "ASYNC_SGD_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{SEED_ENV}={0:?} is not an unsigned integer")]
    BadSeedEnv(String),
    #[error("config: {0}")]
    Invalid(String),
    #[error("problem: {0}")]
    Problem(#[from] ProblemError),
    #[error("speed model: {0}")]
    Speed(#[from] SchedulerError),
    #[error("schedule: {0}")]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    LeastSquares {
        d: usize,
        #[serde(default)]
        n: Option<usize>,
        noise: NoiseMode,
        #[serde(default)]
        zeta: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Least squares with a log-uniform Hessian spectrum on `[min_eig, max_eig]`.
    SpectrumLeastSquares {
        d: usize,
        min_eig: f64,
        max_eig: f64,
        radius: f64,
        noise: NoiseMode,
        #[serde(default)]
        seed: u64,
    },
    BoundedNonconvex {
        d: usize,
        #[serde(default = "row_sample")]
        noise: NoiseMode,
        #[serde(default)]
        seed: u64,
    },
    HeterogeneousQuadratics {
        d: usize,
        zeta: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Least squares on a CSV file: features then target on each line.
    Dataset {
        path: PathBuf,
        noise: NoiseMode,
        #[serde(default)]
        zeta: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn row_sample() -> NoiseMode {
    NoiseMode::RowSample
}

pub fn log_uniform_spectrum(d: usize, min_eig: f64, max_eig: f64) -> Vec<f64> {
    if d == 1 {
        return vec![max_eig];
    }
    let (lo, hi) = (min_eig.ln(), max_eig.ln());
    (0..d)
        .map(|i| (lo + (hi - lo) * i as f64 / (d - 1) as f64).exp())
        .collect()
}

impl ProblemSpec {
    pub fn build(&self, workers: usize) -> Result<Problem<f64>, ConfigError> {
        let p = match self {
            ProblemSpec::LeastSquares {
                d,
                n,
                noise,
                zeta,
                seed,
            } => Problem::least_squares(*d, n.unwrap_or(DEFAULT_ROWS_PER_DIM * d), *noise, *seed)?
                .with_heterogeneity(workers, *zeta, *seed)?,
            ProblemSpec::SpectrumLeastSquares {
                d,
                min_eig,
                max_eig,
                radius,
                noise,
                seed,
            } => {
                if !(0.0 < *min_eig && min_eig <= max_eig) {
                    return Err(ConfigError::Invalid("need 0 < min_eig <= max_eig".into()));
                }
                Problem::least_squares_with_spectrum(
                    &log_uniform_spectrum(*d, *min_eig, *max_eig),
                    *radius,
                    *noise,
                    *seed,
                )?
            }
            ProblemSpec::BoundedNonconvex { d, noise, seed } => {
                Problem::bounded_nonconvex_with_noise(*d, *noise, *seed)?
            }
            ProblemSpec::HeterogeneousQuadratics { d, zeta, seed } => {
                Problem::heterogeneous_quadratics(*d, workers, *zeta, *seed)?
            }
            ProblemSpec::Dataset {
                path,
                noise,
                zeta,
                seed,
            } => {
                let file = File::open(path).map_err(|source| ConfigError::Read {
                    path: path.clone(),
                    source,
                })?;
                Problem::from_csv(BufReader::new(file), *noise, *seed)?.with_heterogeneity(workers, *zeta, *seed)?
            }
        };
        Ok(p)
    }
}

/// Replacement values for the analytic problem constants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantOverrides {
    pub l: Option<f64>,
    pub mu: Option<f64>,
    pub g: Option<f64>,
    pub sigma: Option<f64>,
    pub b: Option<f64>,
    pub delta: Option<f64>,
}

impl ConstantOverrides {
    pub fn apply(&self, c: &mut ProblemConstants<f64>) {
        if let Some(v) = self.l {
            c.l = v;
        }
        if let Some(v) = self.mu {
            c.mu = v;
        }
        if let Some(v) = self.g {
            c.g = Some(v);
        }
        if let Some(v) = self.sigma {
            c.sigma = v;
        }
        if let Some(v) = self.b {
            c.b = Some(v);
        }
        if let Some(v) = self.delta {
            c.delta = Some(v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    /// One of the schedule tags, e.g. `adaptive_convex` or `constant`.
    pub tag: String,
    /// Stepsize for `constant`.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// For `constant`: stepsize given as a multiple of `1/(M L)`.
    #[serde(default)]
    pub gamma_over_ml: Option<f64>,
    /// Label used in output file names; defaults to the tag.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub overrides: ConstantOverrides,
}

impl ScheduleSpec {
    pub fn kind(&self) -> Result<ScheduleKind, ConfigError> {
        Ok(self.tag.parse::<ScheduleKind>()?)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.tag.clone())
    }

    pub fn build(
        &self,
        problem: &Problem<f64>,
        workers: usize,
        horizon: u64,
    ) -> Result<StepSchedule<f64>, ConfigError> {
        let kind = self.kind()?;
        let mut c = problem.constants(workers, horizon);
        self.overrides.apply(&mut c);
        if kind == ScheduleKind::Constant {
            let gamma = match (self.gamma, self.gamma_over_ml) {
                (Some(g), None) => g,
                (None, Some(f)) => f / (workers as f64 * c.l),
                _ => {
                    return Err(ConfigError::Invalid(
                        "schedule `constant` needs exactly one of `gamma` or `gamma_over_ml`".into(),
                    ))
                }
            };
            return Ok(StepSchedule::constant(gamma, c)?);
        }
        if self.gamma.is_some() || self.gamma_over_ml.is_some() {
            return Err(ConfigError::Invalid(format!(
                "schedule `{}` does not take an explicit stepsize",
                self.tag
            )));
        }
        Ok(StepSchedule::new(kind, c)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_prefix")]
    pub prefix: String,
}

fn default_dir() -> PathBuf {
    PathBuf::from(".")
}

fn default_prefix() -> String {
    "run".into()
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            prefix: default_prefix(),
        }
    }
}

/// Minibatch baseline settings for `compare`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinibatchSpec {
    /// Stepsize; defaults to `1/L`.
    #[serde(default)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub speed: SpeedModel,
    pub schedules: Vec<ScheduleSpec>,
    /// Number of arrivals `K`.
    #[serde(default)]
    pub horizon: Option<u64>,
    /// Wall-clock budget `S`; used when `horizon` is absent and by `compare`.
    #[serde(default)]
    pub duration: Option<f64>,
    /// Noise seed of the first repetition; repetition `r` uses `seed + r`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repetitions: u32,
    #[serde(default)]
    pub diagnostics: bool,
    #[serde(default = "one_u64")]
    pub metric_stride: u64,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub minibatch: Option<MinibatchSpec>,
}

fn one() -> u32 {
    1
}

fn one_u64() -> u64 {
    1
}

/// Command-line values that take precedence over the document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub horizon: Option<u64>,
    pub duration: Option<f64>,
    pub repetitions: Option<u32>,
    pub out_dir: Option<PathBuf>,
    pub prefix: Option<String>,
    pub diagnostics: bool,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.speed.validate()?;
        if self.schedules.is_empty() {
            return Err(ConfigError::Invalid(
                "`schedules` must list at least one schedule".into(),
            ));
        }
        for s in &self.schedules {
            s.kind()?;
        }
        if self.repetitions == 0 {
            return Err(ConfigError::Invalid("`repetitions` must be at least 1".into()));
        }
        if let Some(s) = self.duration {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(ConfigError::Invalid(
                    "`duration` must be finite and non-negative".into(),
                ));
            }
        }
        Ok(())
    }

    /// Apply flags, then the seed environment variable.
    pub fn apply(&mut self, o: &Overrides, env_seed: Option<&str>) -> Result<(), ConfigError> {
        match (o.seed, env_seed) {
            (Some(s), _) => self.seed = s,
            (None, Some(v)) => self.seed = v.trim().parse().map_err(|_| ConfigError::BadSeedEnv(v.to_string()))?,
            (None, None) => {}
        }
        if let Some(h) = o.horizon {
            self.horizon = Some(h);
        }
        if let Some(s) = o.duration {
            self.duration = Some(s);
        }
        if let Some(r) = o.repetitions {
            self.repetitions = r;
        }
        if let Some(d) = &o.out_dir {
            self.output.dir = d.clone();
        }
        if let Some(p) = &o.prefix {
            self.output.prefix = p.clone();
        }
        if o.diagnostics {
            self.diagnostics = true;
        }
        self.validate()
    }

    pub fn workers(&self) -> usize {
        self.speed.num_workers()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "problem": {"kind": "least_squares", "d": 1, "noise": {"mode": "additive", "sigma": 0.0}},
        "speed": {"kind": "fixed", "seconds": [1.0]},
        "schedules": [{"tag": "adaptive_convex"}],
        "horizon": 10
    }"#;

    #[test]
    fn minimal_config_parses() {
        let c = RunConfig::from_json(MINIMAL, Path::new("x.json")).unwrap();
        assert_eq!(c.workers(), 1);
        assert_eq!(c.repetitions, 1);
        let p = c.problem.build(1).unwrap();
        let s = c.schedules[0].build(&p, 1, 10).unwrap();
        assert_eq!(s.kind(), ScheduleKind::AdaptiveConvex);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("\"horizon\": 10", "\"horizon\": 10, \"horizn\": 3");
        let err = RunConfig::from_json(&bad, Path::new("x.json")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("horizn") && msg.contains("line"), "{msg}");
        let bad = MINIMAL.replace("\"d\": 1,", "\"d\": 1, \"q\": 2,");
        assert!(RunConfig::from_json(&bad, Path::new("x.json")).is_err());
    }

    #[test]
    fn bad_tag_is_rejected() {
        let bad = MINIMAL.replace("adaptive_convex", "adaptive_magic");
        let err = RunConfig::from_json(&bad, Path::new("x.json")).unwrap_err();
        assert!(matches!(err, ConfigError::Schedule(ScheduleError::UnknownTag(_))));
    }

    #[test]
    fn seed_precedence() {
        let mut c = RunConfig::from_json(MINIMAL, Path::new("x.json")).unwrap();
        c.seed = 1;
        c.apply(&Overrides::default(), Some("7")).unwrap();
        assert_eq!(c.seed, 7);
        c.apply(
            &Overrides {
                seed: Some(9),
                ..Default::default()
            },
            Some("7"),
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert!(c.apply(&Overrides::default(), Some("x")).is_err());
    }

    #[test]
    fn constant_schedule_needs_one_stepsize() {
        let c = RunConfig::from_json(MINIMAL, Path::new("x.json")).unwrap();
        let p = c.problem.build(1).unwrap();
        let spec = ScheduleSpec {
            tag: "constant".into(),
            gamma: None,
            gamma_over_ml: Some(0.5),
            name: None,
            overrides: ConstantOverrides::default(),
        };
        let s = spec.build(&p, 2, 10).unwrap();
        assert!((s.gamma(1, 1) - 0.25 / p.l()).abs() < 1e-15);
        let both = ScheduleSpec {
            gamma: Some(0.1),
            ..spec
        };
        assert!(both.build(&p, 2, 10).is_err());
    }

    #[test]
    fn spectrum_is_log_uniform() {
        let s = log_uniform_spectrum(3, 0.01, 1.0);
        assert!((s[1] - 0.1).abs() < 1e-15);
        assert_eq!(s[2], 1.0);
    }
}
