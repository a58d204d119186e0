//! Experiment settings and the `key = value` configuration format.
//!
//! One assignment per line, dotted keys, `#` starts a comment. Lists are
//! comma-separated. Command-line flags are applied as further assignments on
//! top of the file, so both go through the same parsing and validation.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::family::{BaseDistribution, Family};
use crate::optimizer::Method;
use crate::targets::GlobalPrior;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Sweep,
    Scaling,
    Variance,
    Nonconvex,
    Run,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Scaling => "scaling",
            ExperimentKind::Variance => "variance",
            ExperimentKind::Nonconvex => "nonconvex",
            ExperimentKind::Run => "run",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "sweep" => Some(ExperimentKind::Sweep),
            "scaling" => Some(ExperimentKind::Scaling),
            "variance" => Some(ExperimentKind::Variance),
            "nonconvex" => Some(ExperimentKind::Nonconvex),
            "run" | "single-run" | "single_run" => Some(ExperimentKind::Run),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// Isotropic hierarchical Gaussian with `n` local blocks.
    Synthetic,
    /// Random SPD quadratic components on the same hierarchical layout.
    Quadratic,
    /// Linear-Gaussian hierarchical model with correlated locals.
    Correlated,
}

impl TargetKind {
    pub fn name(&self) -> &'static str {
        match self {
            TargetKind::Synthetic => "synthetic",
            TargetKind::Quadratic => "quadratic",
            TargetKind::Correlated => "correlated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "synthetic" => Some(TargetKind::Synthetic),
            "quadratic" => Some(TargetKind::Quadratic),
            "correlated" => Some(TargetKind::Correlated),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub d_z: usize,
    pub d_y: usize,
    /// Number of local blocks; one experiment cell group per entry.
    pub n: Vec<usize>,
    pub mean: f64,
    pub variance: f64,
    pub global_prior: GlobalPrior,
    /// Eigenvalue spread of random quadratic components.
    pub condition: f64,
    /// Observation file for the correlated model (one row per block).
    pub data: Option<PathBuf>,
}

/// Log-spaced stepsize grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepsizeGrid {
    pub count: usize,
    pub low: f64,
    pub high: f64,
}

impl StepsizeGrid {
    /// `low * (high / low)^(k / (count - 1))` for `k = 0..count`.
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.low];
        }
        let span = (self.high / self.low).ln();
        (0..self.count)
            .map(|k| {
                if k + 1 == self.count {
                    self.high
                } else {
                    self.low * (span * k as f64 / (self.count - 1) as f64).exp()
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSettings {
    /// Independent gradient estimates per variance measurement.
    pub outer: usize,
    /// Random feasible `lambda` per (family, n, M).
    pub points: usize,
    /// Sample sizes `M`; empty means the `samples` setting.
    pub m: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NonconvexSettings {
    pub x_low: f64,
    pub x_high: f64,
    pub y_low: f64,
    pub y_high: f64,
    /// Points per axis.
    pub count: usize,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub stepsize: f64,
    /// ELBO cadence; 0 disables ELBO evaluation.
    pub eval_every: usize,
    pub eval_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub target: TargetSpec,
    pub families: Vec<Family>,
    pub stepsize: StepsizeGrid,
    pub eps: f64,
    pub samples: usize,
    pub tmax: usize,
    pub reps: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub base: BaseDistribution,
    pub method: Method,
    /// Abandon sweep cells that are extrapolated to miss `eps` in budget.
    pub prune: bool,
    pub variance: VarianceSettings,
    pub nonconvex: NonconvexSettings,
    pub run: RunSettings,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            target: TargetSpec {
                kind: TargetKind::Synthetic,
                d_z: 5,
                d_y: 3,
                n: vec![100],
                mean: 5.0,
                variance: 0.1,
                global_prior: GlobalPrior::Once,
                condition: 10.0,
                data: None,
            },
            families: Family::ALL.to_vec(),
            stepsize: StepsizeGrid {
                count: 50,
                low: 1e-6,
                high: 1.0,
            },
            eps: 1.0,
            samples: 8,
            tmax: 60_000,
            reps: 3,
            seed: 1,
            out: PathBuf::from("results"),
            base: BaseDistribution::StandardGaussian,
            method: Method::ProximalSgd,
            prune: true,
            variance: VarianceSettings {
                outer: 2000,
                points: 10,
                m: Vec::new(),
            },
            nonconvex: NonconvexSettings {
                x_low: -2.0,
                x_high: 2.0,
                y_low: -2.0,
                y_high: 2.0,
                count: 20,
                z: 0.0,
            },
            run: RunSettings {
                stepsize: 1e-3,
                eval_every: 100,
                eval_samples: 64,
            },
        }
    }

    /// Applies every assignment in `text`, then validates.
    pub fn from_text(kind: ExperimentKind, text: &str) -> Result<Self> {
        let mut cfg = Self::new(kind);
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (without validating, so flags can still override).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    line.split_whitespace().next().unwrap_or(line),
                    format!("line {}: expected `key = value`", lineno + 1),
                )
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key. Unknown keys and unparsable values are errors naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "experiment" => {
                self.kind = ExperimentKind::parse(value)
                    .ok_or_else(|| bad(key, value, "an experiment kind"))?
            }
            "target.kind" => {
                self.target.kind = TargetKind::parse(value)
                    .ok_or_else(|| bad(key, value, "synthetic, quadratic or correlated"))?
            }
            "target.d_z" => self.target.d_z = parse(key, value)?,
            "target.d_y" => self.target.d_y = parse(key, value)?,
            "target.n" | "n" => self.target.n = parse_list(key, value)?,
            "target.mean" => self.target.mean = parse(key, value)?,
            "target.variance" => self.target.variance = parse(key, value)?,
            "target.global_prior" => {
                self.target.global_prior = GlobalPrior::parse(value)
                    .ok_or_else(|| bad(key, value, "once or per_component"))?
            }
            "target.condition" => self.target.condition = parse(key, value)?,
            "target.data" => self.target.data = Some(PathBuf::from(value)),
            "family" | "families" => {
                self.families = split(value)
                    .map(|f| {
                        Family::parse(f)
                            .ok_or_else(|| bad(key, f, "mean_field, full_rank or structured"))
                    })
                    .collect::<Result<_>>()?
            }
            "stepsize.count" => self.stepsize.count = parse(key, value)?,
            "stepsize.low" => self.stepsize.low = parse(key, value)?,
            "stepsize.high" => self.stepsize.high = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "samples" | "m" => self.samples = parse(key, value)?,
            "tmax" => self.tmax = parse(key, value)?,
            "reps" => self.reps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "base" => {
                self.base = match value {
                    "gaussian" => BaseDistribution::StandardGaussian,
                    "uniform" => BaseDistribution::ScaledUniform,
                    _ => return Err(bad(key, value, "gaussian or uniform")),
                }
            }
            "method" => {
                self.method = Method::parse(value)
                    .ok_or_else(|| bad(key, value, "proximal_sgd, sgd or adam"))?
            }
            "sweep.prune" => self.prune = parse(key, value)?,
            "variance.outer" => self.variance.outer = parse(key, value)?,
            "variance.points" => self.variance.points = parse(key, value)?,
            "variance.m" => self.variance.m = parse_list(key, value)?,
            "nonconvex.x_low" => self.nonconvex.x_low = parse(key, value)?,
            "nonconvex.x_high" => self.nonconvex.x_high = parse(key, value)?,
            "nonconvex.y_low" => self.nonconvex.y_low = parse(key, value)?,
            "nonconvex.y_high" => self.nonconvex.y_high = parse(key, value)?,
            "nonconvex.count" => self.nonconvex.count = parse(key, value)?,
            "nonconvex.z" => self.nonconvex.z = parse(key, value)?,
            "run.stepsize" => self.run.stepsize = parse(key, value)?,
            "run.eval_every" => self.run.eval_every = parse(key, value)?,
            "run.eval_samples" => self.run.eval_samples = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {v}")))
            }
        };
        let at_least_one = |key: &str, v: usize| -> Result<()> {
            if v >= 1 {
                Ok(())
            } else {
                Err(Error::config(key, "must be at least 1"))
            }
        };
        positive("stepsize.low", self.stepsize.low)?;
        positive("stepsize.high", self.stepsize.high)?;
        at_least_one("stepsize.count", self.stepsize.count)?;
        if self.stepsize.count > 1 && !(self.stepsize.low < self.stepsize.high) {
            return Err(Error::config(
                "stepsize.low",
                format!(
                    "must be below stepsize.high ({} >= {})",
                    self.stepsize.low, self.stepsize.high
                ),
            ));
        }
        positive("eps", self.eps)?;
        at_least_one("samples", self.samples)?;
        at_least_one("tmax", self.tmax)?;
        at_least_one("reps", self.reps)?;
        at_least_one("target.d_y", self.target.d_y)?;
        positive("target.variance", self.target.variance)?;
        if !self.target.mean.is_finite() {
            return Err(Error::config("target.mean", "must be finite"));
        }
        if !(self.target.condition >= 1.0 && self.target.condition.is_finite()) {
            return Err(Error::config("target.condition", "must be at least 1"));
        }
        if self.target.n.is_empty() {
            return Err(Error::config("target.n", "list is empty"));
        }
        if self.target.n.contains(&0) {
            return Err(Error::config("target.n", "block counts must be at least 1"));
        }
        if self.families.is_empty() {
            return Err(Error::config("family", "list is empty"));
        }
        if self.variance.outer < 3 {
            return Err(Error::config("variance.outer", "must be at least 3"));
        }
        at_least_one("variance.points", self.variance.points)?;
        if self.variance.m.contains(&0) {
            return Err(Error::config(
                "variance.m",
                "sample sizes must be at least 1",
            ));
        }
        at_least_one("nonconvex.count", self.nonconvex.count)?;
        for (key, lo, hi) in [
            (
                "nonconvex.x_low",
                self.nonconvex.x_low,
                self.nonconvex.x_high,
            ),
            (
                "nonconvex.y_low",
                self.nonconvex.y_low,
                self.nonconvex.y_high,
            ),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || (self.nonconvex.count > 1 && !(lo < hi)) {
                return Err(Error::config(key, "range must be finite with low < high"));
            }
        }
        positive("run.stepsize", self.run.stepsize)?;
        if self.run.eval_every > 0 {
            at_least_one("run.eval_samples", self.run.eval_samples)?;
        }
        Ok(())
    }

    /// Sample sizes for the variance experiment.
    pub fn variance_sizes(&self) -> Vec<usize> {
        if self.variance.m.is_empty() {
            vec![self.samples]
        } else {
            self.variance.m.clone()
        }
    }
}

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::config(key, format!("`{value}` is not {expected}"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn split(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    split(value).map(|v| parse(key, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a configuration error, got {other}"),
        }
    }

    #[test]
    fn empty_config_is_the_default_sweep() {
        let c = ExperimentConfig::from_text(ExperimentKind::Sweep, "").unwrap();
        assert_eq!(c, ExperimentConfig::new(ExperimentKind::Sweep));
        assert_eq!(
            (c.target.d_z, c.target.d_y, c.eps, c.samples),
            (5, 3, 1.0, 8)
        );
        assert_eq!((c.tmax, c.reps), (60_000, 3));
        let g = c.stepsize.values();
        assert_eq!(g.len(), 50);
        assert_eq!((g[0], g[49]), (1e-6, 1.0));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn reversed_grid_names_low_endpoint() {
        let e = ExperimentConfig::from_text(
            ExperimentKind::Sweep,
            "stepsize.low = 1\nstepsize.high = 1e-3",
        )
        .unwrap_err();
        assert_eq!(key_of(e), "stepsize.low");
    }

    #[test]
    fn lists_comments_and_values() {
        let text = "# scaling study\ntarget.n = 100,200, 300\nfamily = structured,full_rank  # two\neps = 0.5\nsweep.prune = false\n";
        let c = ExperimentConfig::from_text(ExperimentKind::Scaling, text).unwrap();
        assert_eq!(c.target.n, vec![100, 200, 300]);
        assert_eq!(c.families, vec![Family::Structured, Family::FullRank]);
        assert_eq!(c.eps, 0.5);
        assert!(!c.prune);
    }

    #[test]
    fn bad_entries_name_their_key() {
        let cases = [
            ("reps = 0", "reps"),
            ("eps = -1", "eps"),
            ("tmax = lots", "tmax"),
            ("family = dense", "family"),
            ("bogus = 1", "bogus"),
            ("target.n = 10,0", "target.n"),
            ("samples = 0", "samples"),
            ("just words", "just"),
        ];
        for (text, key) in cases {
            let e = ExperimentConfig::from_text(ExperimentKind::Sweep, text).unwrap_err();
            assert_eq!(key_of(e), key, "{text}");
        }
    }

    #[test]
    fn later_assignments_override() {
        let mut c = ExperimentConfig::new(ExperimentKind::Sweep);
        c.apply_text("seed = 4\nreps = 5").unwrap();
        c.set("reps", "2").unwrap();
        assert_eq!((c.seed, c.reps), (4, 2));
    }

    #[test]
    fn single_point_grid() {
        let g = StepsizeGrid {
            count: 1,
            low: 0.01,
            high: 0.01,
        };
        assert_eq!(g.values(), vec![0.01]);
    }
}
