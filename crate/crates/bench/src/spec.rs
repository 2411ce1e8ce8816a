//! Experiment descriptions and their validation.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use knn_attention::forward::Estimator;

use crate::error::{BenchError, BenchResult};

pub const DEFAULT_ORACLE_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    ErrorVsK,
    RuntimeVsN,
    GradBounds,
    GradDescent,
}

impl Experiment {
    pub fn tag(&self) -> &'static str {
        match self {
            Experiment::ErrorVsK => "error-vs-k",
            Experiment::RuntimeVsN => "runtime-vs-n",
            Experiment::GradBounds => "grad-bounds",
            Experiment::GradDescent => "grad-descent",
        }
    }

    /// Stream id separating the random inputs of different experiments.
    pub(crate) fn stream(&self) -> u64 {
        match self {
            Experiment::ErrorVsK => 11,
            Experiment::RuntimeVsN => 12,
            Experiment::GradBounds => 13,
            Experiment::GradDescent => 14,
        }
    }
}

impl FromStr for Experiment {
    type Err = BenchError;
    fn from_str(s: &str) -> BenchResult<Self> {
        match s {
            "error-vs-k" => Ok(Experiment::ErrorVsK),
            "runtime-vs-n" => Ok(Experiment::RuntimeVsN),
            "grad-bounds" => Ok(Experiment::GradBounds),
            "grad-descent" => Ok(Experiment::GradDescent),
            other => Err(BenchError::InvalidSpec(format!("unknown experiment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    CrossEntropy,
}

impl Loss {
    pub fn tag(&self) -> &'static str {
        match self {
            Loss::Mse => "mse",
            Loss::CrossEntropy => "cross-entropy",
        }
    }
}

impl FromStr for Loss {
    type Err = BenchError;
    fn from_str(s: &str) -> BenchResult<Self> {
        match s {
            "mse" => Ok(Loss::Mse),
            "cross-entropy" | "ce" => Ok(Loss::CrossEntropy),
            other => Err(BenchError::InvalidSpec(format!("unknown loss {other:?}"))),
        }
    }
}

/// A top-k size, fixed or as a power of `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KChoice {
    Fixed(usize),
    /// `ceil(n^p)`.
    Power(f64),
    /// Smallest `k = l` satisfying the weighted estimator's conditions.
    Auto,
}

impl KChoice {
    /// Resolves to `(k, l)`; `l` defaults to `k`, clamped so `k + l <= n`.
    pub fn resolve(&self, n: usize, epsilon: f64, delta: f64, l: Option<usize>) -> BenchResult<(usize, usize)> {
        let k = match *self {
            KChoice::Fixed(k) => k,
            KChoice::Power(p) => {
                // Guard against ceil(32.000000000000004).
                let raw = (n as f64).powf(p);
                let rounded = raw.round();
                if (raw - rounded).abs() < 1e-9 { rounded as usize } else { raw.ceil() as usize }
            }
            KChoice::Auto => {
                let (k, auto_l) = knn_attention::forward::choose_parameters(n, epsilon, delta)?;
                return Ok((k, l.unwrap_or(auto_l).min(n - k)));
            }
        };
        if k == 0 {
            return Err(BenchError::InvalidSpec("k must be positive".into()));
        }
        let k = k.min(n);
        Ok((k, l.unwrap_or(k).min(n - k)))
    }
}

impl fmt::Display for KChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KChoice::Fixed(k) => write!(f, "{k}"),
            KChoice::Power(p) => write!(f, "n^{p}"),
            KChoice::Auto => write!(f, "auto"),
        }
    }
}

impl FromStr for KChoice {
    type Err = BenchError;
    /// Accepts `32`, `n^0.5`, `n^2/3`, `sqrt` or `auto`.
    fn from_str(s: &str) -> BenchResult<Self> {
        let bad = || BenchError::InvalidSpec(format!("bad k value {s:?}"));
        let s = s.trim();
        if s == "auto" {
            return Ok(KChoice::Auto);
        }
        if s == "sqrt" {
            return Ok(KChoice::Power(0.5));
        }
        if let Some(exp) = s.strip_prefix("n^") {
            let p = match exp.split_once('/') {
                Some((a, b)) => {
                    let (a, b): (f64, f64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                    a / b
                }
                None => exp.parse().map_err(|_| bad())?,
            };
            if !(p > 0.0 && p <= 1.0) {
                return Err(bad());
            }
            return Ok(KChoice::Power(p));
        }
        s.parse::<usize>().ok().filter(|&k| k > 0).map(KChoice::Fixed).ok_or_else(bad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexChoice {
    Exact,
    Lsh { tables: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gradient {
    Dq,
    Dk,
    Dv,
}

impl FromStr for Gradient {
    type Err = BenchError;
    fn from_str(s: &str) -> BenchResult<Self> {
        match s {
            "dq" => Ok(Gradient::Dq),
            "dk" => Ok(Gradient::Dk),
            "dv" => Ok(Gradient::Dv),
            other => Err(BenchError::InvalidSpec(format!("unknown gradient {other:?}"))),
        }
    }
}

/// Upstream gradient used by `grad-bounds`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upstream {
    Normal,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub n: Vec<usize>,
    pub d: usize,
    /// Input half-widths; inputs are uniform on `[-B, B]`.
    pub b: Vec<f64>,
    pub k: Vec<KChoice>,
    /// Spill sample size; `None` uses `l = k`.
    pub l: Option<usize>,
    pub epsilon: f64,
    pub delta: f64,
    pub lr: Vec<f64>,
    pub loss: Loss,
    pub seeds: Vec<u64>,
    pub reps: usize,
    pub iterations: usize,
    pub causal: bool,
    pub index: IndexChoice,
    pub estimator: Estimator,
    pub prefold_scale: bool,
    pub oracle_cap: usize,
    /// Gradients estimated (`grad-bounds`) or approximated (`grad-descent`).
    pub gradients: Vec<Gradient>,
    pub upstream: Upstream,
    /// Leave wall-clock columns empty so reruns are byte-identical.
    pub omit_timing: bool,
    pub out: Option<PathBuf>,
}

impl ExperimentSpec {
    /// Defaults for an experiment; callers overwrite what they sweep.
    pub fn new(experiment: Experiment) -> Self {
        let (gradients, lr, iterations) = match experiment {
            Experiment::GradDescent => (vec![Gradient::Dq, Gradient::Dv], vec![0.1], 200),
            _ => (vec![Gradient::Dv, Gradient::Dq, Gradient::Dk], vec![0.0], 0),
        };
        Self {
            experiment,
            n: vec![256],
            d: 8,
            b: vec![1.0],
            k: vec![KChoice::Power(0.5)],
            l: None,
            epsilon: 0.1,
            delta: 0.1,
            lr,
            loss: Loss::Mse,
            seeds: vec![0],
            reps: 1,
            iterations,
            causal: false,
            index: IndexChoice::Exact,
            estimator: Estimator::Weighted,
            prefold_scale: true,
            oracle_cap: DEFAULT_ORACLE_CAP,
            gradients,
            upstream: Upstream::Normal,
            omit_timing: false,
            out: None,
        }
    }

    pub fn validate(&self) -> BenchResult<()> {
        let fail = |msg: &str| Err(BenchError::InvalidSpec(msg.into()));
        if self.n.is_empty() || self.b.is_empty() || self.k.is_empty() || self.lr.is_empty() || self.seeds.is_empty() {
            return fail("every list must be non-empty");
        }
        if self.n.contains(&0) || self.d == 0 || self.reps == 0 {
            return fail("n, d and reps must be positive");
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return fail("epsilon must be positive");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail("delta must lie in (0, 1)");
        }
        if self.b.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return fail("B must be finite and nonnegative");
        }
        if self.lr.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return fail("learning rates must be finite and nonnegative");
        }
        if let IndexChoice::Lsh { tables: 0 } = self.index {
            return fail("LSH needs at least one table");
        }
        if self.experiment == Experiment::GradDescent && self.iterations == 0 {
            return fail("grad-descent needs at least one iteration");
        }
        Ok(())
    }
}
