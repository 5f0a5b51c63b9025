//! Flat `key = value` run configuration with dotted sections.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; repeated keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::engine::{Target, UnmetPolicy};
use crate::error::{Error, Result};
use crate::local_solver::{LocalSolverKind, StopRule};

/// Every accepted key with its default (empty when there is none).
pub const KEYS: &[(&str, &str)] = &[
    ("mode", "dualfl"),
    ("problem.kind", "quadratic"),
    ("problem.clients", "4"),
    ("problem.dim", "10"),
    ("problem.mu", "1"),
    ("problem.kappa", "10"),
    ("problem.spread", "1"),
    ("problem.samples", "40"),
    ("problem.features", "5"),
    ("problem.classes", "3"),
    ("problem.l1", "0.01"),
    ("problem.noise", "0.01"),
    ("problem.separation", "2"),
    ("problem.min_norm", "2"),
    ("problem.data", ""),
    ("problem.format", "dense_csv"),
    ("problem.label_base", "1"),
    ("problem.partition", "contiguous"),
    ("dualfl.nu", "mu"),
    ("dualfl.rho", "0"),
    ("dualfl.gamma", ""),
    ("local.stop", "gap_smooth"),
    ("local.tol", "1e-10"),
    ("local.max_iters", "10000"),
    ("local.solver", "iterative"),
    ("local.on_unmet", "warn"),
    ("run.rounds", "100"),
    ("run.seed", "0"),
    ("run.threads", "1"),
    ("run.target", ""),
    ("run.target_metric", "sq_param_err"),
    ("baseline.kind", "gd"),
    ("baseline.local_steps", "1"),
    ("baseline.step", ""),
    ("fista.delta", "auto"),
    ("fista.gamma", ""),
    ("fista.a", ""),
    ("verify.tolerance", "1e-8"),
    ("sweep.rhos", "0, 1e-3, 1e-2, nu/L"),
    ("regularized.alpha", ""),
    ("regularized.epsilon", ""),
    ("regularized.alpha0", "1e-2"),
    ("reference.tolerance", "1e-10"),
    ("reference.hessian_budget", "4096"),
    ("reference.max_iters", "200000"),
];

/// Parses the raw text into a key/value map, rejecting unknown and repeated
/// keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!(
                "unknown key `{key}` at line {line_no}"
            )));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!(
                "key `{key}` repeated at line {line_no}"
            )));
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    DualFl,
    DualFista,
    Baseline,
    VerifyDuality,
    SweepRho,
    Regularized,
}

impl Mode {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "dualfl" => Mode::DualFl,
            "dual_fista" => Mode::DualFista,
            "baseline" => Mode::Baseline,
            "verify_duality" => Mode::VerifyDuality,
            "sweep_rho" => Mode::SweepRho,
            "regularized" => Mode::Regularized,
            _ => return Err(Error::Config(format!("unknown mode `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Quadratic,
    ElasticNet,
    LeastSquares,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    DenseCsv,
    SparseSvm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    Contiguous,
    Shuffled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    pub clients: usize,
    pub dim: usize,
    pub mu: f64,
    pub kappa: f64,
    pub spread: f64,
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub l1: f64,
    pub noise: f64,
    pub separation: f64,
    pub min_norm: f64,
    pub data: Option<PathBuf>,
    pub format: DataFormat,
    pub label_base: u32,
    pub partition: PartitionScheme,
}

/// A value that may be given symbolically and is resolved once the family
/// constants are known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Symbolic {
    Value(f64),
    Mu,
    InverseKappa,
    NuOverL,
}

impl Symbolic {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mu" => Symbolic::Mu,
            "1/kappa" => Symbolic::InverseKappa,
            "nu/L" => Symbolic::NuOverL,
            _ => Symbolic::Value(parse_f64(s)?),
        })
    }

    /// Resolves against `mu`, `L` (if known) and `nu`.
    pub fn resolve(&self, mu: f64, lipschitz: Option<f64>, nu: f64) -> Result<f64> {
        let need_l = || {
            lipschitz
                .ok_or_else(|| Error::Config("this setting needs a smoothness constant L".into()))
        };
        Ok(match *self {
            Symbolic::Value(v) => v,
            Symbolic::Mu => mu,
            Symbolic::InverseKappa => mu / need_l()?,
            Symbolic::NuOverL => nu / need_l()?,
        })
    }

    fn render(&self) -> String {
        match self {
            Symbolic::Value(v) => format!("{v:e}"),
            Symbolic::Mu => "mu".into(),
            Symbolic::InverseKappa => "1/kappa".into(),
            Symbolic::NuOverL => "nu/L".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineKind {
    Gd,
    FedAvg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FistaDelta {
    /// Derived from the local stopping rule.
    Auto,
    Exact,
    Polynomial,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMetric {
    SqParamErr,
    EnergyErr,
    GradNorm,
}

/// Fully typed run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub problem: ProblemConfig,
    pub nu: Symbolic,
    pub rho: Symbolic,
    pub gamma: Option<f64>,
    pub stop: String,
    pub local_tol: f64,
    pub local_max_iters: usize,
    pub solver: LocalSolverKind,
    pub on_unmet: UnmetPolicy,
    pub rounds: usize,
    pub seed: u64,
    pub threads: usize,
    pub target: Option<f64>,
    pub target_metric: TargetMetric,
    pub baseline: BaselineKind,
    pub local_steps: usize,
    pub baseline_step: Option<f64>,
    pub fista_delta: FistaDelta,
    pub fista_gamma: Option<f64>,
    pub fista_a: Option<f64>,
    pub verify_tolerance: f64,
    pub sweep_rhos: Vec<Symbolic>,
    pub reg_alpha: Option<f64>,
    pub reg_epsilon: Option<f64>,
    pub reg_alpha0: f64,
    pub reference_tolerance: f64,
    pub hessian_budget: usize,
    pub reference_max_iters: usize,
    /// Resolved key/value pairs, used for the trace header echo.
    values: BTreeMap<String, String>,
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Config(format!("`{s}` is not a number")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| Error::Config(format!("`{s}` is not a nonnegative integer")))
}

fn opt<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
    if s.is_empty() {
        Ok(None)
    } else {
        f(s).map(Some)
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("{key} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::from_text(&text)
    }

    /// Builds a configuration from explicit pairs on top of the defaults.
    pub fn from_pairs(pairs: BTreeMap<String, String>) -> Result<Self> {
        let mut values: BTreeMap<String, String> = KEYS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        for (k, v) in pairs {
            if !values.contains_key(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            values.insert(k, v);
        }
        Self::build(values)
    }

    fn build(values: BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| values[k].as_str();
        let kind = match get("problem.kind") {
            "quadratic" => ProblemKind::Quadratic,
            "elastic_net" => ProblemKind::ElasticNet,
            "least_squares" => ProblemKind::LeastSquares,
            "logistic" => ProblemKind::Logistic,
            s => return Err(Error::Config(format!("unknown problem.kind `{s}`"))),
        };
        let format = match get("problem.format") {
            "dense_csv" => DataFormat::DenseCsv,
            "sparse_svm" => DataFormat::SparseSvm,
            s => return Err(Error::Config(format!("unknown problem.format `{s}`"))),
        };
        let partition = match get("problem.partition") {
            "contiguous" => PartitionScheme::Contiguous,
            "shuffled" => PartitionScheme::Shuffled,
            s => return Err(Error::Config(format!("unknown problem.partition `{s}`"))),
        };
        let label_base = match get("problem.label_base") {
            "0" => 0,
            "1" => 1,
            s => {
                return Err(Error::Config(format!(
                    "problem.label_base must be 0 or 1, got `{s}`"
                )))
            }
        };
        let problem = ProblemConfig {
            kind,
            clients: parse_usize(get("problem.clients"))?,
            dim: parse_usize(get("problem.dim"))?,
            mu: parse_f64(get("problem.mu"))?,
            kappa: parse_f64(get("problem.kappa"))?,
            spread: parse_f64(get("problem.spread"))?,
            samples: parse_usize(get("problem.samples"))?,
            features: parse_usize(get("problem.features"))?,
            classes: parse_usize(get("problem.classes"))?,
            l1: parse_f64(get("problem.l1"))?,
            noise: parse_f64(get("problem.noise"))?,
            separation: parse_f64(get("problem.separation"))?,
            min_norm: parse_f64(get("problem.min_norm"))?,
            data: opt(get("problem.data"), |s| Ok(PathBuf::from(s)))?,
            format,
            label_base,
            partition,
        };
        if problem.clients == 0 {
            return Err(Error::Config("problem.clients must be at least 1".into()));
        }
        if !(problem.kappa >= 1.0) {
            return Err(Error::Config(format!(
                "problem.kappa must be >= 1, got {}",
                problem.kappa
            )));
        }

        let stop = get("local.stop").to_string();
        if !matches!(
            stop.as_str(),
            "gap_nonsmooth" | "gap_smooth" | "gap_fixed" | "rel_energy" | "grad_norm"
        ) {
            return Err(Error::Config(format!("unknown local.stop `{stop}`")));
        }
        let solver = match get("local.solver") {
            "exact" => LocalSolverKind::Exact,
            "iterative" => LocalSolverKind::Iterative,
            s => return Err(Error::Config(format!("unknown local.solver `{s}`"))),
        };
        let on_unmet = match get("local.on_unmet") {
            "warn" => UnmetPolicy::Warn,
            "abort" => UnmetPolicy::Abort,
            s => return Err(Error::Config(format!("unknown local.on_unmet `{s}`"))),
        };
        let target_metric = match get("run.target_metric") {
            "sq_param_err" => TargetMetric::SqParamErr,
            "energy_err" => TargetMetric::EnergyErr,
            "grad_norm" => TargetMetric::GradNorm,
            s => return Err(Error::Config(format!("unknown run.target_metric `{s}`"))),
        };
        let baseline = match get("baseline.kind") {
            "gd" => BaselineKind::Gd,
            "fedavg" => BaselineKind::FedAvg,
            s => return Err(Error::Config(format!("unknown baseline.kind `{s}`"))),
        };
        let fista_delta = match get("fista.delta") {
            "auto" => FistaDelta::Auto,
            "exact" => FistaDelta::Exact,
            "polynomial" => FistaDelta::Polynomial,
            "geometric" => FistaDelta::Geometric,
            s => return Err(Error::Config(format!("unknown fista.delta `{s}`"))),
        };
        let sweep_rhos = get("sweep.rhos")
            .split(',')
            .map(|s| Symbolic::parse(s.trim()))
            .collect::<Result<Vec<_>>>()?;
        let gamma = opt(get("dualfl.gamma"), parse_f64)?;
        if let Some(g) = gamma {
            positive("dualfl.gamma", g)?;
        }

        let cfg = RunConfig {
            mode: Mode::parse(get("mode"))?,
            nu: Symbolic::parse(get("dualfl.nu"))?,
            rho: Symbolic::parse(get("dualfl.rho"))?,
            gamma,
            stop,
            local_tol: positive("local.tol", parse_f64(get("local.tol"))?)?,
            local_max_iters: parse_usize(get("local.max_iters"))?.max(1),
            solver,
            on_unmet,
            rounds: parse_usize(get("run.rounds"))?,
            seed: get("run.seed").parse().map_err(|_| {
                Error::Config(format!("run.seed `{}` is not a u64", get("run.seed")))
            })?,
            threads: parse_usize(get("run.threads"))?.max(1),
            target: opt(get("run.target"), parse_f64)?,
            target_metric,
            baseline,
            local_steps: parse_usize(get("baseline.local_steps"))?.max(1),
            baseline_step: opt(get("baseline.step"), parse_f64)?,
            fista_delta,
            fista_gamma: opt(get("fista.gamma"), parse_f64)?,
            fista_a: opt(get("fista.a"), parse_f64)?,
            verify_tolerance: positive("verify.tolerance", parse_f64(get("verify.tolerance"))?)?,
            sweep_rhos,
            reg_alpha: opt(get("regularized.alpha"), parse_f64)?,
            reg_epsilon: opt(get("regularized.epsilon"), parse_f64)?,
            reg_alpha0: positive("regularized.alpha0", parse_f64(get("regularized.alpha0"))?)?,
            reference_tolerance: positive(
                "reference.tolerance",
                parse_f64(get("reference.tolerance"))?,
            )?,
            hessian_budget: parse_usize(get("reference.hessian_budget"))?,
            reference_max_iters: parse_usize(get("reference.max_iters"))?.max(1),
            problem,
            values,
        };
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.values.insert("run.seed".into(), seed.to_string());
    }

    pub fn set_rounds(&mut self, rounds: usize) {
        self.rounds = rounds;
        self.values.insert("run.rounds".into(), rounds.to_string());
    }

    pub fn set_threads(&mut self, threads: usize) {
        self.threads = threads.max(1);
        self.values
            .insert("run.threads".into(), self.threads.to_string());
    }

    pub fn set_mode(&mut self, mode: Mode, name: &str) {
        self.mode = mode;
        self.values.insert("mode".into(), name.into());
    }

    /// The configured local stopping rule with `gamma` defaulted per regime.
    pub fn stop_rule(&self) -> StopRule {
        match self.stop.as_str() {
            "gap_nonsmooth" => StopRule::GapNonsmooth {
                gamma: self.gamma.unwrap_or(1.0),
            },
            "gap_smooth" => StopRule::GapSmooth {
                gamma: self.gamma.unwrap_or(0.1),
            },
            "gap_fixed" => StopRule::GapFixed(self.local_tol),
            "rel_energy" => StopRule::RelEnergy(self.local_tol),
            _ => StopRule::GradNorm(self.local_tol),
        }
    }

    pub fn target(&self) -> Option<Target> {
        self.target.map(|t| match self.target_metric {
            TargetMetric::SqParamErr => Target::SqParamErr(t),
            TargetMetric::EnergyErr => Target::EnergyErr(t),
            TargetMetric::GradNorm => Target::GradNorm(t),
        })
    }

    /// `key = value` lines for every setting except the worker count, which
    /// must not influence trace contents.
    pub fn echo(&self) -> Vec<String> {
        self.values
            .iter()
            .filter(|(k, _)| k.as_str() != "run.threads")
            .map(|(k, v)| format!("{k} = {v}").trim_end().to_string())
            .collect()
    }

    /// The symbolic rho values rendered for reports.
    pub fn rho_label(r: &Symbolic) -> String {
        r.render()
    }

    /// Reference page listing every key and its default.
    pub fn defaults_listing() -> String {
        let mut s = String::new();
        for (k, v) in KEYS {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
