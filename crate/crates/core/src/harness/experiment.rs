//! Drives each CLI mode from a [`RunConfig`] and produces traces plus a
//! short textual summary.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::baseline::{run_baseline, Baseline};
use super::config::{BaselineKind, FistaDelta, Mode, ProblemKind, RunConfig, Symbolic};
use super::data::{load_dataset, partition};
use super::reference::{reference_solution, reference_with, ReferenceMethod, ReferenceOptions};
use super::synth;
use super::trace::{Trace, TraceRow};
use crate::dual_fista::{fista_run, DeltaSchedule, FistaOptions};
use crate::engine::{Engine, EngineConfig, Evaluator, FamilyConstants, RunStatus};
use crate::error::{Error, Result};
use crate::local_solver::{LocalSolverKind, StopCriterion, StopRule};
use crate::oracle::{make_family, regularize, CompositeOracle, ProblemSpec};

/// A generated or loaded problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub oracles: Vec<CompositeOracle>,
}

pub fn build_problem(cfg: &RunConfig) -> Result<Problem> {
    let p = &cfg.problem;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = match p.kind {
        ProblemKind::Quadratic => ProblemSpec::Quadratic(synth::quadratic_family(
            &mut rng, p.clients, p.dim, p.mu, p.kappa, p.spread,
        )?),
        ProblemKind::ElasticNet => ProblemSpec::ElasticNet {
            shards: synth::regression_shards(
                &mut rng, p.clients, p.samples, p.dim, p.noise, p.spread,
            )?,
            l1: p.l1,
            mu: p.mu,
        },
        ProblemKind::LeastSquares => ProblemSpec::ElasticNet {
            shards: synth::underdetermined_least_squares(
                &mut rng, p.clients, p.samples, p.dim, p.min_norm,
            )?
            .0,
            l1: 0.0,
            mu: 0.0,
        },
        ProblemKind::Logistic => {
            let data = match &p.data {
                Some(path) => load_dataset(path, p.format, Some(p.classes), p.label_base)?,
                None => synth::blobs(&mut rng, p.samples, p.features, p.classes, p.separation)?,
            };
            let shards = partition(data.samples(), p.clients, p.partition, cfg.seed)?
                .iter()
                .map(|idx| data.select(idx))
                .collect();
            ProblemSpec::Logistic {
                shards,
                classes: data.classes,
                mu: p.mu,
            }
        }
    };
    Ok(Problem {
        oracles: make_family(&spec)?,
    })
}

fn reference_options(cfg: &RunConfig) -> ReferenceOptions {
    ReferenceOptions {
        tolerance: cfg.reference_tolerance,
        hessian_budget: cfg.hessian_budget,
        max_iters: cfg.reference_max_iters,
    }
}

fn sci(v: f64) -> String {
    format!("{v:.16e}")
}

/// Result of one CLI action.
#[derive(Debug, Clone)]
pub struct Outcome {
    /// Traces with an optional file-name tag (used by multi-run modes).
    pub traces: Vec<(Option<String>, Trace)>,
    pub summary: Vec<String>,
    /// False when a convergence target or a tolerance check was missed.
    pub success: bool,
}

/// Header lines shared by every trace.
fn base_header(cfg: &RunConfig, oracles: &[CompositeOracle]) -> Vec<String> {
    let c = FamilyConstants::of(oracles);
    let mut h = vec!["dualfl trace".to_string()];
    h.extend(cfg.echo());
    h.push(format!(
        "clients = {}, dim = {}",
        oracles.len(),
        oracles[0].dim()
    ));
    h.push(format!("mu = {}", sci(c.mu)));
    h.push(match c.lipschitz {
        Some(l) => format!(
            "L = {} ({})",
            sci(l),
            if c.lipschitz_exact {
                "exact"
            } else {
                "upper bound"
            }
        ),
        None => "L = none (nonsmooth)".into(),
    });
    if let Some(k) = c.kappa() {
        h.push(format!("kappa = {}", sci(k)));
    }
    h
}

/// Reference solution wrapped as an evaluator, or a header note explaining
/// why error columns are absent.
fn evaluator_for(
    cfg: &RunConfig,
    oracles: &[CompositeOracle],
    method: Option<ReferenceMethod>,
    header: &mut Vec<String>,
) -> Option<Evaluator> {
    let opts = reference_options(cfg);
    let r = match method {
        Some(m) => reference_with(oracles, m, &opts),
        None => reference_solution(oracles, &opts),
    };
    match r {
        Ok(r) => {
            header.push(format!(
                "reference = {:?}, residual = {}, E* = {}",
                r.method,
                sci(r.residual),
                sci(r.energy)
            ));
            let ev = Evaluator::new(oracles.to_vec(), r.theta, r.energy);
            header.push(format!(
                "E_err_rel = {}",
                if ev.relative() {
                    "relative"
                } else {
                    "absolute (E* = 0)"
                }
            ));
            Some(ev)
        }
        Err(e) => {
            header.push(format!(
                "reference unavailable ({e}); error columns are nan"
            ));
            None
        }
    }
}

fn engine_config(
    cfg: &RunConfig,
    oracles: &[CompositeOracle],
    rho: &Symbolic,
) -> Result<EngineConfig> {
    let c = FamilyConstants::of(oracles);
    let nu = cfg.nu.resolve(c.mu, c.lipschitz, f64::NAN)?;
    let rho = rho.resolve(c.mu, c.lipschitz, nu)?;
    Ok(EngineConfig {
        nu,
        rho,
        stop: StopCriterion {
            rule: cfg.stop_rule(),
            max_iters: cfg.local_max_iters,
        },
        solver: cfg.solver,
        on_unmet: cfg.on_unmet,
    })
}

/// One DualFL run; returns the trace and whether the target (if any) was
/// reached.
fn dualfl_trace(
    cfg: &RunConfig,
    oracles: Vec<CompositeOracle>,
    config: EngineConfig,
    evaluator: Option<Evaluator>,
    mut header: Vec<String>,
) -> Result<(Trace, bool, usize)> {
    let mut engine = Engine::new(oracles, config, cfg.threads)?;
    let v = engine.validated().config;
    header.push(format!("nu = {}, rho = {}", sci(v.nu), sci(v.rho)));
    header.extend(
        engine
            .validated()
            .notes
            .iter()
            .map(|n| format!("note: {n}")),
    );
    let target = cfg.target();
    let has_eval = evaluator.is_some();
    if let Some(e) = evaluator {
        engine = engine.with_evaluator(e);
    }
    let out = engine.run(cfg.rounds, target.filter(|_| has_eval))?;
    let unmet: usize = out.records.iter().map(|r| r.unmet_clients).sum();
    let underflow: usize = out.records.iter().map(|r| r.underflow_clients).sum();
    if unmet > 0 {
        let rounds: Vec<String> = out
            .records
            .iter()
            .filter(|r| r.unmet_clients > 0)
            .map(|r| r.round.to_string())
            .collect();
        let listed = if rounds.len() > 10 {
            format!("{} ... ({} rounds)", rounds[..10].join(" "), rounds.len())
        } else {
            rounds.join(" ")
        };
        header.push(format!(
            "warning: {unmet} local solves missed their threshold in rounds {listed}"
        ));
    }
    if underflow > 0 {
        header.push(format!(
            "note: {underflow} local solves stopped at the rounding floor"
        ));
    }
    if let Some(bad) = out.records.iter().find(|r| !r.zeta_sum_ok()) {
        header.push(format!(
            "warning: control variates do not sum to zero at round {}",
            bad.round
        ));
    }
    let ok = match target {
        None => true,
        Some(_) => out.status == RunStatus::TargetReached,
    };
    let rows = out.records.iter().map(TraceRow::from).collect();
    Ok((Trace { header, rows }, ok, out.records.len()))
}

pub fn run_dualfl(cfg: &RunConfig) -> Result<Outcome> {
    let problem = build_problem(cfg)?;
    let mut header = base_header(cfg, &problem.oracles);
    let config = engine_config(cfg, &problem.oracles, &cfg.rho)?;
    let evaluator = evaluator_for(cfg, &problem.oracles, None, &mut header);
    let (trace, ok, rounds) = dualfl_trace(cfg, problem.oracles, config, evaluator, header)?;
    let mut summary = vec![format!("rounds = {rounds}")];
    if let Some(last) = trace.rows.last() {
        summary.push(format!("final sq_param_err = {}", sci(last.sq_param_err)));
        summary.push(format!("final E_err_rel = {}", sci(last.energy_err)));
    }
    if cfg.target.is_some() {
        summary.push(format!("target {}", if ok { "reached" } else { "missed" }));
    }
    Ok(Outcome {
        traces: vec![(None, trace)],
        summary,
        success: ok,
    })
}

/// Prox-step tolerance schedule matching a gap-based local stopping rule,
/// so that the two engines solve identical subproblems.
pub fn delta_for_stop(
    rule: StopRule,
    solver: LocalSolverKind,
    nu: f64,
    rho: f64,
) -> Result<DeltaSchedule> {
    match rule {
        StopRule::GapNonsmooth { gamma } => Ok(DeltaSchedule::Polynomial {
            gamma,
            scale: 1.0 / nu,
        }),
        StopRule::GapSmooth { gamma } => Ok(DeltaSchedule::geometric(rho, gamma)),
        StopRule::GapFixed(_) if solver == LocalSolverKind::Exact => Ok(DeltaSchedule::Exact),
        _ => Err(Error::Config(
            "the dual engine needs a gap-based local stop (or gap_fixed with exact solves)".into(),
        )),
    }
}

fn fista_schedule(cfg: &RunConfig, nu: f64, rho: f64) -> Result<DeltaSchedule> {
    match cfg.fista_delta {
        FistaDelta::Auto => delta_for_stop(cfg.stop_rule(), cfg.solver, nu, rho),
        FistaDelta::Exact => Ok(DeltaSchedule::Exact),
        FistaDelta::Polynomial => Ok(DeltaSchedule::polynomial(cfg.fista_gamma.unwrap_or(1.0))),
        FistaDelta::Geometric => Ok(match cfg.fista_a {
            Some(a) => DeltaSchedule::Geometric { a, scale: 1.0 },
            None => DeltaSchedule::geometric(rho, cfg.fista_gamma.unwrap_or(0.1)),
        }),
    }
}

pub fn run_dual_fista(cfg: &RunConfig) -> Result<Outcome> {
    let problem = build_problem(cfg)?;
    let oracles = problem.oracles;
    let mut header = base_header(cfg, &oracles);
    let evaluator = evaluator_for(cfg, &oracles, None, &mut header);
    let v = crate::engine::validate(&oracles, &engine_config(cfg, &oracles, &cfg.rho)?)?;
    let (nu, rho) = (v.config.nu, v.config.rho);
    header.push(format!("nu = {}, rho = {}", sci(nu), sci(rho)));
    header.extend(v.notes.iter().map(|n| format!("note: {n}")));
    let delta = fista_schedule(cfg, nu, rho)?;
    header.push(format!("delta schedule = {delta:?}"));
    let opts = FistaOptions {
        solver: cfg.solver,
        max_iters: cfg.local_max_iters,
        threads: cfg.threads,
    };
    let tr = fista_run(&oracles, nu, rho, delta, cfg.rounds, opts)?;
    if !tr.flagged.is_empty() {
        header.push(format!(
            "warning: {} iterations had inexact prox steps",
            tr.flagged.len()
        ));
    }
    let target = cfg.target();
    let mut reached = false;
    let mut rows = Vec::new();
    for n in 0..cfg.rounds {
        let theta = &tr.primal[n + 1];
        let errors = evaluator.as_ref().map(|e| e.errors(theta.vector()));
        let max_gap = tr.certificates[n];
        rows.push(TraceRow {
            round: n + 1,
            beta: tr.betas[n],
            energy_err: errors.map_or(f64::NAN, |e| e.energy_err),
            sq_param_err: errors.map_or(f64::NAN, |e| e.sq_param_err),
            grad_norm: errors.map_or(f64::NAN, |e| e.grad_norm),
            zeta_sum_norm: f64::NAN,
            max_gap,
            total_local_iters: tr.local_iters[n].iter().sum(),
        });
        if let (Some(t), Some(e)) = (target, errors) {
            if t.reached(&e) {
                reached = true;
                break;
            }
        }
    }
    header.push("max_gap column holds the summed prox-step certificate".into());
    let ok = target.is_none() || reached;
    Ok(Outcome {
        summary: vec![format!("rounds = {}", rows.len())],
        traces: vec![(None, Trace { header, rows })],
        success: ok,
    })
}

/// Runs DualFL and the dual FISTA loop side by side and reports the largest
/// deviation between the engine's dual exports and the dual iterates.
pub fn verify_duality(cfg: &RunConfig) -> Result<Outcome> {
    let problem = build_problem(cfg)?;
    let oracles = problem.oracles;
    let mut header = base_header(cfg, &oracles);
    let evaluator = evaluator_for(cfg, &oracles, None, &mut header);
    let config = engine_config(cfg, &oracles, &cfg.rho)?;
    let mut engine = Engine::new(oracles.clone(), config, cfg.threads)?;
    if let Some(e) = evaluator {
        engine = engine.with_evaluator(e);
    }
    let v = engine.validated().config;
    header.push(format!("nu = {}, rho = {}", sci(v.nu), sci(v.rho)));
    header.extend(
        engine
            .validated()
            .notes
            .iter()
            .map(|n| format!("note: {n}")),
    );
    let delta = fista_schedule(cfg, v.nu, v.rho)?;
    let opts = FistaOptions {
        solver: cfg.solver,
        max_iters: cfg.local_max_iters,
        threads: cfg.threads,
    };
    let fista = fista_run(&oracles, v.nu, v.rho, delta, cfg.rounds, opts)?;
    let (xi_dev, eta_dev, rows) = compare_duals(&mut engine, &fista, cfg.rounds)?;
    let deviation = xi_dev.max(eta_dev);
    let ok = deviation <= cfg.verify_tolerance;
    header.push(format!("max xi deviation = {}", sci(xi_dev)));
    header.push(format!("max eta deviation = {}", sci(eta_dev)));
    Ok(Outcome {
        traces: vec![(None, Trace { header, rows })],
        summary: vec![
            format!("max_deviation = {}", sci(deviation)),
            format!("tolerance = {}", sci(cfg.verify_tolerance)),
            format!("verdict = {}", if ok { "agree" } else { "disagree" }),
        ],
        success: ok,
    })
}

/// Steps `engine` for `rounds` rounds, comparing its dual exports with the
/// matching FISTA iterates. Returns the max xi and eta block deviations and
/// the engine trace rows.
pub fn compare_duals(
    engine: &mut Engine,
    fista: &crate::dual_fista::FistaTrace,
    rounds: usize,
) -> Result<(f64, f64, Vec<TraceRow>)> {
    let mut xi_dev: f64 = 0.0;
    let mut eta_dev: f64 = 0.0;
    let mut rows = Vec::with_capacity(rounds);
    for n in 0..rounds {
        let rec = engine.step()?;
        let d = engine.duals();
        let xi = crate::dual_fista::DualPoint(d.xi);
        let eta = crate::dual_fista::DualPoint(d.eta);
        xi_dev = xi_dev.max(xi.max_block_distance(&fista.xi[n + 1]));
        eta_dev = eta_dev.max(eta.max_block_distance(&fista.eta[n + 1]));
        rows.push(TraceRow::from(&rec));
    }
    Ok((xi_dev, eta_dev, rows))
}

pub fn sweep_rho(cfg: &RunConfig) -> Result<Outcome> {
    let problem = build_problem(cfg)?;
    let base = base_header(cfg, &problem.oracles);
    let mut eval_header = Vec::new();
    let evaluator = evaluator_for(cfg, &problem.oracles, None, &mut eval_header);
    let mut traces = Vec::new();
    let mut summary = Vec::new();
    let mut all_ok = true;
    for (i, r) in cfg.sweep_rhos.iter().enumerate() {
        let config = engine_config(cfg, &problem.oracles, r)?;
        let mut header = base.clone();
        header.extend(eval_header.iter().cloned());
        header.push(format!(
            "sweep entry {i}: rho = {}",
            RunConfig::rho_label(r)
        ));
        let (trace, ok, rounds) = dualfl_trace(
            cfg,
            problem.oracles.clone(),
            config,
            evaluator.clone(),
            header,
        )?;
        all_ok &= ok;
        summary.push(format!(
            "rho = {} rounds = {rounds} target = {}",
            sci(config.rho),
            if cfg.target.is_none() {
                "none"
            } else if ok {
                "reached"
            } else {
                "missed"
            }
        ));
        traces.push((Some(format!("rho{i}")), trace));
    }
    Ok(Outcome {
        traces,
        summary,
        success: all_ok,
    })
}

/// Regularization weight from a target accuracy `epsilon`: `alpha =
/// epsilon / (2 R0)` with `R0` the norm of the minimizer regularized at
/// `alpha0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaChoice {
    pub alpha: f64,
    pub r0: f64,
}

pub fn choose_alpha(
    oracles: &[CompositeOracle],
    epsilon: f64,
    alpha0: f64,
    opts: &ReferenceOptions,
) -> Result<AlphaChoice> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let reg = regularize(oracles, alpha0)?;
    let r = reference_solution(&reg, opts)?;
    let r0 = r.theta.norm();
    if !(r0 > 0.0) {
        return Err(Error::Domain(
            "the regularized minimizer is zero; any alpha works, set regularized.alpha".into(),
        ));
    }
    Ok(AlphaChoice {
        alpha: epsilon / (2.0 * r0),
        r0,
    })
}

pub fn regularized_run(cfg: &RunConfig) -> Result<Outcome> {
    let problem = build_problem(cfg)?;
    let oracles = problem.oracles;
    let mut header = base_header(cfg, &oracles);
    let opts = reference_options(cfg);
    let alpha = match (cfg.reg_alpha, cfg.reg_epsilon) {
        (Some(a), None) => a,
        (None, Some(eps)) => {
            let c = choose_alpha(&oracles, eps, cfg.reg_alpha0, &opts)?;
            header.push(format!(
                "R0 estimate = {} at alpha0 = {}",
                sci(c.r0),
                sci(cfg.reg_alpha0)
            ));
            c.alpha
        }
        _ => {
            return Err(Error::Config(
                "set exactly one of regularized.alpha and regularized.epsilon".into(),
            ))
        }
    };
    let reg = regularize(&oracles, alpha)?;
    let lip = FamilyConstants::of(&oracles).lipschitz.ok_or_else(|| {
        Error::Config("regularized runs need a smooth family with known L".into())
    })?;
    header.push(format!("alpha = {}", sci(alpha)));
    let quadratic = oracles
        .iter()
        .all(|o| o.conjugate_mode() == crate::oracle::ConjugateMode::Analytic);
    let method = quadratic.then_some(ReferenceMethod::Direct);
    header.push("errors are measured on the unregularized energy".into());
    let evaluator = evaluator_for(cfg, &oracles, method, &mut header);
    let config = EngineConfig {
        nu: alpha,
        rho: alpha / (lip + alpha),
        stop: StopCriterion {
            rule: cfg.stop_rule(),
            max_iters: cfg.local_max_iters,
        },
        solver: cfg.solver,
        on_unmet: cfg.on_unmet,
    };
    let (trace, ok, rounds) = dualfl_trace(cfg, reg, config, evaluator, header)?;
    let mut summary = vec![
        format!("alpha = {}", sci(alpha)),
        format!("rounds = {rounds}"),
    ];
    if let Some(p) = plateau(&trace.rows) {
        summary.push(format!("grad_norm plateau = {}", sci(p)));
    }
    Ok(Outcome {
        traces: vec![(None, trace)],
        summary,
        success: ok,
    })
}

/// Median gradient norm over the last tenth of the rows (at least one row).
pub fn plateau(rows: &[TraceRow]) -> Option<f64> {
    let tail = (rows.len() / 10).max(1);
    let mut v: Vec<f64> = rows[rows.len().checked_sub(tail)?..]
        .iter()
        .map(|r| r.grad_norm)
        .filter(|g| !g.is_nan())
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

pub fn run_baseline_mode(cfg: &RunConfig) -> Result<Outcome> {
    let problem = build_problem(cfg)?;
    let oracles = problem.oracles;
    let mut header = base_header(cfg, &oracles);
    let evaluator = evaluator_for(cfg, &oracles, None, &mut header);
    let method = match cfg.baseline {
        BaselineKind::Gd => Baseline::Gd {
            step: cfg.baseline_step,
        },
        BaselineKind::FedAvg => Baseline::FedAvg {
            local_steps: cfg.local_steps,
            step: cfg.baseline_step,
        },
    };
    header.push(format!("baseline = {method:?}"));
    let target = cfg.target();
    let r = run_baseline(&oracles, method, cfg.rounds, evaluator.as_ref(), target)?;
    let ok = target.is_none() || r.reached;
    Ok(Outcome {
        summary: vec![format!("rounds = {}", r.rows.len())],
        traces: vec![(
            None,
            Trace {
                header,
                rows: r.rows,
            },
        )],
        success: ok,
    })
}

/// Dispatches on the configured mode.
pub fn execute(cfg: &RunConfig) -> Result<Outcome> {
    match cfg.mode {
        Mode::DualFl => run_dualfl(cfg),
        Mode::DualFista => run_dual_fista(cfg),
        Mode::Baseline => run_baseline_mode(cfg),
        Mode::VerifyDuality => verify_duality(cfg),
        Mode::SweepRho => sweep_rho(cfg),
        Mode::Regularized => regularized_run(cfg),
    }
}

/// `theta` as a plain vector, for callers outside the crate.
pub fn to_vec(theta: &DVector<f64>) -> Vec<f64> {
    theta.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::from_text(text).unwrap()
    }

    #[test]
    fn small_quadratic_run_reaches_target() {
        let c = cfg("problem.kappa = 4\nproblem.dim = 3\nrun.rounds = 200\nrun.target = 1e-12\ndualfl.rho = 1/kappa\n");
        let o = run_dualfl(&c).unwrap();
        assert!(o.success);
        assert!(o.traces[0].1.rows.len() < 200);
    }

    #[test]
    fn least_squares_needs_regularization() {
        let c = cfg("problem.kind = least_squares\nproblem.samples = 2\nproblem.dim = 12\n");
        let e = run_dualfl(&c).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn alpha_scales_with_epsilon() {
        let c = cfg("problem.kind = least_squares\nproblem.samples = 2\nproblem.dim = 12\n");
        let p = build_problem(&c).unwrap();
        let o = ReferenceOptions::default();
        let a = choose_alpha(&p.oracles, 0.4, 1e-2, &o).unwrap();
        let b = choose_alpha(&p.oracles, 0.2, 1e-2, &o).unwrap();
        assert!((a.alpha - 2.0 * b.alpha).abs() < 1e-15 * a.alpha.max(1.0));
        assert!(a.r0 < 2.0 + 1e-9);
    }

    #[test]
    fn delta_mapping() {
        assert_eq!(
            delta_for_stop(
                StopRule::GapNonsmooth { gamma: 1.0 },
                LocalSolverKind::Iterative,
                0.5,
                0.0
            )
            .unwrap(),
            DeltaSchedule::Polynomial {
                gamma: 1.0,
                scale: 2.0
            }
        );
        assert!(
            delta_for_stop(StopRule::RelEnergy(1e-8), LocalSolverKind::Exact, 1.0, 0.0).is_err()
        );
    }
}
