//! DualFL rounds: parallel local solves, server averaging, control-variate
//! update and momentum advance.
//!
//! Per round `n`, with `beta_n` from [`schedule::advance`]:
//!
//! ```text
//! theta_j+ ~ argmin f_j(x) - nu <zeta_j, x>
//! theta+   = (1/N) sum_j theta_j+
//! zeta_j+  = (1 + beta)(zeta_j + theta+ - theta_j+) - beta (zeta_j- + theta - theta_j)
//! ```

use nalgebra::DVector;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::local_solver::{self, LocalProblem, LocalSolveReport, LocalSolverKind, StopCriterion};
use crate::oracle::{CompositeOracle, ConjugateMode, ParameterPoint, SmoothPart};
use crate::schedule::{self, MomentumState};

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta_cur: ParameterPoint,
    pub theta_prev: ParameterPoint,
    pub momentum: MomentumState,
    /// Number of completed rounds.
    pub round: usize,
    /// `beta` used by the most recent round.
    pub last_beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub zeta_cur: ParameterPoint,
    pub zeta_prev: ParameterPoint,
    pub theta_local: ParameterPoint,
    pub last_report: Option<LocalSolveReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnmetPolicy {
    #[default]
    Warn,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub nu: f64,
    pub rho: f64,
    pub stop: StopCriterion,
    pub solver: LocalSolverKind,
    pub on_unmet: UnmetPolicy,
}

/// Errors of an iterate against a reference solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundErrors {
    /// `(E - E*) / |E*|`, or `E - E*` when `E* = 0`.
    pub energy_err: f64,
    pub sq_param_err: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// Index of the iterate produced, i.e. the number of completed rounds.
    pub round: usize,
    pub beta: f64,
    pub local_iters: Vec<usize>,
    pub gaps: Vec<f64>,
    pub threshold: Option<f64>,
    pub unmet_clients: usize,
    pub underflow_clients: usize,
    pub theta: ParameterPoint,
    pub errors: Option<RoundErrors>,
    pub zeta_sum_norm: f64,
    pub zeta_max_norm: f64,
}

impl RoundRecord {
    pub fn total_local_iters(&self) -> usize {
        self.local_iters.iter().sum()
    }

    pub fn max_gap(&self) -> f64 {
        self.gaps.iter().copied().fold(f64::NAN, f64::max)
    }

    /// The identity `sum_j zeta_j = 0` within `1e-10 (1 + max_j ||zeta_j||)`.
    pub fn zeta_sum_ok(&self) -> bool {
        self.zeta_sum_norm <= 1e-10 * (1.0 + self.zeta_max_norm)
    }
}

/// `xi_j` and `eta_j` for every client at the latest completed round.
#[derive(Debug, Clone, PartialEq)]
pub struct DualExport {
    pub xi: Vec<ParameterPoint>,
    pub eta: Vec<ParameterPoint>,
}

/// Global energy `E = (1/N) sum_j f_j` and its error metrics against a
/// reference point.
#[derive(Debug, Clone)]
pub struct Evaluator {
    oracles: Vec<CompositeOracle>,
    theta_star: ParameterPoint,
    energy_star: f64,
}

impl Evaluator {
    pub fn new(
        oracles: Vec<CompositeOracle>,
        theta_star: ParameterPoint,
        energy_star: f64,
    ) -> Self {
        Self {
            oracles,
            theta_star,
            energy_star,
        }
    }

    pub fn theta_star(&self) -> &ParameterPoint {
        &self.theta_star
    }

    pub fn energy_star(&self) -> f64 {
        self.energy_star
    }

    pub fn relative(&self) -> bool {
        self.energy_star != 0.0
    }

    pub fn energy(&self, theta: &DVector<f64>) -> f64 {
        global_energy(&self.oracles, theta)
    }

    pub fn errors(&self, theta: &DVector<f64>) -> RoundErrors {
        let diff = self.energy(theta) - self.energy_star;
        RoundErrors {
            energy_err: if self.relative() {
                diff / self.energy_star.abs()
            } else {
                diff
            },
            sq_param_err: (theta - self.theta_star.vector()).norm_squared(),
            grad_norm: global_subgradient(&self.oracles, theta).norm(),
        }
    }
}

/// `(1/N) sum_j f_j(theta)`, summed in client order.
pub fn global_energy(oracles: &[CompositeOracle], theta: &DVector<f64>) -> f64 {
    oracles.iter().map(|o| o.value(theta)).sum::<f64>() / oracles.len() as f64
}

/// Minimum-norm subgradient of the global energy.
pub fn global_subgradient(oracles: &[CompositeOracle], theta: &DVector<f64>) -> DVector<f64> {
    let n = oracles.len() as f64;
    let mut grad = DVector::zeros(theta.len());
    let mut l1 = 0.0;
    for o in oracles {
        grad += o.smooth_value_grad(theta).1;
        l1 += o.l1();
    }
    grad /= n;
    l1 /= n;
    if l1 == 0.0 {
        grad
    } else {
        crate::oracle::min_norm_subgradient_l1(&grad, theta, l1)
    }
}

/// Family constants used for validation and trace headers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyConstants {
    pub mu: f64,
    pub lipschitz: Option<f64>,
    /// `L` is the exact smoothness constant rather than an upper bound.
    pub lipschitz_exact: bool,
}

impl FamilyConstants {
    pub fn of(oracles: &[CompositeOracle]) -> Self {
        let mu = oracles.iter().map(|o| o.mu()).fold(f64::INFINITY, f64::min);
        let lipschitz = oracles
            .iter()
            .map(|o| o.lipschitz())
            .try_fold(0.0_f64, |m, l| l.map(|l| m.max(l)));
        let lipschitz_exact = oracles
            .iter()
            .all(|o| matches!(o.smooth_part(), SmoothPart::Quadratic(_)));
        Self {
            mu,
            lipschitz,
            lipschitz_exact,
        }
    }

    pub fn kappa(&self) -> Option<f64> {
        self.lipschitz.map(|l| l / self.mu)
    }
}

/// A configuration checked against the family, with any substitution made.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    pub config: EngineConfig,
    pub constants: FamilyConstants,
    pub notes: Vec<String>,
}

/// Checks `nu in (0, mu]` and `rho in [0, min(1 - 1e-12, nu/L)]` (the
/// latter only when `L` is exact). When the conjugate has to be computed
/// numerically and `nu = mu`, `nu` is replaced by `mu (1 - 1e-6)`.
pub fn validate(oracles: &[CompositeOracle], config: &EngineConfig) -> Result<ValidatedConfig> {
    if oracles.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    let d = oracles[0].dim();
    if oracles.iter().any(|o| o.dim() != d) {
        return Err(Error::Config(
            "clients disagree on the parameter dimension".into(),
        ));
    }
    let constants = FamilyConstants::of(oracles);
    let mut cfg = *config;
    let mut notes = Vec::new();
    if !(constants.mu > 0.0) {
        return Err(Error::Config(
            "the family is not strongly convex (mu = 0); regularize it first".into(),
        ));
    }
    if !(cfg.nu > 0.0) || cfg.nu > constants.mu * (1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "nu must lie in (0, mu = {}], got {}",
            constants.mu, cfg.nu
        )));
    }
    if !(0.0..1.0).contains(&cfg.rho) || cfg.rho > 1.0 - 1e-12 {
        return Err(Error::Config(format!(
            "rho must lie in [0, 1), got {}",
            cfg.rho
        )));
    }
    if let Some(l) = constants.lipschitz {
        let bound = cfg.nu / l;
        if cfg.rho > bound * (1.0 + 1e-12) {
            if constants.lipschitz_exact {
                return Err(Error::Config(format!(
                    "rho = {} exceeds nu/L = {bound:.6e}",
                    cfg.rho
                )));
            }
            notes.push(format!(
                "rho = {} exceeds nu/L_bound = {bound:.6e}; L is an upper bound, accepted",
                cfg.rho
            ));
        }
    }
    let numeric = oracles
        .iter()
        .any(|o| o.conjugate_mode() == ConjugateMode::Numeric);
    if numeric {
        let floor = oracles
            .iter()
            .map(|o| o.curvature_floor())
            .fold(f64::INFINITY, f64::min);
        if cfg.nu >= floor * (1.0 - 1e-12) {
            let substituted = constants.mu * (1.0 - 1e-6);
            notes.push(format!(
                "nu substituted: requested {} -> {substituted:.17e} (numeric conjugate needs nu < mu)",
                cfg.nu
            ));
            cfg.nu = substituted;
        }
    }
    Ok(ValidatedConfig {
        config: cfg,
        constants,
        notes,
    })
}

/// Zero server and client states with `t = 1`.
pub fn init(clients: usize, dim: usize) -> Result<(ServerState, Vec<ClientState>)> {
    if clients == 0 || dim == 0 {
        return Err(Error::Config(format!(
            "need at least one client and one dimension (got {clients}, {dim})"
        )));
    }
    let zero = ParameterPoint::zeros(dim);
    let server = ServerState {
        theta_cur: zero.clone(),
        theta_prev: zero.clone(),
        momentum: MomentumState {
            t: 1.0,
            rho: 0.0,
            n: 0,
        },
        round: 0,
        last_beta: 0.0,
    };
    let client = ClientState {
        zeta_cur: zero.clone(),
        zeta_prev: zero.clone(),
        theta_local: zero,
        last_report: None,
    };
    Ok((server, vec![client; clients]))
}

fn solve_all(
    clients: &[ClientState],
    oracles: &[CompositeOracle],
    config: &EngineConfig,
    stop: &local_solver::LocalStop,
    pool: Option<&ThreadPool>,
) -> Vec<Result<LocalSolveReport>> {
    let task = |(c, o): (&ClientState, &CompositeOracle)| -> Result<LocalSolveReport> {
        let problem = LocalProblem::new(o, &c.zeta_cur, config.nu)?;
        local_solver::solve(config.solver, &problem, &c.theta_local, stop)
    };
    match pool {
        Some(pool) => pool.install(|| {
            clients
                .par_iter()
                .zip(oracles.par_iter())
                .map(task)
                .collect()
        }),
        None => clients.iter().zip(oracles.iter()).map(task).collect(),
    }
}

/// Executes one DualFL round in place.
pub fn round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    oracles: &[CompositeOracle],
    config: &EngineConfig,
    evaluator: Option<&Evaluator>,
    pool: Option<&ThreadPool>,
) -> Result<RoundRecord> {
    let big_n = clients.len();
    if big_n == 0 || oracles.len() != big_n {
        return Err(Error::Config(format!(
            "{} client states for {} oracles",
            big_n,
            oracles.len()
        )));
    }
    let dim = server.theta_cur.dim();
    if oracles.iter().any(|o| o.dim() != dim) {
        return Err(Error::Config("state and oracle dimensions differ".into()));
    }
    let n = server.round;
    let stop = config.stop.for_round(n, big_n, config.nu, config.rho)?;
    let threshold = match stop.test {
        local_solver::StopTest::Gap(t) => Some(t),
        _ => None,
    };

    let mut reports = Vec::with_capacity(big_n);
    let mut unmet = 0;
    for result in solve_all(clients, oracles, config, &stop, pool) {
        match result {
            Ok(r) => reports.push(r),
            Err(Error::PartialSolve(r)) if config.on_unmet == UnmetPolicy::Warn => {
                unmet += 1;
                reports.push(*r);
            }
            Err(e) => return Err(e),
        }
    }

    // Fixed-order aggregation: ascending client index, one division.
    let mut sum = DVector::zeros(dim);
    for r in &reports {
        sum += r.theta.vector();
    }
    let theta_next: ParameterPoint = (sum / big_n as f64).into();

    let momentum = MomentumState {
        rho: config.rho,
        ..server.momentum
    };
    let (momentum_next, beta) = schedule::advance(momentum)?;

    let mut zeta_sum = DVector::zeros(dim);
    let mut zeta_max = 0.0_f64;
    for (c, r) in clients.iter_mut().zip(reports) {
        let fresh = c.zeta_cur.vector() + theta_next.vector() - r.theta.vector();
        let stale = c.zeta_prev.vector() + server.theta_cur.vector() - c.theta_local.vector();
        let zeta_next = fresh * (1.0 + beta) - stale * beta;
        zeta_sum += &zeta_next;
        zeta_max = zeta_max.max(zeta_next.norm());
        c.zeta_prev = std::mem::replace(&mut c.zeta_cur, zeta_next.into());
        c.theta_local = r.theta.clone();
        c.last_report = Some(r);
    }

    server.theta_prev = std::mem::replace(&mut server.theta_cur, theta_next);
    server.momentum = momentum_next;
    server.round = n + 1;
    server.last_beta = beta;

    let reports = clients.iter().filter_map(|c| c.last_report.as_ref());
    let (local_iters, gaps): (Vec<usize>, Vec<f64>) = reports.map(|r| (r.iters, r.gap)).unzip();
    let underflow = clients
        .iter()
        .filter(|c| c.last_report.as_ref().is_some_and(|r| r.underflow))
        .count();

    Ok(RoundRecord {
        round: n + 1,
        beta,
        local_iters,
        gaps,
        threshold,
        unmet_clients: unmet,
        underflow_clients: underflow,
        errors: evaluator.map(|e| e.errors(server.theta_cur.vector())),
        theta: server.theta_cur.clone(),
        zeta_sum_norm: zeta_sum.norm(),
        zeta_max_norm: zeta_max,
    })
}

/// `xi_j = nu (zeta_j^(n) - theta_j^(n+1))` and
/// `eta_j = nu (zeta_j^(n+1) - (1 + beta_n) theta^(n+1) + beta_n theta^(n))`
/// for the latest completed round; zero before the first round.
pub fn extract_duals(server: &ServerState, clients: &[ClientState], nu: f64) -> DualExport {
    let dim = server.theta_cur.dim();
    if server.round == 0 {
        let zero = vec![ParameterPoint::zeros(dim); clients.len()];
        return DualExport {
            xi: zero.clone(),
            eta: zero,
        };
    }
    let beta = server.last_beta;
    let shift = server.theta_cur.vector() * (1.0 + beta) - server.theta_prev.vector() * beta;
    let xi = clients
        .iter()
        .map(|c| ((c.zeta_prev.vector() - c.theta_local.vector()) * nu).into())
        .collect();
    let eta = clients
        .iter()
        .map(|c| ((c.zeta_cur.vector() - &shift) * nu).into())
        .collect();
    DualExport { xi, eta }
}

/// Why [`run`] returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    /// All requested rounds executed and no target was set.
    Completed,
    TargetReached,
    TargetMissed,
}

/// Early-stopping target on one of the error columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    SqParamErr(f64),
    EnergyErr(f64),
    GradNorm(f64),
}

impl Target {
    pub fn reached(&self, e: &RoundErrors) -> bool {
        match *self {
            Target::SqParamErr(t) => e.sq_param_err <= t,
            Target::EnergyErr(t) => e.energy_err.abs() <= t,
            Target::GradNorm(t) => e.grad_norm <= t,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<RoundRecord>,
    pub status: RunStatus,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub validated: ValidatedConfig,
}

/// DualFL driver owning its states and worker pool.
pub struct Engine {
    oracles: Vec<CompositeOracle>,
    validated: ValidatedConfig,
    server: ServerState,
    clients: Vec<ClientState>,
    evaluator: Option<Evaluator>,
    pool: Option<ThreadPool>,
}

impl Engine {
    pub fn new(
        oracles: Vec<CompositeOracle>,
        config: EngineConfig,
        threads: usize,
    ) -> Result<Self> {
        let validated = validate(&oracles, &config)?;
        let (mut server, clients) = init(oracles.len(), oracles[0].dim())?;
        server.momentum = MomentumState::new(validated.config.rho)?;
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            oracles,
            validated,
            server,
            clients,
            evaluator: None,
            pool,
        })
    }

    pub fn with_evaluator(mut self, evaluator: Evaluator) -> Self {
        self.evaluator = Some(evaluator);
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.validated.config
    }

    pub fn validated(&self) -> &ValidatedConfig {
        &self.validated
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn oracles(&self) -> &[CompositeOracle] {
        &self.oracles
    }

    pub fn theta(&self) -> &ParameterPoint {
        &self.server.theta_cur
    }

    pub fn step(&mut self) -> Result<RoundRecord> {
        round(
            &mut self.server,
            &mut self.clients,
            &self.oracles,
            &self.validated.config,
            self.evaluator.as_ref(),
            self.pool.as_ref(),
        )
    }

    pub fn duals(&self) -> DualExport {
        extract_duals(&self.server, &self.clients, self.validated.config.nu)
    }

    /// Runs up to `rounds` rounds, stopping early once `target` is reached.
    pub fn run(mut self, rounds: usize, target: Option<Target>) -> Result<RunOutcome> {
        if target.is_some() && self.evaluator.is_none() {
            return Err(Error::Config(
                "a convergence target needs a reference solution".into(),
            ));
        }
        let mut records = Vec::with_capacity(rounds);
        let mut status = if target.is_some() {
            RunStatus::TargetMissed
        } else {
            RunStatus::Completed
        };
        for _ in 0..rounds {
            let rec = self.step()?;
            let hit = match (target, rec.errors) {
                (Some(t), Some(e)) => t.reached(&e),
                _ => false,
            };
            records.push(rec);
            if hit {
                status = RunStatus::TargetReached;
                break;
            }
        }
        Ok(RunOutcome {
            records,
            status,
            server: self.server,
            clients: self.clients,
            validated: self.validated,
        })
    }
}

/// Convenience wrapper: validate, run and collect records.
pub fn run(
    oracles: Vec<CompositeOracle>,
    config: EngineConfig,
    rounds: usize,
    evaluator: Option<Evaluator>,
    target: Option<Target>,
    threads: usize,
) -> Result<RunOutcome> {
    let mut engine = Engine::new(oracles, config, threads)?;
    if let Some(e) = evaluator {
        engine = engine.with_evaluator(e);
    }
    engine.run(rounds, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_solver::StopRule;
    use crate::oracle::QuadraticForm;

    fn toy() -> Vec<CompositeOracle> {
        [1.0, -1.0]
            .iter()
            .map(|&c| {
                CompositeOracle::quadratic(QuadraticForm::centered(1.0, &[c]).unwrap()).unwrap()
            })
            .collect()
    }

    fn exact(nu: f64, rho: f64) -> EngineConfig {
        EngineConfig {
            nu,
            rho,
            stop: StopCriterion {
                rule: StopRule::GapFixed(1e-14),
                max_iters: 1000,
            },
            solver: LocalSolverKind::Exact,
            on_unmet: UnmetPolicy::Abort,
        }
    }

    #[test]
    fn init_is_all_zero() {
        let (s, c) = init(2, 1).unwrap();
        assert_eq!(s.momentum.t, 1.0);
        assert_eq!(s.round, 0);
        assert_eq!(s.theta_cur, ParameterPoint::zeros(1));
        assert_eq!(c.len(), 2);
        let (_, c) = init(8, 10).unwrap();
        assert!(c
            .iter()
            .all(|c| c.zeta_cur.norm() == 0.0 && c.zeta_prev.dim() == 10));
        assert!(init(0, 3).is_err());
    }

    #[test]
    fn toy_rounds_by_hand() {
        let mut e = Engine::new(toy(), exact(1.0, 0.0), 1).unwrap();
        let r0 = e.step().unwrap();
        assert_eq!(r0.beta, 0.0);
        assert_eq!(r0.theta[0], 0.0);
        let c = e.clients();
        assert_eq!(c[0].theta_local[0], 1.0);
        assert_eq!(c[1].theta_local[0], -1.0);
        assert_eq!(c[0].zeta_cur[0], -1.0);
        assert_eq!(c[1].zeta_cur[0], 1.0);
        assert_eq!(r0.zeta_sum_norm, 0.0);

        let d = e.duals();
        assert_eq!(d.xi[0][0], -1.0);
        assert_eq!(d.xi[1][0], 1.0);

        let r1 = e.step().unwrap();
        let c = e.clients();
        assert!(c[0].theta_local[0].abs() < 1e-15);
        assert!(c[1].theta_local[0].abs() < 1e-15);
        assert!(r1.theta[0].abs() < 1e-15);
    }

    #[test]
    fn duals_are_zero_before_first_round() {
        let e = Engine::new(toy(), exact(1.0, 0.0), 1).unwrap();
        let d = e.duals();
        assert!(d.xi.iter().chain(d.eta.iter()).all(|p| p.norm() == 0.0));
    }

    #[test]
    fn first_round_zeta_is_average_minus_local() {
        let oracles: Vec<_> = [(2.0, 3.0), (0.5, -1.0), (1.0, 0.25)]
            .iter()
            .map(|&(a, c)| {
                CompositeOracle::quadratic(QuadraticForm::centered(a, &[c, -c]).unwrap()).unwrap()
            })
            .collect();
        let mut e = Engine::new(oracles, exact(0.5, 0.0), 1).unwrap();
        e.step().unwrap();
        let theta = e.theta().clone();
        for c in e.clients() {
            let expected = theta.vector() - c.theta_local.vector();
            assert_eq!(c.zeta_cur.vector(), &expected);
        }
    }

    #[test]
    fn configuration_is_checked_before_round_zero() {
        assert!(Engine::new(toy(), exact(1.5, 0.0), 1).is_err());
        assert!(Engine::new(toy(), exact(1.0, 1.0), 1).is_err());
        // kappa = 1 here, so rho may go up to nu/L = 1 - but 1 itself is out.
        assert!(Engine::new(toy(), exact(0.5, 0.6), 1).is_err());
        assert!(Engine::new(toy(), exact(0.5, 0.5), 1).is_ok());
    }

    #[test]
    fn equal_weights_converge_in_one_round() {
        let oracles: Vec<_> = [3.0, -1.0, 7.0]
            .iter()
            .map(|&c| {
                CompositeOracle::quadratic(QuadraticForm::centered(2.0, &[c]).unwrap()).unwrap()
            })
            .collect();
        let mut e = Engine::new(oracles, exact(2.0, 0.0), 1).unwrap();
        let r = e.step().unwrap();
        assert!((r.theta[0] - 3.0).abs() < 1e-14);
    }
}
