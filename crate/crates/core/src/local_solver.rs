//! Inexact solves of the per-client problem `min f(x) - nu <zeta, x>`,
//! certified by the local primal-dual gap.
//!
//! With `g = f - nu/2 ||.||^2` and `xi = nu (zeta - x)`, the gap is
//!
//! ```text
//! Gamma(x) = f(x) - nu <zeta, x> + g*(xi) + 1/(2 nu) ||xi - nu zeta||^2
//! ```
//!
//! which is nonnegative and vanishes exactly at the minimizer.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::oracle::{CompositeOracle, ConjugateMode, Conjugator, ParameterPoint, SmoothPart};
use crate::prox_grad::{self, ApgOptions, ApgStatus, Composite};

#[derive(Debug, Clone, Copy)]
pub struct LocalProblem<'a> {
    pub oracle: &'a CompositeOracle,
    pub zeta: &'a ParameterPoint,
    pub nu: f64,
}

impl<'a> LocalProblem<'a> {
    pub fn new(oracle: &'a CompositeOracle, zeta: &'a ParameterPoint, nu: f64) -> Result<Self> {
        if zeta.dim() != oracle.dim() {
            return Err(Error::Config(format!(
                "zeta has dimension {} but the oracle expects {}",
                zeta.dim(),
                oracle.dim()
            )));
        }
        if !(nu > 0.0) || nu > oracle.mu() * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "nu must lie in (0, mu = {}], got {nu}",
                oracle.mu()
            )));
        }
        Ok(Self { oracle, zeta, nu })
    }

    /// `f(x) - nu <zeta, x>`.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        self.oracle.value(x) - self.nu * self.zeta.dot(x)
    }
}

impl Composite for LocalProblem<'_> {
    fn dim(&self) -> usize {
        self.oracle.dim()
    }

    fn smooth(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (v, g) = self.oracle.smooth_value_grad(x);
        (
            v - self.nu * self.zeta.dot(x),
            g - self.zeta.vector() * self.nu,
        )
    }

    fn nonsmooth(&self, x: &DVector<f64>) -> f64 {
        self.oracle.nonsmooth_value(x)
    }

    fn prox(&self, z: &DVector<f64>, step: f64) -> DVector<f64> {
        self.oracle.prox_nonsmooth(z, step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Nonsmooth,
    Smooth,
}

/// Per-client gap bound for round `n`:
/// nonsmooth `1 / (N nu (n+1)^(4+gamma))`, smooth `(1/N) ((1 - sqrt rho)/(1 + gamma))^n`.
pub fn gap_threshold(
    regime: Regime,
    n: usize,
    clients: usize,
    nu: f64,
    rho: f64,
    gamma: f64,
) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if clients == 0 {
        return Err(Error::Domain("client count must be positive".into()));
    }
    let big_n = clients as f64;
    match regime {
        Regime::Nonsmooth => {
            if !(nu > 0.0) {
                return Err(Error::Domain(format!("nu must be positive, got {nu}")));
            }
            Ok(1.0 / (big_n * nu * ((n + 1) as f64).powf(4.0 + gamma)))
        }
        Regime::Smooth => {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::Domain(format!("rho must lie in [0, 1), got {rho}")));
            }
            let ratio = (1.0 - rho.sqrt()) / (1.0 + gamma);
            Ok(ratio.powi(n as i32) / big_n)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    GapNonsmooth { gamma: f64 },
    GapSmooth { gamma: f64 },
    GapFixed(f64),
    RelEnergy(f64),
    GradNorm(f64),
}

/// Configured local stopping rule; gap schedules are resolved per round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopCriterion {
    pub rule: StopRule,
    pub max_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopTest {
    Gap(f64),
    RelEnergy(f64),
    GradNorm(f64),
}

/// Stopping rule resolved for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalStop {
    pub test: StopTest,
    pub max_iters: usize,
}

impl StopCriterion {
    pub fn for_round(&self, n: usize, clients: usize, nu: f64, rho: f64) -> Result<LocalStop> {
        let test = match self.rule {
            StopRule::GapNonsmooth { gamma } => StopTest::Gap(gap_threshold(
                Regime::Nonsmooth,
                n,
                clients,
                nu,
                rho,
                gamma,
            )?),
            StopRule::GapSmooth { gamma } => {
                StopTest::Gap(gap_threshold(Regime::Smooth, n, clients, nu, rho, gamma)?)
            }
            StopRule::GapFixed(d) => StopTest::Gap(d),
            StopRule::RelEnergy(e) => StopTest::RelEnergy(e),
            StopRule::GradNorm(e) => StopTest::GradNorm(e),
        };
        Ok(LocalStop {
            test,
            max_iters: self.max_iters.max(1),
        })
    }

    pub fn is_gap_based(&self) -> bool {
        matches!(
            self.rule,
            StopRule::GapNonsmooth { .. } | StopRule::GapSmooth { .. } | StopRule::GapFixed(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalSolveReport {
    pub theta: ParameterPoint,
    pub iters: usize,
    /// Certified gap for gap-based rules; otherwise the surrogate bound
    /// `||subgradient||^2 / (2 mu)` on primal suboptimality.
    pub gap: f64,
    pub gap_certified: bool,
    pub criterion_met: bool,
    pub energy: f64,
    /// The requested gap was below what rounding can certify; the solver
    /// stopped at machine-precision stationarity instead.
    pub underflow: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LocalSolverKind {
    /// Direct solve when the local problem is an unconstrained quadratic,
    /// accelerated proximal gradient otherwise.
    Exact,
    #[default]
    Iterative,
}

/// Gap and its two halves, used for the rounding-floor test.
#[derive(Debug, Clone, Copy)]
struct GapParts {
    gap: f64,
    primal: f64,
    dual: f64,
}

impl GapParts {
    fn rounding_floor(&self) -> f64 {
        1e2 * f64::EPSILON * (self.primal.abs() + self.dual.abs())
    }
}

fn gap_parts(problem: &LocalProblem<'_>, theta: &DVector<f64>) -> Result<GapParts> {
    let conj = Conjugator::new(problem.oracle, problem.nu)?;
    let nu = problem.nu;
    let primal = problem.energy(theta);
    let xi = (problem.zeta.vector() - theta) * nu;
    // Along directions where g is affine the dual candidate is moved onto
    // dom g*; any dual point still bounds the primal error from above.
    let xi = conj.project_to_domain(&xi);
    let c = conj.eval(&xi, Some(theta))?;
    let dual = c.upper() + 0.5 / nu * (&xi - problem.zeta.vector() * nu).norm_squared();
    Ok(GapParts {
        gap: primal + dual,
        primal,
        dual,
    })
}

/// Local primal-dual gap at `theta`. In numeric conjugate mode the value
/// includes the certified slack of the inner maximization.
pub fn compute_gap(problem: &LocalProblem<'_>, theta: &ParameterPoint) -> Result<f64> {
    if theta.dim() != problem.oracle.dim() {
        return Err(Error::Config("theta dimension mismatch".into()));
    }
    Ok(gap_parts(problem, theta)?.gap)
}

/// Dispatches on `kind`. `Exact` falls back to the iterative solver when the
/// local problem has no closed-form minimizer.
pub fn solve(
    kind: LocalSolverKind,
    problem: &LocalProblem<'_>,
    warm_start: &ParameterPoint,
    stop: &LocalStop,
) -> Result<LocalSolveReport> {
    match kind {
        LocalSolverKind::Exact if problem.oracle.conjugate_mode() == ConjugateMode::Analytic => {
            solve_local_exact(problem, stop)
        }
        _ => solve_local(problem, warm_start, stop),
    }
}

/// Closed-form minimizer for quadratic local problems.
pub fn solve_local_exact(problem: &LocalProblem<'_>, stop: &LocalStop) -> Result<LocalSolveReport> {
    let q = match (
        problem.oracle.conjugate_mode(),
        problem.oracle.smooth_part(),
    ) {
        (ConjugateMode::Analytic, SmoothPart::Quadratic(q)) => q,
        _ => {
            return Err(Error::Config(
                "exact local solves need an unconstrained quadratic".into(),
            ))
        }
    };
    let hessian =
        q.hessian() + nalgebra::DMatrix::identity(q.dim(), q.dim()) * problem.oracle.ridge();
    let rhs = q.linear() + problem.zeta.vector() * problem.nu;
    let theta = hessian
        .cholesky()
        .ok_or_else(|| Error::Domain("local hessian is not positive definite".into()))?
        .solve(&rhs);
    finish_report(problem, theta, 1, stop, true)
}

fn finish_report(
    problem: &LocalProblem<'_>,
    theta: DVector<f64>,
    iters: usize,
    stop: &LocalStop,
    stationary: bool,
) -> Result<LocalSolveReport> {
    let energy = problem.energy(&theta);
    let (gap, certified, met, underflow) = match stop.test {
        StopTest::Gap(threshold) => {
            let parts = gap_parts(problem, &theta)?;
            let met = parts.gap <= threshold;
            let underflow = !met && stationary && threshold < parts.rounding_floor();
            (parts.gap, true, met || underflow, underflow)
        }
        _ => (surrogate_gap(problem, &theta), false, true, false),
    };
    let report = LocalSolveReport {
        theta: theta.into(),
        iters,
        gap,
        gap_certified: certified,
        criterion_met: met,
        energy,
        underflow,
    };
    if met {
        Ok(report)
    } else {
        Err(Error::PartialSolve(Box::new(report)))
    }
}

fn surrogate_gap(problem: &LocalProblem<'_>, theta: &DVector<f64>) -> f64 {
    let (_, g) = Composite::smooth(problem, theta);
    let sub = if problem.oracle.l1() == 0.0 {
        g
    } else {
        crate::oracle::min_norm_subgradient_l1(&g, theta, problem.oracle.l1())
    };
    sub.norm_squared() / (2.0 * problem.oracle.mu())
}

/// How often the gap is evaluated inside the iteration loop.
pub const GAP_CHECK_INTERVAL: usize = 10;

/// Accelerated proximal gradient with backtracking and function-value
/// restart, warm-started at `warm_start`.
pub fn solve_local(
    problem: &LocalProblem<'_>,
    warm_start: &ParameterPoint,
    stop: &LocalStop,
) -> Result<LocalSolveReport> {
    if warm_start.dim() != problem.oracle.dim() {
        return Err(Error::Config("warm start dimension mismatch".into()));
    }
    if !warm_start.is_finite() {
        return Err(Error::Input("non-finite warm start".into()));
    }
    let opts = ApgOptions {
        max_iters: stop.max_iters,
        lipschitz: problem.oracle.step_hint(),
        restart: true,
    };

    // Already good enough: no iterations needed.
    if let StopTest::Gap(threshold) = stop.test {
        let parts = gap_parts(problem, warm_start)?;
        if parts.gap <= threshold {
            return finish_report(problem, warm_start.vector().clone(), 0, stop, false);
        }
    }

    let mut failure: Option<Error> = None;
    let mut floor_hit = false;
    let result = prox_grad::minimize(problem, warm_start.vector(), opts, |p| match stop.test {
        StopTest::RelEnergy(eps) => {
            (p.prev_value - p.value).abs() <= eps * p.value.abs().max(f64::MIN_POSITIVE)
        }
        StopTest::GradNorm(eps) => p.grad_map_norm <= eps,
        StopTest::Gap(threshold) => {
            if floor_hit {
                // Stationary to rounding: no representable decrease left.
                return (p.prev_value - p.value).abs() <= 4.0 * f64::EPSILON * p.value.abs();
            }
            if p.iter % GAP_CHECK_INTERVAL != 0 {
                return false;
            }
            match gap_parts(problem, p.x) {
                Ok(parts) => {
                    if parts.gap <= threshold {
                        return true;
                    }
                    floor_hit = threshold < parts.rounding_floor();
                    false
                }
                Err(e) => {
                    failure = Some(e);
                    true
                }
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let stationary = floor_hit || result.status == ApgStatus::Stagnated;
    finish_report(problem, result.x, result.iters, stop, stationary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::QuadraticForm;
    use nalgebra::DMatrix;

    fn centered(weight: f64, c: f64) -> CompositeOracle {
        CompositeOracle::quadratic(QuadraticForm::centered(weight, &[c]).unwrap()).unwrap()
    }

    fn gap_stop(threshold: f64) -> LocalStop {
        LocalStop {
            test: StopTest::Gap(threshold),
            max_iters: 10_000,
        }
    }

    #[test]
    fn thresholds_by_hand() {
        let t = |r, n, nn, nu, rho, g| gap_threshold(r, n, nn, nu, rho, g).unwrap();
        assert!((t(Regime::Nonsmooth, 0, 8, 0.01, 0.0, 1.0) - 12.5).abs() < 1e-12);
        assert!((t(Regime::Nonsmooth, 1, 8, 0.01, 0.0, 1.0) - 0.390625).abs() < 1e-12);
        let smooth = t(Regime::Smooth, 2, 8, 0.0, 0.01, 0.1);
        assert!((smooth - 0.125 * (0.9f64 / 1.1).powi(2)).abs() < 1e-15);
        assert!((smooth - 0.083678).abs() < 1e-6);
    }

    #[test]
    fn thresholds_reject_bad_parameters() {
        assert!(gap_threshold(Regime::Smooth, 0, 1, 1.0, 1.0, 0.1).is_err());
        assert!(gap_threshold(Regime::Smooth, 0, 1, 1.0, 0.0, 0.0).is_err());
        assert!(gap_threshold(Regime::Nonsmooth, 0, 1, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn gap_by_hand() {
        // f = theta^2/2, nu = 0.5, zeta = 1, theta = 0.4.
        let o = centered(1.0, 0.0);
        let zeta = ParameterPoint::from_vec(vec![1.0]);
        let p = LocalProblem::new(&o, &zeta, 0.5).unwrap();
        let g = compute_gap(&p, &ParameterPoint::from_vec(vec![0.4])).unwrap();
        assert!((g - 0.01).abs() < 1e-15, "{g}");
        let g = compute_gap(&p, &ParameterPoint::from_vec(vec![0.5])).unwrap();
        assert!(g.abs() < 1e-15, "{g}");
    }

    #[test]
    fn quadratic_centered_at_one() {
        let o = centered(1.0, 1.0);
        let zeta = ParameterPoint::zeros(1);
        let p = LocalProblem::new(&o, &zeta, 1.0).unwrap();
        let r = solve_local(&p, &ParameterPoint::zeros(1), &gap_stop(1e-12)).unwrap();
        assert!((r.theta[0] - 1.0).abs() < 1e-6);
        assert!(r.gap <= 1e-12 && r.criterion_met);
    }

    #[test]
    fn first_order_condition_by_hand() {
        let o = centered(1.0, 0.0);
        let zeta = ParameterPoint::from_vec(vec![1.0]);
        let p = LocalProblem::new(&o, &zeta, 0.5).unwrap();
        for kind in [LocalSolverKind::Exact, LocalSolverKind::Iterative] {
            let r = solve(kind, &p, &ParameterPoint::zeros(1), &gap_stop(1e-14)).unwrap();
            assert!((r.theta[0] - 0.5).abs() < 1e-7, "{kind:?}: {}", r.theta[0]);
        }
    }

    #[test]
    fn elastic_net_matches_grid_search() {
        // f = (t-2)^2/2 + |t| + 0.05/2 t^2 with zeta = 0.
        let a = DMatrix::from_element(1, 1, 1.0);
        let b = DVector::from_element(1, 2.0);
        let o = CompositeOracle::elastic_net(&a, &b, 1.0, 0.05).unwrap();
        let zeta = ParameterPoint::zeros(1);
        let p = LocalProblem::new(&o, &zeta, 0.05 * (1.0 - 1e-6)).unwrap();
        let r = solve_local(&p, &ParameterPoint::zeros(1), &gap_stop(1e-12)).unwrap();

        let f = |t: f64| 0.5 * (t - 2.0).powi(2) + t.abs() + 0.025 * t * t;
        let mut best = (f64::INFINITY, 0.0);
        let steps = 10_000_000;
        for i in 0..=steps {
            let t = -5.0 + 10.0 * i as f64 / steps as f64;
            let v = f(t);
            if v < best.0 {
                best = (v, t);
            }
        }
        assert!(
            (r.theta[0] - best.1).abs() < 1e-5,
            "{} vs {}",
            r.theta[0],
            best.1
        );
    }

    #[test]
    fn partial_result_when_iterations_run_out() {
        let stop = LocalStop {
            test: StopTest::Gap(1e-30),
            max_iters: 3,
        };
        let h = DMatrix::from_row_slice(2, 2, &[100.0, 0.0, 0.0, 1.0]);
        let q = QuadraticForm::new(h, DVector::from_vec(vec![1.0, 1.0]), 0.0).unwrap();
        let o2 = CompositeOracle::quadratic(q).unwrap();
        let z2 = ParameterPoint::zeros(2);
        let p2 = LocalProblem::new(&o2, &z2, 0.5).unwrap();
        match solve_local(&p2, &ParameterPoint::zeros(2), &stop) {
            Err(Error::PartialSolve(r)) => {
                assert_eq!(r.iters, 3);
                assert!(!r.criterion_met);
            }
            other => panic!("expected a partial result, got {other:?}"),
        }
    }

    #[test]
    fn warm_start_at_solution_needs_no_iterations() {
        let o = centered(2.0, 1.0);
        let zeta = ParameterPoint::zeros(1);
        let p = LocalProblem::new(&o, &zeta, 1.0).unwrap();
        let r = solve_local(&p, &ParameterPoint::from_vec(vec![1.0]), &gap_stop(1e-14)).unwrap();
        assert_eq!(r.iters, 0);
    }

    #[test]
    fn nu_above_mu_is_rejected() {
        let o = centered(1.0, 0.0);
        let zeta = ParameterPoint::zeros(1);
        assert!(LocalProblem::new(&o, &zeta, 1.5).is_err());
        assert!(LocalProblem::new(&o, &zeta, 0.0).is_err());
    }
}
