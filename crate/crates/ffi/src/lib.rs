//! C ABI over the `dualfl` library.
//!
//! Objects are opaque heap handles released with their `_free` function.
//! Every fallible call returns a [`DualflStatus`]; on failure the message is
//! available from [`dualfl_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dualfl::engine::{Engine, EngineConfig, FamilyConstants, UnmetPolicy};
use dualfl::harness::reference::{reference_solution, ReferenceOptions};
use dualfl::harness::synth::quadratic_family;
use dualfl::harness::{emit_trace, execute, RunConfig};
use dualfl::local_solver::{LocalSolverKind, StopCriterion, StopRule};
use dualfl::oracle::{make_family, ProblemSpec, QuadraticForm};
use dualfl::{CompositeOracle, Error};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualflStatus {
    Ok = 0,
    Config = 1,
    Input = 2,
    Domain = 3,
    Construction = 4,
    Conjugate = 5,
    PartialSolve = 6,
    Parse = 7,
    Data = 8,
    Reference = 9,
    Fit = 10,
    Io = 11,
    NullPointer = 12,
    Panic = 13,
    /// The run finished but missed its convergence target.
    TargetMissed = 14,
}

/// Local stopping rule selector for [`DualflEngineConfig`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualflStop {
    /// Geometric gap schedule; `stop_param` is gamma.
    GapSmooth = 0,
    /// Polynomial gap schedule; `stop_param` is gamma.
    GapNonsmooth = 1,
    /// Constant gap bound `stop_param`.
    GapFixed = 2,
    RelEnergy = 3,
    GradNorm = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DualflEngineConfig {
    pub nu: f64,
    pub rho: f64,
    pub stop: DualflStop,
    pub stop_param: f64,
    pub max_local_iters: usize,
    /// Nonzero selects direct local solves where available.
    pub exact_solver: i32,
    /// Nonzero aborts the round when a local solve misses its criterion.
    pub abort_on_unmet: i32,
}

/// Summary of one completed round.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DualflRoundInfo {
    pub round: usize,
    pub beta: f64,
    pub max_gap: f64,
    pub zeta_sum_norm: f64,
    pub total_local_iters: usize,
    pub unmet_clients: usize,
}

/// Opaque client family.
pub struct DualflProblem {
    oracles: Vec<CompositeOracle>,
}

/// Opaque DualFL engine.
pub struct DualflEngine {
    engine: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DualflStatus {
    match e {
        Error::Config(_) => DualflStatus::Config,
        Error::Input(_) => DualflStatus::Input,
        Error::Domain(_) => DualflStatus::Domain,
        Error::Construction(_) => DualflStatus::Construction,
        Error::Conjugate { .. } => DualflStatus::Conjugate,
        Error::PartialSolve(_) => DualflStatus::PartialSolve,
        Error::Parse { .. } => DualflStatus::Parse,
        Error::Data(_) => DualflStatus::Data,
        Error::Reference(_) => DualflStatus::Reference,
        Error::Fit(_) => DualflStatus::Fit,
        Error::Io(_) => DualflStatus::Io,
    }
}

enum Failure {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<DualflStatus, Failure>) -> DualflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => {
            if s == DualflStatus::Ok {
                set_error("");
            }
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("{what} is null"));
            DualflStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic");
            DualflStatus::Panic
        }
    }
}

fn null(what: &'static str) -> Failure {
    Failure::Null(what)
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dualfl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

fn boxed_problem(oracles: Vec<CompositeOracle>, out: *mut *mut DualflProblem) -> DualflStatus {
    // SAFETY: callers checked `out` for null.
    unsafe { *out = Box::into_raw(Box::new(DualflProblem { oracles })) };
    DualflStatus::Ok
}

/// Random quadratic family whose client Hessians all have extreme
/// eigenvalues `mu` and `mu * kappa`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dualfl_problem_synthetic_quadratic(
    clients: usize,
    dim: usize,
    mu: f64,
    kappa: f64,
    spread: f64,
    seed: u64,
    out: *mut *mut DualflProblem,
) -> DualflStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if clients == 0 {
            return Err(Failure::Core(Error::Config(
                "clients must be positive".into(),
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let forms = quadratic_family(&mut rng, clients, dim, mu, kappa, spread)?;
        let oracles = make_family(&ProblemSpec::Quadratic(forms))?;
        Ok(boxed_problem(oracles, out))
    })
}

/// Quadratic family `f_j(x) = 1/2 x^T H_j x - l_j^T x`. `hessians` holds
/// `clients` row-major `dim x dim` blocks, `linear` holds `clients` vectors.
///
/// # Safety
/// `hessians` must point to `clients * dim * dim` doubles, `linear` to
/// `clients * dim` doubles, `out` to storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dualfl_problem_quadratic(
    clients: usize,
    dim: usize,
    hessians: *const f64,
    linear: *const f64,
    out: *mut *mut DualflProblem,
) -> DualflStatus {
    guard(|| {
        if out.is_null() || hessians.is_null() || linear.is_null() {
            return Err(null("an argument"));
        }
        if clients == 0 || dim == 0 {
            return Err(Failure::Core(Error::Config(
                "clients and dim must be positive".into(),
            )));
        }
        let h = std::slice::from_raw_parts(hessians, clients * dim * dim);
        let l = std::slice::from_raw_parts(linear, clients * dim);
        let forms = (0..clients)
            .map(|j| {
                QuadraticForm::new(
                    DMatrix::from_row_slice(dim, dim, &h[j * dim * dim..(j + 1) * dim * dim]),
                    DVector::from_column_slice(&l[j * dim..(j + 1) * dim]),
                    0.0,
                )
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let oracles = make_family(&ProblemSpec::Quadratic(forms))?;
        Ok(boxed_problem(oracles, out))
    })
}

/// # Safety
/// `problem` must be null or a handle from a `dualfl_problem_*` constructor
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn dualfl_problem_free(problem: *mut DualflProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Parameter dimension, or 0 for a null handle.
///
/// # Safety
/// `problem` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dualfl_problem_dim(problem: *const DualflProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.oracles[0].dim())
}

/// # Safety
/// `problem` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dualfl_problem_clients(problem: *const DualflProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.oracles.len())
}

/// Family constants: `mu` and `L` (NaN when unknown).
///
/// # Safety
/// `problem` must be a live handle; `mu` and `lipschitz` may be null.
#[no_mangle]
pub unsafe extern "C" fn dualfl_problem_constants(
    problem: *const DualflProblem,
    mu: *mut f64,
    lipschitz: *mut f64,
) -> DualflStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        let c = FamilyConstants::of(&p.oracles);
        if !mu.is_null() {
            *mu = c.mu;
        }
        if !lipschitz.is_null() {
            *lipschitz = c.lipschitz.unwrap_or(f64::NAN);
        }
        Ok(DualflStatus::Ok)
    })
}

/// High-accuracy minimizer of the average cost, written to `theta` (length
/// `len`, which must equal the dimension), and its energy.
///
/// # Safety
/// `problem` must be a live handle, `theta` must point to `len` doubles,
/// `energy` may be null.
#[no_mangle]
pub unsafe extern "C" fn dualfl_problem_reference(
    problem: *const DualflProblem,
    theta: *mut f64,
    len: usize,
    energy: *mut f64,
) -> DualflStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        if theta.is_null() {
            return Err(null("theta"));
        }
        if len != p.oracles[0].dim() {
            return Err(Failure::Core(Error::Config(format!(
                "buffer length {len} != dim {}",
                p.oracles[0].dim()
            ))));
        }
        let r = reference_solution(&p.oracles, &ReferenceOptions::default())?;
        std::slice::from_raw_parts_mut(theta, len).copy_from_slice(r.theta.as_slice());
        if !energy.is_null() {
            *energy = r.energy;
        }
        Ok(DualflStatus::Ok)
    })
}

fn engine_config(c: &DualflEngineConfig) -> EngineConfig {
    let rule = match c.stop {
        DualflStop::GapSmooth => StopRule::GapSmooth {
            gamma: c.stop_param,
        },
        DualflStop::GapNonsmooth => StopRule::GapNonsmooth {
            gamma: c.stop_param,
        },
        DualflStop::GapFixed => StopRule::GapFixed(c.stop_param),
        DualflStop::RelEnergy => StopRule::RelEnergy(c.stop_param),
        DualflStop::GradNorm => StopRule::GradNorm(c.stop_param),
    };
    EngineConfig {
        nu: c.nu,
        rho: c.rho,
        stop: StopCriterion {
            rule,
            max_iters: c.max_local_iters,
        },
        solver: if c.exact_solver != 0 {
            LocalSolverKind::Exact
        } else {
            LocalSolverKind::Iterative
        },
        on_unmet: if c.abort_on_unmet != 0 {
            UnmetPolicy::Abort
        } else {
            UnmetPolicy::Warn
        },
    }
}

/// Creates an engine over a copy of `problem`'s family. `threads <= 1` runs
/// local solves sequentially.
///
/// # Safety
/// `problem` and `config` must be valid, `out` must point to storage for one
/// handle.
#[no_mangle]
pub unsafe extern "C" fn dualfl_engine_new(
    problem: *const DualflProblem,
    config: *const DualflEngineConfig,
    threads: usize,
    out: *mut *mut DualflEngine,
) -> DualflStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let engine = Engine::new(p.oracles.clone(), engine_config(c), threads)?;
        *out = Box::into_raw(Box::new(DualflEngine { engine }));
        Ok(DualflStatus::Ok)
    })
}

/// Executes one round; `info` may be null.
///
/// # Safety
/// `engine` must be a live handle; `info` null or writable.
#[no_mangle]
pub unsafe extern "C" fn dualfl_engine_step(
    engine: *mut DualflEngine,
    info: *mut DualflRoundInfo,
) -> DualflStatus {
    guard(|| {
        let e = engine.as_mut().ok_or_else(|| null("engine"))?;
        let r = e.engine.step()?;
        if !info.is_null() {
            *info = DualflRoundInfo {
                round: r.round,
                beta: r.beta,
                max_gap: r.max_gap(),
                zeta_sum_norm: r.zeta_sum_norm,
                total_local_iters: r.total_local_iters(),
                unmet_clients: r.unmet_clients,
            };
        }
        Ok(DualflStatus::Ok)
    })
}

/// Copies the current server iterate into `theta` (length must equal the
/// dimension).
///
/// # Safety
/// `engine` must be a live handle and `theta` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dualfl_engine_theta(
    engine: *const DualflEngine,
    theta: *mut f64,
    len: usize,
) -> DualflStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        if theta.is_null() {
            return Err(null("theta"));
        }
        let t = e.engine.theta();
        if len != t.dim() {
            return Err(Failure::Core(Error::Config(format!(
                "buffer length {len} != dim {}",
                t.dim()
            ))));
        }
        std::slice::from_raw_parts_mut(theta, len).copy_from_slice(t.as_slice());
        Ok(DualflStatus::Ok)
    })
}

/// # Safety
/// `engine` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dualfl_engine_free(engine: *mut DualflEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Runs the configuration file at `config_path` as the `run` command would
/// and writes the trace to `out_path` (skipped when null). Returns
/// `TargetMissed` when a configured target was not reached.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out_path` null or
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dualfl_run_config(
    config_path: *const c_char,
    out_path: *const c_char,
) -> DualflStatus {
    guard(|| {
        if config_path.is_null() {
            return Err(null("config_path"));
        }
        let cfg_path = CStr::from_ptr(config_path)
            .to_str()
            .map_err(|_| Failure::Core(Error::Input("config path is not UTF-8".into())))?;
        let cfg = RunConfig::from_file(Path::new(cfg_path))?;
        let outcome = execute(&cfg)?;
        if !out_path.is_null() {
            let out = CStr::from_ptr(out_path)
                .to_str()
                .map_err(|_| Failure::Core(Error::Input("output path is not UTF-8".into())))?;
            if let Some((_, trace)) = outcome.traces.first() {
                emit_trace(trace, Path::new(out))?;
            }
        }
        if outcome.success {
            Ok(DualflStatus::Ok)
        } else {
            set_error("convergence target not met");
            Ok(DualflStatus::TargetMissed)
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dualfl_version() -> *const c_char {
    static V: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr().cast()
}
