//! Comparison methods: full-gradient descent and FedAvg without control
//! variates. Both use proximal steps when an l1 term is present.

use nalgebra::DVector;

use super::reference::Global;
use super::trace::TraceRow;
use crate::engine::{Evaluator, Target};
use crate::error::{Error, Result};
use crate::oracle::CompositeOracle;
use crate::prox_grad::{self, Composite};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    /// Full gradient descent; `step = None` selects backtracking.
    Gd { step: Option<f64> },
    /// `local_steps` gradient steps per client per round, then averaging.
    FedAvg {
        local_steps: usize,
        step: Option<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub rows: Vec<TraceRow>,
    pub theta: DVector<f64>,
    pub reached: bool,
}

fn max_lipschitz(oracles: &[CompositeOracle]) -> f64 {
    oracles.iter().map(|o| o.step_hint()).fold(0.0, f64::max)
}

fn prox_step(o: &CompositeOracle, x: &DVector<f64>, step: f64) -> DVector<f64> {
    let g = o.smooth_value_grad(x).1;
    o.prox_nonsmooth(&(x - g * step), step)
}

pub fn run_baseline(
    oracles: &[CompositeOracle],
    method: Baseline,
    rounds: usize,
    evaluator: Option<&Evaluator>,
    target: Option<Target>,
) -> Result<BaselineRun> {
    if oracles.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    let step_ok = |s: Option<f64>| match s {
        Some(v) if !(v > 0.0) => Err(Error::Config(format!(
            "baseline step must be positive, got {v}"
        ))),
        _ => Ok(()),
    };
    let big_n = oracles.len();
    let problem = Global::new(oracles);
    let mut x = DVector::zeros(oracles[0].dim());
    let mut lipschitz = max_lipschitz(oracles).max(f64::MIN_POSITIVE);
    let mut rows = Vec::with_capacity(rounds);
    let mut reached = false;
    for k in 1..=rounds {
        let local = match method {
            Baseline::Gd { step } => {
                step_ok(step)?;
                x = match step {
                    Some(s) => problem.prox(&(&x - problem.smooth(&x).1 * s), s),
                    None => backtracking_step(&problem, &x, &mut lipschitz),
                };
                big_n
            }
            Baseline::FedAvg { local_steps, step } => {
                step_ok(step)?;
                let s = step.unwrap_or(1.0 / lipschitz);
                let mut sum = DVector::zeros(x.len());
                for o in oracles {
                    let mut xj = x.clone();
                    for _ in 0..local_steps.max(1) {
                        xj = prox_step(o, &xj, s);
                    }
                    sum += xj;
                }
                x = sum / big_n as f64;
                big_n * local_steps.max(1)
            }
        };
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!("baseline diverged at round {k}")));
        }
        let errors = evaluator.map(|e| e.errors(&x));
        rows.push(TraceRow {
            round: k,
            beta: f64::NAN,
            energy_err: errors.map_or(f64::NAN, |e| e.energy_err),
            sq_param_err: errors.map_or(f64::NAN, |e| e.sq_param_err),
            grad_norm: errors.map_or(f64::NAN, |e| e.grad_norm),
            zeta_sum_norm: f64::NAN,
            max_gap: f64::NAN,
            total_local_iters: local,
        });
        if let (Some(t), Some(e)) = (target, errors) {
            if t.reached(&e) {
                reached = true;
                break;
            }
        }
    }
    Ok(BaselineRun {
        rows,
        theta: x,
        reached,
    })
}

/// Proximal gradient step with a curvature estimate that is first relaxed
/// by half and then doubled until the quadratic upper model holds.
fn backtracking_step(problem: &Global<'_>, x: &DVector<f64>, lipschitz: &mut f64) -> DVector<f64> {
    *lipschitz = (*lipschitz * 0.5).max(f64::MIN_POSITIVE);
    prox_grad::backtrack(problem, x, lipschitz).0
}
