//! Accelerated proximal gradient with backtracking and function-value
//! restart.
//!
//! Shared by the local solver, the numeric conjugate and the reference
//! solvers. The objective is `s(x) + r(x)` with `s` smooth and `r` simple
//! enough to have a closed-form prox.

use nalgebra::DVector;

pub trait Composite {
    fn dim(&self) -> usize;

    /// Value and gradient of the smooth part.
    fn smooth(&self, x: &DVector<f64>) -> (f64, DVector<f64>);

    fn smooth_value(&self, x: &DVector<f64>) -> f64 {
        self.smooth(x).0
    }

    fn nonsmooth(&self, x: &DVector<f64>) -> f64;

    /// Proximal map of `step * r` at `z`.
    fn prox(&self, z: &DVector<f64>, step: f64) -> DVector<f64>;

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.smooth_value(x) + self.nonsmooth(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ApgOptions {
    pub max_iters: usize,
    /// Initial curvature estimate; the first step is `1 / lipschitz`.
    pub lipschitz: f64,
    pub restart: bool,
}

impl Default for ApgOptions {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            lipschitz: 1.0,
            restart: true,
        }
    }
}

/// Snapshot handed to the stopping callback after every accepted iteration.
#[derive(Debug)]
pub struct ApgProgress<'a> {
    pub iter: usize,
    pub x: &'a DVector<f64>,
    pub value: f64,
    pub prev_value: f64,
    /// Norm of the prox-gradient mapping evaluated at the extrapolated point.
    pub grad_map_norm: f64,
    pub lipschitz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApgStatus {
    /// The callback asked to stop.
    Stopped,
    MaxIters,
    /// No further decrease is representable in floating point.
    Stagnated,
}

#[derive(Debug, Clone)]
pub struct ApgResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub iters: usize,
    pub grad_map_norm: f64,
    pub lipschitz: f64,
    pub restarts: usize,
    pub status: ApgStatus,
}

const MAX_LIPSCHITZ: f64 = 1e300;

/// Step from `y` with curvature estimate `lipschitz`, doubled until the
/// quadratic upper model holds. When the value test is within rounding the
/// secant condition `<grad(c) - grad(y), d> <= L/2 ||d||^2` decides instead;
/// by convexity it implies the model bound.
pub(crate) fn backtrack<P: Composite + ?Sized>(
    problem: &P,
    y: &DVector<f64>,
    lipschitz: &mut f64,
) -> (DVector<f64>, f64) {
    let (fy, gy) = problem.smooth(y);
    loop {
        let step = 1.0 / *lipschitz;
        let candidate = problem.prox(&(y - &gy * step), step);
        let d = &candidate - y;
        let dd = d.norm_squared();
        let model = fy + gy.dot(&d) + 0.5 * *lipschitz * dd;
        let (actual, gc) = problem.smooth(&candidate);
        let excess = actual - model;
        let slack = 16.0 * f64::EPSILON * fy.abs().max(actual.abs());
        let accept = if excess.abs() <= slack {
            (&gc - &gy).dot(&d) <= 0.5 * *lipschitz * dd
        } else {
            excess < 0.0
        };
        if accept || *lipschitz >= MAX_LIPSCHITZ {
            let gm = *lipschitz * dd.sqrt();
            return (candidate, gm);
        }
        *lipschitz *= 2.0;
    }
}

/// Prox-gradient mapping norm at `x` with step `1 / lipschitz`.
pub fn gradient_mapping_norm<P: Composite + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    lipschitz: f64,
) -> f64 {
    let (_, g) = problem.smooth(x);
    let step = 1.0 / lipschitz;
    let p = problem.prox(&(x - &g * step), step);
    (x - p).norm() * lipschitz
}

/// Minimizes `problem` from `x0`. `stop` is consulted after every accepted
/// iteration and returns `true` to terminate.
pub fn minimize<P, F>(problem: &P, x0: &DVector<f64>, opts: ApgOptions, mut stop: F) -> ApgResult
where
    P: Composite + ?Sized,
    F: FnMut(&ApgProgress<'_>) -> bool,
{
    let mut x = x0.clone();
    let mut y = x0.clone();
    let mut fx = problem.value(&x);
    let mut t = 1.0_f64;
    let mut lipschitz = if opts.lipschitz.is_finite() && opts.lipschitz > 0.0 {
        opts.lipschitz
    } else {
        1.0
    };
    let mut restarts = 0;
    let mut just_restarted = false;
    let mut grad_map = f64::INFINITY;

    for iter in 1..=opts.max_iters {
        lipschitz = (lipschitz * 0.5).max(f64::MIN_POSITIVE);
        let (x_new, gm) = backtrack(problem, &y, &mut lipschitz);
        let f_new = problem.value(&x_new);

        // Increases within rounding of the current value are accepted so the
        // iteration can keep shrinking the gradient mapping below sqrt(eps).
        let slack = 16.0 * f64::EPSILON * fx.abs().max(f_new.abs());
        if f_new > fx + slack || (!opts.restart && f_new > fx) {
            if just_restarted || !opts.restart {
                // A plain prox-gradient step from x failed to decrease the
                // objective: only rounding is left.
                return ApgResult {
                    x,
                    value: fx,
                    iters: iter,
                    grad_map_norm: grad_map.min(gm),
                    lipschitz,
                    restarts,
                    status: ApgStatus::Stagnated,
                };
            }
            t = 1.0;
            y = x.clone();
            restarts += 1;
            just_restarted = true;
            continue;
        }
        if just_restarted && x_new == x {
            return ApgResult {
                x,
                value: fx,
                iters: iter,
                grad_map_norm: gm,
                lipschitz,
                restarts,
                status: ApgStatus::Stagnated,
            };
        }
        just_restarted = false;
        grad_map = gm;

        // Gradient restart: drop the momentum once it points uphill.
        let uphill = opts.restart && (&y - &x_new).dot(&(&x_new - &x)) > 0.0;
        if uphill {
            t = 1.0;
            restarts += 1;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        y = &x_new + (&x_new - &x) * momentum;
        let prev_value = fx;
        x = x_new;
        fx = f_new;
        t = t_next;

        let progress = ApgProgress {
            iter,
            x: &x,
            value: fx,
            prev_value,
            grad_map_norm: gm,
            lipschitz,
        };
        if stop(&progress) {
            return ApgResult {
                x,
                value: fx,
                iters: iter,
                grad_map_norm: gm,
                lipschitz,
                restarts,
                status: ApgStatus::Stopped,
            };
        }
    }

    ApgResult {
        x,
        value: fx,
        iters: opts.max_iters,
        grad_map_norm: grad_map,
        lipschitz,
        restarts,
        status: ApgStatus::MaxIters,
    }
}

/// Componentwise soft-thresholding, the prox of `threshold * ||.||_1`.
pub fn soft_threshold(z: &DVector<f64>, threshold: f64) -> DVector<f64> {
    z.map(|v| {
        if v > threshold {
            v - threshold
        } else if v < -threshold {
            v + threshold
        } else {
            0.0
        }
    })
}
