//! High-accuracy reference minimizers of the global energy
//! `E = (1/N) sum_j f_j`.

use nalgebra::{DMatrix, DVector};

use crate::engine::{global_energy, global_subgradient};
use crate::error::{Error, Result};
use crate::oracle::{CompositeOracle, ParameterPoint, SmoothPart};
use crate::prox_grad::{self, ApgOptions, Composite};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMethod {
    /// Linear solve; minimum-norm solution when the Hessian is singular.
    Direct,
    DampedNewton,
    Accelerated,
    ProxGradient,
}

#[derive(Debug, Clone, Copy)]
pub struct ReferenceOptions {
    /// Gradient (or gradient-mapping) norm to reach.
    pub tolerance: f64,
    /// Largest dimension for which Newton forms the Hessian.
    pub hessian_budget: usize,
    pub max_iters: usize,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            hessian_budget: 4096,
            max_iters: 200_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reference {
    pub theta: ParameterPoint,
    pub energy: f64,
    pub method: ReferenceMethod,
    /// Final (sub)gradient or gradient-mapping norm.
    pub residual: f64,
}

/// Average of the client costs as one composite problem.
pub(crate) struct Global<'a> {
    oracles: &'a [CompositeOracle],
    l1: f64,
}

impl<'a> Global<'a> {
    pub(crate) fn new(oracles: &'a [CompositeOracle]) -> Self {
        let l1 = oracles.iter().map(|o| o.l1()).sum::<f64>() / oracles.len() as f64;
        Self { oracles, l1 }
    }
}

impl Composite for Global<'_> {
    fn dim(&self) -> usize {
        self.oracles[0].dim()
    }

    fn smooth(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let n = self.oracles.len() as f64;
        let mut v = 0.0;
        let mut g = DVector::zeros(x.len());
        for o in self.oracles {
            let (vj, gj) = o.smooth_value_grad(x);
            v += vj;
            g += gj;
        }
        (v / n, g / n)
    }

    fn nonsmooth(&self, x: &DVector<f64>) -> f64 {
        self.l1 * x.lp_norm(1)
    }

    fn prox(&self, z: &DVector<f64>, step: f64) -> DVector<f64> {
        prox_grad::soft_threshold(z, step * self.l1)
    }
}

fn hessian_of(o: &CompositeOracle, x: &DVector<f64>) -> DMatrix<f64> {
    let d = o.dim();
    let smooth = match o.smooth_part() {
        SmoothPart::Quadratic(q) => q.hessian().clone(),
        SmoothPart::Logistic(l) => l.hessian(x),
    };
    smooth + DMatrix::identity(d, d) * o.ridge()
}

fn mean_hessian(oracles: &[CompositeOracle], x: &DVector<f64>) -> DMatrix<f64> {
    let d = oracles[0].dim();
    let mut h = DMatrix::zeros(d, d);
    for o in oracles {
        h += hessian_of(o, x);
    }
    h / oracles.len() as f64
}

/// Picks the method by problem structure: direct for quadratics, proximal
/// gradient when an l1 term is present, Newton for other smooth costs within
/// the Hessian budget and accelerated gradient beyond it.
pub fn default_method(oracles: &[CompositeOracle], opts: &ReferenceOptions) -> ReferenceMethod {
    let quadratic = oracles
        .iter()
        .all(|o| matches!(o.smooth_part(), SmoothPart::Quadratic(_)));
    let l1 = oracles.iter().any(|o| o.l1() > 0.0);
    match (quadratic, l1) {
        (_, true) => ReferenceMethod::ProxGradient,
        (true, false) => ReferenceMethod::Direct,
        (false, false) if oracles[0].dim() <= opts.hessian_budget => ReferenceMethod::DampedNewton,
        _ => ReferenceMethod::Accelerated,
    }
}

pub fn reference_solution(
    oracles: &[CompositeOracle],
    opts: &ReferenceOptions,
) -> Result<Reference> {
    if oracles.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    reference_with(oracles, default_method(oracles, opts), opts)
}

pub fn reference_with(
    oracles: &[CompositeOracle],
    method: ReferenceMethod,
    opts: &ReferenceOptions,
) -> Result<Reference> {
    if oracles.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    let theta = match method {
        ReferenceMethod::Direct => direct(oracles)?,
        ReferenceMethod::DampedNewton => newton(oracles, opts)?,
        ReferenceMethod::Accelerated | ReferenceMethod::ProxGradient => accelerated(oracles, opts)?,
    };
    let residual = match method {
        ReferenceMethod::ProxGradient => {
            let problem = Global::new(oracles);
            let l = oracles
                .iter()
                .map(|o| o.step_hint())
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE);
            prox_grad::gradient_mapping_norm(&problem, &theta, l)
        }
        _ => global_subgradient(oracles, &theta).norm(),
    };
    if method != ReferenceMethod::Direct && !(residual <= opts.tolerance) {
        return Err(Error::Reference(format!(
            "{method:?} stopped at residual {residual:.3e} above {:.1e}",
            opts.tolerance
        )));
    }
    Ok(Reference {
        energy: global_energy(oracles, &theta),
        theta: theta.into(),
        method,
        residual,
    })
}

fn direct(oracles: &[CompositeOracle]) -> Result<DVector<f64>> {
    let d = oracles[0].dim();
    let mut h = DMatrix::zeros(d, d);
    let mut l = DVector::zeros(d);
    for o in oracles {
        match o.smooth_part() {
            SmoothPart::Quadratic(q) if o.l1() == 0.0 => {
                h += q.hessian() + DMatrix::identity(d, d) * o.ridge();
                l += q.linear();
            }
            _ => {
                return Err(Error::Reference(
                    "direct solve needs quadratic costs without an l1 term".into(),
                ))
            }
        }
    }
    let n = oracles.len() as f64;
    h /= n;
    l /= n;
    if let Some(chol) = h.clone().cholesky() {
        let x = chol.solve(&l);
        // One refinement step against the rounding of the factorization.
        let r = &l - &h * &x;
        return Ok(x + chol.solve(&r));
    }
    let scale = h.amax().max(f64::MIN_POSITIVE);
    let svd = h.svd(true, true);
    svd.solve(&l, 1e-10 * scale)
        .map_err(|e| Error::Reference(format!("singular solve failed: {e}")))
}

fn newton(oracles: &[CompositeOracle], opts: &ReferenceOptions) -> Result<DVector<f64>> {
    let d = oracles[0].dim();
    if d > opts.hessian_budget {
        return Err(Error::Reference(format!(
            "dimension {d} exceeds the Hessian budget {}",
            opts.hessian_budget
        )));
    }
    let mut x = DVector::zeros(d);
    let mut fx = global_energy(oracles, &x);
    for _ in 0..200 {
        let g = global_subgradient(oracles, &x);
        if g.norm() <= opts.tolerance {
            return Ok(x);
        }
        let h = mean_hessian(oracles, &x);
        let p = -h
            .cholesky()
            .ok_or_else(|| Error::Reference("Hessian lost positive definiteness".into()))?
            .solve(&g);
        let slope = g.dot(&p);
        let mut s = 1.0;
        let accepted = loop {
            let trial = &x + &p * s;
            let ft = global_energy(oracles, &trial);
            if ft <= fx + 1e-4 * s * slope {
                break Some((trial, ft));
            }
            s *= 0.5;
            if s < 1e-12 {
                break None;
            }
        };
        match accepted {
            Some((trial, ft)) => {
                x = trial;
                fx = ft;
            }
            None => {
                // Energy differences are below rounding; keep the full step
                // if it still shrinks the gradient.
                let trial = &x + &p;
                if global_subgradient(oracles, &trial).norm() < g.norm() {
                    fx = global_energy(oracles, &trial);
                    x = trial;
                } else {
                    break;
                }
            }
        }
    }
    Ok(x)
}

fn accelerated(oracles: &[CompositeOracle], opts: &ReferenceOptions) -> Result<DVector<f64>> {
    let problem = Global::new(oracles);
    let smooth = problem.l1 == 0.0;
    let lipschitz = oracles
        .iter()
        .map(|o| o.step_hint())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let apg = ApgOptions {
        max_iters: opts.max_iters,
        lipschitz,
        restart: true,
    };
    let tol = opts.tolerance;
    let x0 = DVector::zeros(problem.dim());
    let r = prox_grad::minimize(&problem, &x0, apg, |p| {
        if p.grad_map_norm > tol {
            return false;
        }
        let here = if smooth {
            global_subgradient(oracles, p.x).norm()
        } else {
            prox_grad::gradient_mapping_norm(&problem, p.x, p.lipschitz)
        };
        here <= tol
    });
    Ok(r.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::QuadraticForm;

    #[test]
    fn weighted_mean_of_two_quadratics() {
        let fam = vec![
            CompositeOracle::quadratic(QuadraticForm::centered(2.0, &[1.0]).unwrap()).unwrap(),
            CompositeOracle::quadratic(QuadraticForm::centered(1.0, &[-1.0]).unwrap()).unwrap(),
        ];
        let r = reference_solution(&fam, &ReferenceOptions::default()).unwrap();
        assert_eq!(r.method, ReferenceMethod::Direct);
        assert!((r.theta[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn half_square_has_zero_reference() {
        let fam = vec![
            CompositeOracle::quadratic(QuadraticForm::centered(1.0, &[0.0]).unwrap()).unwrap(),
        ];
        let r = reference_solution(&fam, &ReferenceOptions::default()).unwrap();
        assert_eq!(r.theta[0], 0.0);
        assert_eq!(r.energy, 0.0);
    }

    #[test]
    fn accelerated_matches_direct_on_quadratics() {
        let fam = vec![
            CompositeOracle::quadratic(QuadraticForm::centered(3.0, &[1.0, 2.0]).unwrap()).unwrap(),
            CompositeOracle::quadratic(QuadraticForm::centered(0.5, &[-4.0, 0.5]).unwrap())
                .unwrap(),
        ];
        let opts = ReferenceOptions::default();
        let a = reference_with(&fam, ReferenceMethod::Direct, &opts).unwrap();
        let b = reference_with(&fam, ReferenceMethod::Accelerated, &opts).unwrap();
        assert!((a.theta.vector() - b.theta.vector()).norm() < 1e-9);
    }

    #[test]
    fn singular_quadratic_gives_minimum_norm_point() {
        // 1/2 (x1 + x2 - 2)^2 has minimum-norm minimizer (1, 1).
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_element(1, 2.0);
        let fam = vec![CompositeOracle::elastic_net(&a, &b, 0.0, 0.0).unwrap()];
        let r =
            reference_with(&fam, ReferenceMethod::Direct, &ReferenceOptions::default()).unwrap();
        assert!((r.theta[0] - 1.0).abs() < 1e-12 && (r.theta[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_tolerance_is_a_reference_error() {
        let h = DMatrix::from_row_slice(2, 2, &[10.0, 1.0, 1.0, 0.2]);
        let fam = vec![CompositeOracle::quadratic(
            QuadraticForm::new(h, DVector::from_vec(vec![1.0, -2.0]), 0.0).unwrap(),
        )
        .unwrap()];
        let opts = ReferenceOptions {
            max_iters: 1,
            ..Default::default()
        };
        let e = reference_with(&fam, ReferenceMethod::Accelerated, &opts);
        assert!(matches!(e, Err(Error::Reference(_))));
        assert_eq!(e.unwrap_err().exit_code(), 1);
    }
}
