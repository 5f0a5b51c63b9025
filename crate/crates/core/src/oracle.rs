//! Per-client composite costs `f_j = smooth + ridge/2 ||.||^2 + l1 ||.||_1`
//! and the conjugate of the shifted function `g_j = f_j - nu/2 ||.||^2`.

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::prox_grad::{self, ApgOptions, ApgStatus, Composite};

/// A point of the parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPoint(DVector<f64>);

impl ParameterPoint {
    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn from_vec(coords: Vec<f64>) -> Self {
        Self(DVector::from_vec(coords))
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        Self(DVector::from_column_slice(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl Deref for ParameterPoint {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

impl DerefMut for ParameterPoint {
    fn deref_mut(&mut self) -> &mut DVector<f64> {
        &mut self.0
    }
}

impl From<DVector<f64>> for ParameterPoint {
    fn from(v: DVector<f64>) -> Self {
        Self(v)
    }
}

/// `1/2 x^T H x - l^T x + c` with a cached eigendecomposition of `H`.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    constant: f64,
    eigen: SymmetricEigen<f64, nalgebra::Dyn>,
}

impl QuadraticForm {
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>, constant: f64) -> Result<Self> {
        let d = hessian.nrows();
        if hessian.ncols() != d || linear.len() != d || d == 0 {
            return Err(Error::Construction(format!(
                "quadratic form shape mismatch: {}x{} hessian, {} linear",
                hessian.nrows(),
                hessian.ncols(),
                linear.len()
            )));
        }
        if !hessian.iter().chain(linear.iter()).all(|v| v.is_finite()) || !constant.is_finite() {
            return Err(Error::Construction(
                "non-finite quadratic coefficients".into(),
            ));
        }
        let scale = hessian.amax().max(1.0);
        if (&hessian - hessian.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Construction(
                "quadratic hessian is not symmetric".into(),
            ));
        }
        let hessian = (&hessian + hessian.transpose()) * 0.5;
        let eigen = SymmetricEigen::new(hessian.clone());
        Ok(Self {
            hessian,
            linear,
            constant,
            eigen,
        })
    }

    /// `a/2 ||x - center||^2`.
    pub fn centered(weight: f64, center: &[f64]) -> Result<Self> {
        let d = center.len();
        let c = DVector::from_column_slice(center);
        let constant = 0.5 * weight * c.norm_squared();
        Self::new(DMatrix::identity(d, d) * weight, c * weight, constant)
    }

    /// `1/(2m) ||A x - b||^2` with `m` the number of rows.
    pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Self> {
        let m = a.nrows();
        if m == 0 || b.len() != m {
            return Err(Error::Construction(format!(
                "least squares needs a nonempty design with matching targets ({} rows, {} targets)",
                m,
                b.len()
            )));
        }
        let inv = 1.0 / m as f64;
        let at = a.transpose();
        Self::new(&at * a * inv, &at * b * inv, 0.5 * inv * b.norm_squared())
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.linear
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn eig_min(&self) -> f64 {
        self.eigen.eigenvalues.min()
    }

    pub fn eig_max(&self) -> f64 {
        self.eigen.eigenvalues.max()
    }

    fn value_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let hx = &self.hessian * x;
        let value = 0.5 * x.dot(&hx) - self.linear.dot(x) + self.constant;
        (value, hx - &self.linear)
    }
}

/// Multinomial logistic loss averaged over a data shard. Features are stored
/// with an appended unit column so the parameter is a row-major
/// `(features + 1) x classes` matrix: weights first, then the bias row.
#[derive(Debug, Clone)]
pub struct LogisticLoss {
    augmented: DMatrix<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl LogisticLoss {
    /// `labels` are zero-based class indices.
    pub fn new(features: &DMatrix<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::Construction("empty data shard".into()));
        }
        if labels.len() != n {
            return Err(Error::Construction(format!(
                "{} samples but {} labels",
                n,
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Construction(
                "logistic loss needs at least two classes".into(),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Construction(format!(
                "label index {bad} outside 0..{classes}"
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::Construction("non-finite feature value".into()));
        }
        let p = features.ncols();
        let mut augmented = DMatrix::from_element(n, p + 1, 1.0);
        augmented.view_mut((0, 0), (n, p)).copy_from(features);
        Ok(Self {
            augmented,
            labels,
            classes,
        })
    }

    pub fn samples(&self) -> usize {
        self.augmented.nrows()
    }

    pub fn features(&self) -> usize {
        self.augmented.ncols() - 1
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.augmented.ncols() * self.classes
    }

    /// Upper bound on the Hessian norm: `||X~||_F^2 / (2 n)`, using
    /// `diag(p) - p p^T <= I/2`.
    pub fn curvature_bound(&self) -> f64 {
        self.augmented.norm_squared() / (2.0 * self.samples() as f64)
    }

    fn weights(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.augmented.ncols(), self.classes, x.as_slice())
    }

    /// Softmax probabilities per sample (rows) and the mean loss.
    fn forward(&self, x: &DVector<f64>) -> (f64, DMatrix<f64>) {
        let scores = &self.augmented * self.weights(x);
        let n = self.samples();
        let mut probs = scores.clone();
        let mut total = 0.0;
        for i in 0..n {
            let mut row = probs.row_mut(i);
            let max = row.max();
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row /= sum;
            total += max + sum.ln() - scores[(i, self.labels[i])];
        }
        (total / n as f64, probs)
    }

    fn value_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (value, mut residual) = self.forward(x);
        for (i, &y) in self.labels.iter().enumerate() {
            residual[(i, y)] -= 1.0;
        }
        let g = self.augmented.transpose() * residual / self.samples() as f64;
        (value, flatten_row_major(&g))
    }

    /// Hessian of the mean loss in the flattened parameter layout.
    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (_, probs) = self.forward(x);
        let q = self.augmented.ncols();
        let k = self.classes;
        let d = q * k;
        let mut h = DMatrix::zeros(d, d);
        let inv_n = 1.0 / self.samples() as f64;
        let mut block = DMatrix::zeros(k, k);
        for s in 0..self.samples() {
            for l in 0..k {
                for m in 0..k {
                    let delta = if l == m { probs[(s, l)] } else { 0.0 };
                    block[(l, m)] = delta - probs[(s, l)] * probs[(s, m)];
                }
            }
            let xs = self.augmented.row(s);
            for i in 0..q {
                let xi = xs[i] * inv_n;
                if xi == 0.0 {
                    continue;
                }
                for j in 0..q {
                    let w = xi * xs[j];
                    if w == 0.0 {
                        continue;
                    }
                    for l in 0..k {
                        for m in 0..k {
                            h[(i * k + l, j * k + m)] += w * block[(l, m)];
                        }
                    }
                }
            }
        }
        h
    }
}

fn flatten_row_major(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
    out
}

#[derive(Debug, Clone)]
pub enum SmoothPart {
    Quadratic(QuadraticForm),
    Logistic(LogisticLoss),
}

impl SmoothPart {
    fn dim(&self) -> usize {
        match self {
            SmoothPart::Quadratic(q) => q.dim(),
            SmoothPart::Logistic(l) => l.dim(),
        }
    }

    fn value_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        match self {
            SmoothPart::Quadratic(q) => q.value_grad(x),
            SmoothPart::Logistic(l) => l.value_grad(x),
        }
    }

    /// Known lower bound on the curvature of this part alone.
    fn curvature_floor(&self) -> f64 {
        match self {
            SmoothPart::Quadratic(q) => q.eig_min().max(0.0),
            SmoothPart::Logistic(_) => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConjugateMode {
    Analytic,
    Numeric,
}

/// Per-client cost `f(x) = s(x) + ridge/2 ||x||^2 + l1 ||x||_1`.
#[derive(Debug, Clone)]
pub struct CompositeOracle {
    smooth: Arc<SmoothPart>,
    ridge: f64,
    l1: f64,
    mu: f64,
    lipschitz: Option<f64>,
}

impl CompositeOracle {
    pub fn new(
        smooth: SmoothPart,
        ridge: f64,
        l1: f64,
        mu: f64,
        lipschitz: Option<f64>,
    ) -> Result<Self> {
        if !(ridge >= 0.0 && l1 >= 0.0 && mu >= 0.0) {
            return Err(Error::Construction(format!(
                "ridge, l1 and mu must be nonnegative (got {ridge}, {l1}, {mu})"
            )));
        }
        if let Some(l) = lipschitz {
            if !(l >= mu) {
                return Err(Error::Construction(format!("L = {l} is below mu = {mu}")));
            }
        }
        Ok(Self {
            smooth: Arc::new(smooth),
            ridge,
            l1,
            mu,
            lipschitz,
        })
    }

    /// Strongly convex quadratic `1/2 x^T A x - b^T x + c`; `mu` and `L` are
    /// the extreme eigenvalues of `A`.
    pub fn quadratic(form: QuadraticForm) -> Result<Self> {
        let (lo, hi) = (form.eig_min(), form.eig_max());
        if !(lo > 0.0) {
            return Err(Error::Construction(format!(
                "quadratic hessian is not positive definite (min eigenvalue {lo:.3e})"
            )));
        }
        Self::new(SmoothPart::Quadratic(form), 0.0, 0.0, lo, Some(hi))
    }

    /// `1/(2m)||A x - b||^2 + l1 ||x||_1 + mu/2 ||x||^2`. `mu = 0` and
    /// `l1 = 0` give plain least squares.
    pub fn elastic_net(a: &DMatrix<f64>, b: &DVector<f64>, l1: f64, mu: f64) -> Result<Self> {
        let form = QuadraticForm::least_squares(a, b)?;
        let lipschitz = if l1 > 0.0 {
            None
        } else {
            Some(form.eig_max().max(0.0) + mu)
        };
        Self::new(SmoothPart::Quadratic(form), mu, l1, mu, lipschitz)
    }

    /// Mean multinomial logistic loss plus `mu/2 ||x||^2`.
    pub fn logistic(loss: LogisticLoss, mu: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::Construction("logistic family needs mu > 0".into()));
        }
        let lip = loss.curvature_bound() + mu;
        Self::new(SmoothPart::Logistic(loss), mu, 0.0, mu, Some(lip))
    }

    pub fn dim(&self) -> usize {
        self.smooth.dim()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn l1(&self) -> f64 {
        self.l1
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn smooth_part(&self) -> &SmoothPart {
        &self.smooth
    }

    pub fn is_smooth(&self) -> bool {
        self.l1 == 0.0
    }

    pub fn conjugate_mode(&self) -> ConjugateMode {
        match (&*self.smooth, self.l1 == 0.0) {
            (SmoothPart::Quadratic(_), true) => ConjugateMode::Analytic,
            _ => ConjugateMode::Numeric,
        }
    }

    /// Lower bound on the curvature of `f` (at least `mu`).
    pub fn curvature_floor(&self) -> f64 {
        (self.smooth.curvature_floor() + self.ridge).max(self.mu)
    }

    /// Curvature estimate used to seed step sizes when `L` is unknown.
    pub fn step_hint(&self) -> f64 {
        match self.lipschitz {
            Some(l) => l,
            None => match &*self.smooth {
                SmoothPart::Quadratic(q) => q.eig_max().max(0.0) + self.ridge,
                SmoothPart::Logistic(l) => l.curvature_bound() + self.ridge,
            },
        }
        .max(f64::MIN_POSITIVE)
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Config(format!(
                "point has dimension {} but the oracle expects {}",
                x.len(),
                self.dim()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("non-finite coordinate".into()));
        }
        Ok(())
    }

    /// Value and gradient of the smooth part `s + ridge/2 ||.||^2`.
    pub fn smooth_value_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (v, g) = self.smooth.value_grad(x);
        if self.ridge == 0.0 {
            (v, g)
        } else {
            (v + 0.5 * self.ridge * x.norm_squared(), g + x * self.ridge)
        }
    }

    pub fn nonsmooth_value(&self, x: &DVector<f64>) -> f64 {
        if self.l1 == 0.0 {
            0.0
        } else {
            self.l1 * x.lp_norm(1)
        }
    }

    /// Prox of `step * l1 ||.||_1`.
    pub fn prox_nonsmooth(&self, z: &DVector<f64>, step: f64) -> DVector<f64> {
        if self.l1 == 0.0 {
            z.clone()
        } else {
            prox_grad::soft_threshold(z, step * self.l1)
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.smooth_value_grad(x).0 + self.nonsmooth_value(x)
    }

    /// Minimum-norm element of the subdifferential of `f` at `x`.
    pub fn min_norm_subgradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let (_, g) = self.smooth_value_grad(x);
        if self.l1 == 0.0 {
            return g;
        }
        min_norm_subgradient_l1(&g, x, self.l1)
    }

    /// Returns a copy with `alpha/2 ||.||^2` added.
    pub fn regularized(&self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!(
                "regularization weight must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            smooth: Arc::clone(&self.smooth),
            ridge: self.ridge + alpha,
            l1: self.l1,
            mu: self.mu + alpha,
            lipschitz: self.lipschitz.map(|l| l + alpha),
        })
    }
}

/// Minimum-norm subgradient of `s + l1 ||.||_1` given `grad s`.
pub(crate) fn min_norm_subgradient_l1(
    grad: &DVector<f64>,
    x: &DVector<f64>,
    l1: f64,
) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        grad.iter().zip(x.iter()).map(|(&g, &xi)| {
            if xi > 0.0 {
                g + l1
            } else if xi < 0.0 || g > l1 {
                g - l1
            } else if g < -l1 {
                g + l1
            } else {
                0.0
            }
        }),
    )
}

/// `f(x)` and the gradient of its smooth part.
pub fn evaluate(oracle: &CompositeOracle, theta: &ParameterPoint) -> Result<(f64, ParameterPoint)> {
    oracle.check_dim(theta)?;
    let (v, g) = oracle.smooth_value_grad(theta);
    Ok((v + oracle.nonsmooth_value(theta), g.into()))
}

/// Returns the family with `alpha/2 ||.||^2` added to every member.
pub fn regularize(oracles: &[CompositeOracle], alpha: f64) -> Result<Vec<CompositeOracle>> {
    oracles.iter().map(|o| o.regularized(alpha)).collect()
}

/// Value of `g*(xi)` for `g = f - nu/2 ||.||^2`.
#[derive(Debug, Clone)]
pub struct ConjugateResult {
    /// Exact in analytic mode. In numeric mode the value attained at
    /// `maximizer`, a lower estimate of the supremum.
    pub value: f64,
    pub maximizer: ParameterPoint,
    /// Norm bound on a subgradient of the inner objective at `maximizer`
    /// (zero in analytic mode).
    pub residual: f64,
    /// Bound on `g*(xi) - value` implied by `residual` and the inner
    /// strong concavity.
    pub slack: f64,
}

impl ConjugateResult {
    pub fn upper(&self) -> f64 {
        self.value + self.slack
    }
}

/// Inner problem `min g(x) - <xi, x>` for the numeric conjugate.
struct ConjugateInner<'a> {
    oracle: &'a CompositeOracle,
    nu: f64,
    xi: &'a DVector<f64>,
}

impl Composite for ConjugateInner<'_> {
    fn dim(&self) -> usize {
        self.oracle.dim()
    }

    fn smooth(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (v, g) = self.oracle.smooth_value_grad(x);
        (
            v - 0.5 * self.nu * x.norm_squared() - self.xi.dot(x),
            g - x * self.nu - self.xi,
        )
    }

    fn nonsmooth(&self, x: &DVector<f64>) -> f64 {
        self.oracle.nonsmooth_value(x)
    }

    fn prox(&self, z: &DVector<f64>, step: f64) -> DVector<f64> {
        self.oracle.prox_nonsmooth(z, step)
    }
}

/// Evaluates conjugates of `g = f - nu/2 ||.||^2` for one oracle and a
/// fixed `nu`.
#[derive(Debug, Clone)]
pub struct Conjugator {
    oracle: CompositeOracle,
    nu: f64,
    pub tolerance: f64,
    pub max_iters: usize,
}

/// Relative threshold below which an eigenvalue of `H + (ridge - nu) I`
/// counts as zero.
const NULL_EIG_RTOL: f64 = 1e-10;

impl Conjugator {
    pub fn new(oracle: &CompositeOracle, nu: f64) -> Result<Self> {
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::Domain(format!("nu must be positive, got {nu}")));
        }
        if nu > oracle.mu() * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "nu = {nu} exceeds mu = {}; g = f - nu/2||.||^2 is not convex",
                oracle.mu()
            )));
        }
        if oracle.conjugate_mode() == ConjugateMode::Numeric && !(oracle.curvature_floor() > nu) {
            return Err(Error::Domain(format!(
                "numeric conjugate needs nu < mu strictly (nu = {nu}, curvature floor = {})",
                oracle.curvature_floor()
            )));
        }
        Ok(Self {
            oracle: oracle.clone(),
            nu,
            tolerance: 1e-10,
            max_iters: 200_000,
        })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn oracle(&self) -> &CompositeOracle {
        &self.oracle
    }

    /// `g(x) = f(x) - nu/2 ||x||^2`.
    pub fn g(&self, x: &DVector<f64>) -> f64 {
        self.oracle.value(x) - 0.5 * self.nu * x.norm_squared()
    }

    /// Conjugate at `xi`, optionally warm-starting the numeric inner solve.
    pub fn eval(&self, xi: &DVector<f64>, warm: Option<&DVector<f64>>) -> Result<ConjugateResult> {
        self.oracle.check_dim(xi)?;
        match (self.oracle.conjugate_mode(), &*self.oracle.smooth) {
            (ConjugateMode::Analytic, SmoothPart::Quadratic(q)) => Ok(self.analytic(q, xi)),
            _ => self.numeric(xi, warm),
        }
    }

    fn shifted_eigs<'q>(&self, q: &'q QuadraticForm) -> (Vec<f64>, &'q DMatrix<f64>, f64) {
        let shift = self.oracle.ridge - self.nu;
        let eigs: Vec<f64> = q.eigen.eigenvalues.iter().map(|l| l + shift).collect();
        let scale = eigs.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        (eigs, &q.eigen.eigenvectors, NULL_EIG_RTOL * scale)
    }

    fn analytic(&self, q: &QuadraticForm, xi: &DVector<f64>) -> ConjugateResult {
        let (eigs, vecs, null_tol) = self.shifted_eigs(q);
        let rhs = xi + &q.linear;
        let coeffs = vecs.transpose() * &rhs;
        let feas_tol = 1e-9 * (1.0 + rhs.norm());
        let mut value = -q.constant;
        let mut weights = DVector::zeros(coeffs.len());
        for (i, (&m, &w)) in eigs.iter().zip(coeffs.iter()).enumerate() {
            if m > null_tol {
                value += 0.5 * w * w / m;
                weights[i] = w / m;
            } else if w.abs() > feas_tol {
                value = f64::INFINITY;
            }
        }
        ConjugateResult {
            value,
            maximizer: (vecs * weights).into(),
            residual: 0.0,
            slack: 0.0,
        }
    }

    /// Removes the components of `xi` that leave the (affine) domain of `g*`.
    /// Identity unless `g` is affine along some direction.
    pub fn project_to_domain(&self, xi: &DVector<f64>) -> DVector<f64> {
        match (self.oracle.conjugate_mode(), &*self.oracle.smooth) {
            (ConjugateMode::Analytic, SmoothPart::Quadratic(q)) => {
                let (eigs, vecs, null_tol) = self.shifted_eigs(q);
                let rhs = xi + &q.linear;
                let mut out = xi.clone();
                for (i, &m) in eigs.iter().enumerate() {
                    if m <= null_tol {
                        let v = vecs.column(i);
                        out -= v * v.dot(&rhs);
                    }
                }
                out
            }
            _ => xi.clone(),
        }
    }

    fn numeric(&self, xi: &DVector<f64>, warm: Option<&DVector<f64>>) -> Result<ConjugateResult> {
        let inner = ConjugateInner {
            oracle: &self.oracle,
            nu: self.nu,
            xi,
        };
        let strong = self.oracle.curvature_floor() - self.nu;
        let tol = self.tolerance * (xi.norm() + 1.0);
        let x0 = warm.cloned().unwrap_or_else(|| DVector::zeros(xi.len()));
        let opts = ApgOptions {
            max_iters: self.max_iters,
            lipschitz: (self.oracle.step_hint() - self.nu).max(strong),
            restart: true,
        };
        // The prox-gradient step from y to x+ leaves a subgradient of norm
        // at most 2 ||G(y)|| at x+.
        let res = prox_grad::minimize(&inner, &x0, opts, |p| 2.0 * p.grad_map_norm <= tol);
        let mut residual = 2.0 * res.grad_map_norm;
        if res.status == ApgStatus::Stagnated {
            // Rounding floor: recompute the certificate at the final point.
            residual = 2.0 * prox_grad::gradient_mapping_norm(&inner, &res.x, res.lipschitz);
        }
        if !(residual <= tol) && res.status != ApgStatus::Stagnated {
            return Err(Error::Conjugate {
                residual,
                tolerance: tol,
            });
        }
        Ok(ConjugateResult {
            value: -res.value,
            maximizer: res.x.into(),
            residual,
            slack: residual * residual / (2.0 * strong),
        })
    }
}

/// `g*(xi) = sup_x <xi, x> - f(x) + nu/2 ||x||^2`.
pub fn conjugate_g(
    oracle: &CompositeOracle,
    xi: &ParameterPoint,
    nu: f64,
) -> Result<ConjugateResult> {
    Conjugator::new(oracle, nu)?.eval(xi, None)
}

/// Data for one problem family, one entry per client.
#[derive(Debug, Clone)]
pub enum ProblemSpec {
    Quadratic(Vec<QuadraticForm>),
    ElasticNet {
        shards: Vec<(DMatrix<f64>, DVector<f64>)>,
        l1: f64,
        mu: f64,
    },
    /// Labels are zero-based class indices.
    Logistic {
        shards: Vec<(DMatrix<f64>, Vec<usize>)>,
        classes: usize,
        mu: f64,
    },
}

impl ProblemSpec {
    pub fn clients(&self) -> usize {
        match self {
            ProblemSpec::Quadratic(f) => f.len(),
            ProblemSpec::ElasticNet { shards, .. } => shards.len(),
            ProblemSpec::Logistic { shards, .. } => shards.len(),
        }
    }
}

/// Builds one oracle per client.
pub fn make_family(spec: &ProblemSpec) -> Result<Vec<CompositeOracle>> {
    if spec.clients() == 0 {
        return Err(Error::Construction(
            "a family needs at least one client".into(),
        ));
    }
    let oracles: Vec<CompositeOracle> = match spec {
        ProblemSpec::Quadratic(forms) => forms
            .iter()
            .cloned()
            .map(CompositeOracle::quadratic)
            .collect::<Result<_>>()?,
        ProblemSpec::ElasticNet { shards, l1, mu } => shards
            .iter()
            .map(|(a, b)| CompositeOracle::elastic_net(a, b, *l1, *mu))
            .collect::<Result<_>>()?,
        ProblemSpec::Logistic {
            shards,
            classes,
            mu,
        } => shards
            .iter()
            .map(|(x, y)| {
                LogisticLoss::new(x, y.clone(), *classes)
                    .and_then(|loss| CompositeOracle::logistic(loss, *mu))
            })
            .collect::<Result<_>>()?,
    };
    let d = oracles[0].dim();
    if oracles.iter().any(|o| o.dim() != d) {
        return Err(Error::Construction(
            "clients disagree on the parameter dimension".into(),
        ));
    }
    Ok(oracles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    fn half_square() -> CompositeOracle {
        CompositeOracle::quadratic(QuadraticForm::centered(1.0, &[0.0]).unwrap()).unwrap()
    }

    #[test]
    fn quadratic_at_center_is_zero() {
        let o = CompositeOracle::quadratic(QuadraticForm::centered(1.0, &[1.0]).unwrap()).unwrap();
        let (v, g) = evaluate(&o, &ParameterPoint::from_vec(vec![1.0])).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn evaluate_rejects_bad_points() {
        let o = half_square();
        assert!(matches!(
            evaluate(&o, &ParameterPoint::zeros(2)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            evaluate(&o, &ParameterPoint::from_vec(vec![f64::NAN])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn conjugate_of_quarter_square() {
        // g = theta^2 / 4, g*(xi) = xi^2.
        let r = conjugate_g(&half_square(), &ParameterPoint::from_vec(vec![0.3]), 0.5).unwrap();
        assert_close!(r.value, 0.09, 1e-15);
        assert_close!(r.maximizer[0], 0.6, 1e-15);
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn conjugate_of_affine_is_indicator() {
        // f = (theta - 1)^2 / 2, nu = 1: g = -theta + 1/2.
        let o = CompositeOracle::quadratic(QuadraticForm::centered(1.0, &[1.0]).unwrap()).unwrap();
        let on = conjugate_g(&o, &ParameterPoint::from_vec(vec![-1.0]), 1.0).unwrap();
        assert_close!(on.value, -0.5, 1e-15);
        let off = conjugate_g(&o, &ParameterPoint::from_vec(vec![-0.5]), 1.0).unwrap();
        assert!(off.value.is_infinite() && off.value > 0.0);
    }

    #[test]
    fn conjugate_rejects_nu_above_mu() {
        assert!(matches!(
            conjugate_g(&half_square(), &ParameterPoint::zeros(1), 1.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn numeric_conjugate_needs_strict_nu() {
        let a = DMatrix::from_element(1, 1, 0.0);
        let b = DVector::from_element(1, 0.0);
        let o = CompositeOracle::elastic_net(&a, &b, 0.1, 0.5).unwrap();
        assert!(Conjugator::new(&o, 0.5).is_err());
        assert!(Conjugator::new(&o, 0.25).is_ok());
    }

    #[test]
    fn numeric_conjugate_of_elastic_net_matches_closed_form() {
        // f = 1/2 (t - 2)^2 + |t| + 0.5/2 t^2, nu = 0.25:
        // g = 1/2 (t-2)^2 + |t| + 0.125 t^2; sup_t xi t - g(t) solved by hand
        // for t > 0: (1.25) t = xi + 2 - 1.
        let a = DMatrix::from_element(1, 1, 1.0);
        let b = DVector::from_element(1, 2.0);
        let o = CompositeOracle::elastic_net(&a, &b, 1.0, 0.5).unwrap();
        let xi: f64 = 0.5;
        let t = (xi + 1.0) / 1.25;
        let expected = xi * t - (0.5 * (t - 2.0).powi(2) + t + 0.125 * t * t);
        let r = conjugate_g(&o, &ParameterPoint::from_vec(vec![xi]), 0.25).unwrap();
        assert_close!(r.value, expected, 1e-12);
        assert_close!(r.maximizer[0], t, 1e-9);
        assert!(r.slack <= 1e-18);
    }

    #[test]
    fn regularize_adds_quadratic() {
        let a = DMatrix::from_element(1, 1, 0.0);
        let b = DVector::from_element(1, 0.0);
        let flat = CompositeOracle::elastic_net(&a, &b, 0.0, 0.0).unwrap();
        let r = flat.regularized(2.0).unwrap();
        let (v, g) = evaluate(&r, &ParameterPoint::from_vec(vec![3.0])).unwrap();
        assert_close!(v, 9.0, 1e-15);
        assert_close!(g[0], 6.0, 1e-15);
        assert_eq!(r.mu(), 2.0);
        assert!(flat.regularized(0.0).is_err());
        assert!(flat.regularized(-1.0).is_err());
    }

    #[test]
    fn logistic_at_zero_is_log_k() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let loss = LogisticLoss::new(&x, vec![0, 2, 1], 10).unwrap();
        let o = CompositeOracle::logistic(loss, 1e-2).unwrap();
        let (v, g) = evaluate(&o, &ParameterPoint::zeros(o.dim())).unwrap();
        assert_close!(v, 10f64.ln(), 1e-15);
        // Bias block: uniform softmax minus one-hot, averaged over samples.
        let k = 10;
        let bias = &g.as_slice()[2 * k..];
        for (l, &gb) in bias.iter().enumerate() {
            let hits = [0usize, 2, 1].iter().filter(|&&y| y == l).count() as f64;
            assert_close!(gb, 0.1 - hits / 3.0, 1e-15);
        }
    }

    #[test]
    fn empty_shard_is_a_construction_error() {
        let x = DMatrix::<f64>::zeros(0, 2);
        assert!(matches!(
            LogisticLoss::new(&x, vec![], 3),
            Err(Error::Construction(_))
        ));
    }

    #[test]
    fn non_spd_quadratic_is_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let form = QuadraticForm::new(h, DVector::zeros(2), 0.0).unwrap();
        assert!(matches!(
            CompositeOracle::quadratic(form),
            Err(Error::Construction(_))
        ));
    }
}
