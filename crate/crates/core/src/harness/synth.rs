//! Seeded synthetic problem generators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::oracle::QuadraticForm;

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Haar-ish random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, dim, dim).qr();
    let (q, r) = (qr.q(), qr.r());
    let mut q = q;
    for (i, mut col) in q.column_iter_mut().enumerate() {
        if r[(i, i)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// Spectrum spanning `[mu, mu kappa]` with both ends present and the interior
/// log-uniform.
fn spectrum(rng: &mut ChaCha8Rng, dim: usize, mu: f64, kappa: f64) -> Vec<f64> {
    let mut eig = vec![mu; dim];
    if dim >= 2 {
        eig[dim - 1] = mu * kappa;
        for e in eig.iter_mut().take(dim - 1).skip(1) {
            *e = mu * kappa.powf(rng.random::<f64>());
        }
    }
    eig
}

/// Quadratics `1/2 (x - c_j)^T H_j (x - c_j)` where every `H_j` has extreme
/// eigenvalues exactly `mu` and `mu kappa`, so the family constants are
/// known in closed form. Centers are Gaussian with standard deviation
/// `spread`.
pub fn quadratic_family(
    rng: &mut ChaCha8Rng,
    clients: usize,
    dim: usize,
    mu: f64,
    kappa: f64,
    spread: f64,
) -> Result<Vec<QuadraticForm>> {
    if !(mu > 0.0) || !(kappa >= 1.0) || dim == 0 {
        return Err(Error::Config(format!(
            "quadratic family needs mu > 0, kappa >= 1, dim >= 1 (got {mu}, {kappa}, {dim})"
        )));
    }
    if dim == 1 && kappa > 1.0 {
        return Err(Error::Config("kappa > 1 needs dim >= 2".into()));
    }
    (0..clients)
        .map(|_| {
            let q = random_orthogonal(rng, dim);
            let eig = DVector::from_vec(spectrum(rng, dim, mu, kappa));
            let h = &q * DMatrix::from_diagonal(&eig) * q.transpose();
            let h = (&h + h.transpose()) * 0.5;
            let c = gaussian_vector(rng, dim) * spread;
            let hc = &h * &c;
            let constant = 0.5 * c.dot(&hc);
            QuadraticForm::new(h, hc, constant)
        })
        .collect()
}

/// Sparse regression shards `(A_j, b_j)` with client-specific offsets in the
/// targets so the local minimizers differ.
pub fn regression_shards(
    rng: &mut ChaCha8Rng,
    clients: usize,
    samples: usize,
    dim: usize,
    noise: f64,
    spread: f64,
) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
    if samples == 0 || dim == 0 {
        return Err(Error::Config(
            "regression shards need samples and dim >= 1".into(),
        ));
    }
    let mut truth = gaussian_vector(rng, dim);
    for (i, v) in truth.iter_mut().enumerate() {
        if i % 2 == 1 {
            *v = 0.0;
        }
    }
    Ok((0..clients)
        .map(|_| {
            let a = gaussian_matrix(rng, samples, dim);
            let shift = gaussian_vector(rng, dim) * spread;
            let b = &a * (&truth + shift) + gaussian_vector(rng, samples) * noise;
            (a, b)
        })
        .collect())
}

/// Per-client `(A, b)` blocks.
pub type Shards = Vec<(DMatrix<f64>, DVector<f64>)>;

/// Consistent underdetermined least squares: fewer total rows than unknowns,
/// targets generated from a row-space point of norm `min_norm`, which is
/// therefore the minimum-norm minimizer. Returns the shards and that point.
pub fn underdetermined_least_squares(
    rng: &mut ChaCha8Rng,
    clients: usize,
    samples: usize,
    dim: usize,
    min_norm: f64,
) -> Result<(Shards, DVector<f64>)> {
    let total = clients * samples;
    if total == 0 || total >= dim {
        return Err(Error::Config(format!(
            "underdetermined least squares needs 0 < clients*samples < dim (got {total} rows, dim {dim})"
        )));
    }
    let a = gaussian_matrix(rng, total, dim);
    let w = gaussian_vector(rng, total);
    let x0 = a.transpose() * w;
    let x0 = &x0 * (min_norm / x0.norm());
    let b = &a * &x0;
    let shards = (0..clients)
        .map(|j| {
            let rows = a.rows(j * samples, samples).into_owned();
            let targets = b.rows(j * samples, samples).into_owned();
            (rows, targets)
        })
        .collect();
    Ok((shards, x0))
}

/// Gaussian blobs around random class centers scaled by `separation`; labels
/// cycle through the classes so contiguous shards stay balanced.
pub fn blobs(
    rng: &mut ChaCha8Rng,
    samples: usize,
    features: usize,
    classes: usize,
    separation: f64,
) -> Result<Dataset> {
    if classes < 2 || features == 0 {
        return Err(Error::Config(
            "blobs need at least 2 classes and 1 feature".into(),
        ));
    }
    let centers = gaussian_matrix(rng, classes, features) * separation;
    let labels: Vec<usize> = (0..samples).map(|i| i % classes + 1).collect();
    let mut x = gaussian_matrix(rng, samples, features);
    for (i, &y) in labels.iter().enumerate() {
        for c in 0..features {
            x[(i, c)] += centers[(y - 1, c)];
        }
    }
    Dataset::new(x, labels, classes)
}
