//! Empirical convergence-rate fits over a window of rounds.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    /// `exp(slope)` of a least-squares line through `(n, ln e_n)`.
    pub linear_factor: f64,
    /// `max_n n^2 e_n / (n_0^2 e_{n_0})` over the window.
    pub sublinear_sup: f64,
}

/// Fits `errors[i]` observed at rounds `rounds[i]`.
pub fn rate_fit(rounds: &[usize], errors: &[f64]) -> Result<RateFit> {
    if rounds.len() != errors.len() {
        return Err(Error::Fit("rounds and errors differ in length".into()));
    }
    if errors.len() < 5 {
        return Err(Error::Fit(format!(
            "window has {} points, need 5",
            errors.len()
        )));
    }
    if let Some(bad) = errors.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
        return Err(Error::Fit(format!("nonpositive or non-finite error {bad}")));
    }
    if rounds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Fit("rounds must increase".into()));
    }
    let m = errors.len() as f64;
    let xs: Vec<f64> = rounds.iter().map(|&n| n as f64).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let n0 = xs[0];
    let base = n0 * n0 * errors[0];
    let sup = xs
        .iter()
        .zip(errors)
        .map(|(n, e)| n * n * e / base)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(RateFit {
        linear_factor: slope.exp(),
        sublinear_sup: sup,
    })
}

/// Rounds `lo..=hi` of a series indexed from round 1.
pub fn window(series: &[f64], lo: usize, hi: usize) -> (Vec<usize>, Vec<f64>) {
    let hi = hi.min(series.len());
    let rounds: Vec<usize> = (lo.max(1)..=hi).collect();
    let errors = rounds.iter().map(|&n| series[n - 1]).collect();
    (rounds, errors)
}
