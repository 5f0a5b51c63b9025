//! Momentum recursion shared by the DualFL server and the dual FISTA loop.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentumState {
    pub t: f64,
    pub rho: f64,
    pub n: usize,
}

impl MomentumState {
    pub fn new(rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self { t: 1.0, rho, n: 0 })
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Domain(format!("rho must lie in [0, 1), got {rho}")));
    }
    Ok(())
}

/// One step of
/// `t+ = (1 - rho t^2 + sqrt((1 - rho t^2)^2 + 4 t^2)) / 2`,
/// `beta = (t - 1)/t+ * (1 - t+ rho)/(1 - rho)`.
pub fn advance(state: MomentumState) -> Result<(MomentumState, f64)> {
    check_rho(state.rho)?;
    let MomentumState { t, rho, n } = state;
    let a = 1.0 - rho * t * t;
    let t_next = 0.5 * (a + (a * a + 4.0 * t * t).sqrt());
    let beta = (t - 1.0) / t_next * (1.0 - t_next * rho) / (1.0 - rho);
    Ok((
        MomentumState {
            t: t_next,
            rho,
            n: n + 1,
        },
        beta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_without_strong_convexity() {
        let (s, beta) = advance(MomentumState::new(0.0).unwrap()).unwrap();
        assert!((s.t - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-15);
        assert_eq!(beta, 0.0);
        assert_eq!(s.n, 1);
    }

    #[test]
    fn second_step_without_strong_convexity() {
        // t2 = (1 + sqrt(1 + 4 t1^2)) / 2, beta1 = (t1 - 1) / t2.
        let t1 = (1.0 + 5f64.sqrt()) / 2.0;
        let t2 = (1.0 + (1.0 + 4.0 * t1 * t1).sqrt()) / 2.0;
        let (s1, _) = advance(MomentumState::new(0.0).unwrap()).unwrap();
        let (s2, beta1) = advance(s1).unwrap();
        assert!((s2.t - t2).abs() < 1e-15);
        assert!((s2.t - 2.193_527_085).abs() < 1e-9);
        assert!((beta1 - (t1 - 1.0) / t2).abs() < 1e-15);
        assert!((beta1 - 0.281_753_525).abs() < 1e-9);
    }

    #[test]
    fn first_step_with_rho() {
        let (s, beta) = advance(MomentumState::new(0.01).unwrap()).unwrap();
        assert!((s.t - (0.99 + 4.9801f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((s.t - 1.610_807).abs() < 1e-6);
        assert_eq!(beta, 0.0);
    }

    #[test]
    fn rho_outside_unit_interval_is_rejected() {
        for rho in [1.0, 1.5, -0.1, f64::NAN] {
            assert!(MomentumState::new(rho).is_err());
            let s = MomentumState { t: 1.0, rho, n: 0 };
            assert!(advance(s).is_err());
        }
    }

    #[test]
    fn inverse_sqrt_rho_is_a_fixed_point() {
        for rho in [1e-4, 0.01, 0.25, 0.9] {
            let t = 1.0 / f64::sqrt(rho);
            let (s, _) = advance(MomentumState { t, rho, n: 7 }).unwrap();
            assert!((s.t - t).abs() <= 4.0 * f64::EPSILON * t, "rho {rho}");
        }
    }
}
