//! Standard difference-penalized spline smoothing, used to initialize the
//! spline coefficients from the raw measurements.
//!
//! The smoothing parameter is chosen by the same variance-ratio (Schall)
//! iteration the main estimator uses for its compliance parameter.

use ndarray::{Array1, Array2};

use crate::bspline::BSplineBasis;
use crate::error::{Error, Result};
use crate::linalg;

/// Second-order difference penalty matrix `D2' D2` for `k` coefficients.
fn second_difference_penalty(k: usize) -> Array2<f64> {
    let mut p = Array2::zeros((k, k));
    if k < 3 {
        return p;
    }
    for i in 0..k - 2 {
        let row = [(i, 1.0), (i + 1, -2.0), (i + 2, 1.0)];
        for &(a, ca) in &row {
            for &(b, cb) in &row {
                p[[a, b]] += ca * cb;
            }
        }
    }
    p
}

/// Result of a univariate P-spline smooth.
#[derive(Debug, Clone)]
pub struct Smooth {
    pub coefficients: Array1<f64>,
    pub lambda: f64,
    pub effective_dimension: f64,
    pub residual_sum_of_squares: f64,
    /// Residual-based precision estimate `(n - ED) / RSS`.
    pub tau: f64,
}

/// Smooths `(times, values)` with a difference-penalized spline on `basis`,
/// selecting the smoothing parameter by Schall iteration.
pub fn smooth(basis: &BSplineBasis, times: &[f64], values: &[f64]) -> Result<Smooth> {
    if times.len() != values.len() {
        return Err(Error::Config("times and values must have equal length".into()));
    }
    let n = times.len();
    if n == 0 {
        return Err(Error::Config("cannot smooth an empty series".into()));
    }
    let k = basis.len();
    let design = basis.design_matrix(times, 0)?;
    let btb = design.t().dot(&design);
    let y = Array1::from_vec(values.to_vec());
    let bty = design.t().dot(&y);
    let penalty = second_difference_penalty(k);
    let scale = btb.diag().iter().cloned().fold(0.0f64, f64::max).max(1.0);

    let mut lambda = 1.0f64;
    let mut coef = Array1::zeros(k);
    let mut ed = 0.0;
    let mut rss = 0.0;
    for _ in 0..60 {
        let mut m = &btb + &(lambda * &penalty);
        // Small ridge keeps the system solvable when n << k and the data
        // cannot pin every penalty-nullspace direction.
        for i in 0..k {
            m[[i, i]] += 1e-11 * scale;
        }
        let factor = linalg::SpdFactor::new(&m)?;
        coef = Array1::from_vec(factor.solve_vec(bty.as_slice().unwrap()));
        let smoother = factor.solve_mat(&btb);
        ed = smoother.diag().sum();
        let fitted = design.dot(&coef);
        rss = (&y - &fitted).iter().map(|r| r * r).sum::<f64>();
        let pen_value = coef.dot(&penalty.dot(&coef));
        let sigma2 = rss / (n as f64 - ed).max(0.5);
        // Penalty nullspace is two-dimensional (linear trends).
        let sigma2_b = (pen_value / (ed - 2.0).max(0.5)).max(1e-300);
        let new_lambda = (sigma2 / sigma2_b).clamp(1e-10, 1e12);
        let rel = ((new_lambda - lambda) / lambda).abs();
        lambda = new_lambda;
        if rel < 1e-3 {
            break;
        }
    }
    let tau = if rss > 0.0 {
        ((n as f64 - ed).max(0.5) / rss).min(1e12)
    } else {
        1e12
    };
    Ok(Smooth {
        coefficients: coef,
        lambda,
        effective_dimension: ed,
        residual_sum_of_squares: rss,
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn recovers_smooth_signal() {
        let basis = BSplineBasis::new((0.0, 2.0), 20, 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 200;
        let times: Vec<f64> = {
            let mut t: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0).collect();
            t.sort_by(|a, b| a.partial_cmp(b).unwrap());
            t
        };
        let truth: Vec<f64> = times.iter().map(|t| (2.0 * t).sin()).collect();
        let noisy: Vec<f64> = truth
            .iter()
            .map(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let fit = smooth(&basis, &times, &noisy).unwrap();
        let mut worst = 0.0f64;
        for (i, &t) in times.iter().enumerate() {
            let v = basis.value(fit.coefficients.as_slice().unwrap(), t, 0).unwrap();
            worst = worst.max((v - truth[i]).abs());
        }
        assert!(worst < 0.1, "worst deviation {worst}");
        // Precision estimate should be near 1/0.05^2 = 400.
        assert!(fit.tau > 150.0 && fit.tau < 1000.0, "tau {}", fit.tau);
    }

    #[test]
    fn handles_fewer_observations_than_coefficients() {
        let basis = BSplineBasis::new((0.0, 20.0), 200, 4).unwrap();
        let times: Vec<f64> = (0..21).map(|i| i as f64).collect();
        let values: Vec<f64> = times.iter().map(|t| 30.0 + 10.0 * (0.6 * t).sin()).collect();
        let fit = smooth(&basis, &times, &values).unwrap();
        for (&t, &v) in times.iter().zip(&values) {
            let s = basis.value(fit.coefficients.as_slice().unwrap(), t, 0).unwrap();
            assert!((s - v).abs() < 2.0, "t {t}: {s} vs {v}");
        }
    }
}
