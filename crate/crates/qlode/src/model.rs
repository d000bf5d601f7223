//! ODE system definitions: right-hand side, analytic state Jacobian,
//! parameter layout and the set of observed states.
//!
//! Models carry analytic Jacobians; `validate_jacobian` cross-checks them
//! against finite differences on seeded random points.

use std::fmt;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

type SystemFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) -> Result<()> + Send + Sync;

/// A `d`-dimensional first-order ODE system `dx/dt = f(t, x, theta)`.
#[derive(Clone)]
pub struct OdeModel {
    name: String,
    dim: usize,
    n_params: usize,
    param_names: Vec<String>,
    observed: Vec<usize>,
    /// Parameter values used as the center of randomized validation boxes.
    typical_theta: Vec<f64>,
    rhs: Arc<SystemFn>,
    jac: Arc<SystemFn>,
}

impl fmt::Debug for OdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("n_params", &self.n_params)
            .field("observed", &self.observed)
            .finish()
    }
}

impl OdeModel {
    /// Builds a model from closures. `rhs` writes `f(t,x,theta)` into a
    /// `dim`-slice; `jac` writes the row-major `dim x dim` state Jacobian
    /// with entry `(j,k) = df_j/dx_k`.
    pub fn from_fns(
        name: impl Into<String>,
        dim: usize,
        param_names: Vec<String>,
        observed: Vec<usize>,
        typical_theta: Vec<f64>,
        rhs: impl Fn(f64, &[f64], &[f64], &mut [f64]) -> Result<()> + Send + Sync + 'static,
        jac: impl Fn(f64, &[f64], &[f64], &mut [f64]) -> Result<()> + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("model dimension must be positive".into()));
        }
        if observed.is_empty() {
            return Err(Error::Config("at least one state must be observed".into()));
        }
        if observed.iter().any(|&j| j >= dim) {
            return Err(Error::Config(format!(
                "observed state index out of range for dimension {dim}"
            )));
        }
        let n_params = param_names.len();
        if typical_theta.len() != n_params {
            return Err(Error::Config(
                "typical parameter vector length does not match parameter names".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            dim,
            n_params,
            param_names,
            observed,
            typical_theta,
            rhs: Arc::new(rhs),
            jac: Arc::new(jac),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    /// 0-based indices of observed states.
    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn is_observed(&self, state: usize) -> bool {
        self.observed.contains(&state)
    }

    pub fn typical_theta(&self) -> &[f64] {
        &self.typical_theta
    }

    /// Replaces the observed-state set (0-based indices).
    pub fn with_observed(mut self, observed: Vec<usize>) -> Result<Self> {
        if observed.is_empty() || observed.iter().any(|&j| j >= self.dim) {
            return Err(Error::Config("invalid observed-state set".into()));
        }
        let mut obs = observed;
        obs.sort_unstable();
        obs.dedup();
        self.observed = obs;
        Ok(self)
    }

    fn check_args(&self, x: &[f64], theta: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Config(format!(
                "state vector length {} does not match dimension {}",
                x.len(),
                self.dim
            )));
        }
        if theta.len() != self.n_params {
            return Err(Error::Config(format!(
                "parameter vector length {} does not match {} parameters",
                theta.len(),
                self.n_params
            )));
        }
        Ok(())
    }

    /// Evaluates `f(t, x, theta)` into `out`.
    pub fn f_into(&self, t: f64, x: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_args(x, theta)?;
        (self.rhs)(t, x, theta, out)
    }

    pub fn f(&self, t: f64, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.f_into(t, x, theta, &mut out)?;
        Ok(out)
    }

    /// Evaluates the state Jacobian (row-major `dim x dim`) into `out`.
    pub fn jac_into(&self, t: f64, x: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_args(x, theta)?;
        (self.jac)(t, x, theta, out)
    }

    pub fn jac_x(&self, t: f64, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.jac_into(t, x, theta, &mut out)?;
        Ok(out)
    }
}

/// A prescribed state value `x_{state}(t0) = value` (initial or boundary
/// condition).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateCondition {
    pub t0: f64,
    /// 0-based state index.
    pub state: usize,
    pub value: f64,
}

/// First-order example: `dx/dt = (theta1 - 2 theta2 t) x^2`.
pub fn first_order() -> OdeModel {
    OdeModel::from_fns(
        "first-order",
        1,
        vec!["theta1".into(), "theta2".into()],
        vec![0],
        vec![1.0, 1.0],
        |t, x, th, out| {
            out[0] = (th[0] - 2.0 * th[1] * t) * x[0] * x[0];
            Ok(())
        },
        |t, x, th, out| {
            out[0] = 2.0 * (th[0] - 2.0 * th[1] * t) * x[0];
            Ok(())
        },
    )
    .expect("static model definition")
}

/// Van der Pol oscillator with a single parameter; the second state is
/// unobserved by default.
pub fn van_der_pol() -> OdeModel {
    OdeModel::from_fns(
        "van-der-pol",
        2,
        vec!["theta".into()],
        vec![0],
        vec![1.0],
        |_t, x, th, out| {
            let theta = th[0];
            if theta == 0.0 {
                return Err(Error::Numeric(
                    "singular parameter theta = 0 in Van der Pol system".into(),
                ));
            }
            out[0] = theta * (x[0] - x[0] * x[0] * x[0] / 3.0 - x[1]);
            out[1] = x[0] / theta;
            Ok(())
        },
        |_t, x, th, out| {
            let theta = th[0];
            if theta == 0.0 {
                return Err(Error::Numeric(
                    "singular parameter theta = 0 in Van der Pol system".into(),
                ));
            }
            out[0] = theta * (1.0 - x[0] * x[0]);
            out[1] = -theta;
            out[2] = 1.0 / theta;
            out[3] = 0.0;
            Ok(())
        },
    )
    .expect("static model definition")
}

/// Two coupled Van der Pol oscillators modeling the SA/AV heart nodes.
/// States 2 and 4 (the signal derivatives) are observed.
/// Parameters: `(kappa, w1, w2, b1, b2, c1, c2)`.
pub fn coupled_van_der_pol() -> OdeModel {
    OdeModel::from_fns(
        "coupled-van-der-pol",
        4,
        vec![
            "kappa".into(),
            "w1".into(),
            "w2".into(),
            "b1".into(),
            "b2".into(),
            "c1".into(),
            "c2".into(),
        ],
        vec![1, 3],
        vec![-1.8, -0.2, 2.0, 1.5, 0.1, 0.0, 0.55],
        |_t, x, th, out| {
            let (kappa, w1, w2, b1, b2, c1, c2) = (th[0], th[1], th[2], th[3], th[4], th[5], th[6]);
            out[0] = x[1];
            out[1] = kappa * (x[0] - w1) * (x[0] - w2) * x[1] - b1 * x[0] + c1 * (x[2] - x[0]);
            out[2] = x[3];
            out[3] = kappa * (x[2] - w1) * (x[2] - w2) * x[3] - b2 * x[2] + c2 * (x[0] - x[2]);
            Ok(())
        },
        |_t, x, th, out| {
            let (kappa, w1, w2, b1, b2, c1, c2) = (th[0], th[1], th[2], th[3], th[4], th[5], th[6]);
            out.fill(0.0);
            // row 0: d x2 / dx
            out[1] = 1.0;
            // row 1
            out[4] = kappa * (2.0 * x[0] - w1 - w2) * x[1] - b1 - c1;
            out[5] = kappa * (x[0] - w1) * (x[0] - w2);
            out[6] = c1;
            // row 2
            out[11] = 1.0;
            // row 3
            out[12] = c2;
            out[14] = kappa * (2.0 * x[2] - w1 - w2) * x[3] - b2 - c2;
            out[15] = kappa * (x[2] - w1) * (x[2] - w2);
            Ok(())
        },
    )
    .expect("static model definition")
}

/// Lotka-Volterra predator-prey system with parameters `(beta, zeta, delta,
/// eta)`; both states observed.
pub fn lotka_volterra() -> OdeModel {
    OdeModel::from_fns(
        "lotka-volterra",
        2,
        vec!["beta".into(), "zeta".into(), "delta".into(), "eta".into()],
        vec![0, 1],
        vec![0.481, 0.025, 0.927, 0.028],
        |_t, x, th, out| {
            let (beta, zeta, delta, eta) = (th[0], th[1], th[2], th[3]);
            out[0] = x[0] * (beta - zeta * x[1]);
            out[1] = -x[1] * (delta - eta * x[0]);
            Ok(())
        },
        |_t, x, th, out| {
            let (beta, zeta, delta, eta) = (th[0], th[1], th[2], th[3]);
            out[0] = beta - zeta * x[1];
            out[1] = -zeta * x[0];
            out[2] = eta * x[1];
            out[3] = -delta + eta * x[0];
            Ok(())
        },
    )
    .expect("static model definition")
}

/// Worst finite-difference discrepancy found while validating a model's
/// analytic Jacobian.
#[derive(Debug, Clone, Copy)]
pub struct JacobianReport {
    pub max_abs_diff: f64,
    pub at_time: f64,
    pub row: usize,
    pub col: usize,
}

/// Compares the analytic Jacobian against central finite differences of `f`
/// on `samples` seeded random points with `x` in `[-3, 3]^d` and `theta` in
/// a +-50% box around the model's typical parameters.
pub fn validate_jacobian(model: &OdeModel, samples: usize, seed: u64) -> Result<JacobianReport> {
    if samples == 0 {
        return Err(Error::Config("need at least one validation sample".into()));
    }
    let d = model.dim();
    let q = model.n_params();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut report = JacobianReport { max_abs_diff: 0.0, at_time: 0.0, row: 0, col: 0 };
    let mut x = vec![0.0; d];
    let mut theta = vec![0.0; q];
    let mut jac = vec![0.0; d * d];
    let mut f_hi = vec![0.0; d];
    let mut f_lo = vec![0.0; d];
    let mut done = 0usize;
    let mut attempts = 0usize;
    while done < samples {
        attempts += 1;
        if attempts > samples * 20 {
            return Err(Error::Numeric(
                "could not draw enough nonsingular validation points".into(),
            ));
        }
        let t = rng.random::<f64>() * 2.0;
        for xi in x.iter_mut() {
            *xi = rng.random::<f64>() * 6.0 - 3.0;
        }
        for (k, th) in theta.iter_mut().enumerate() {
            let center = model.typical_theta()[k];
            *th = center + center * (rng.random::<f64>() - 0.5);
        }
        if model.jac_into(t, &x, &theta, &mut jac).is_err() {
            continue; // singular parameter draw; resample
        }
        for k in 0..d {
            let orig = x[k];
            x[k] = orig + h;
            model.f_into(t, &x, &theta, &mut f_hi)?;
            x[k] = orig - h;
            model.f_into(t, &x, &theta, &mut f_lo)?;
            x[k] = orig;
            for j in 0..d {
                let fd = (f_hi[j] - f_lo[j]) / (2.0 * h);
                let diff = (jac[j * d + k] - fd).abs();
                if diff > report.max_abs_diff {
                    report = JacobianReport { max_abs_diff: diff, at_time: t, row: j, col: k };
                }
            }
        }
        done += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn first_order_values() {
        let m = first_order();
        assert_eq!(m.f(0.0, &[1.0], &[1.0, 1.0]).unwrap(), vec![1.0]);
        assert_eq!(m.jac_x(0.0, &[1.0], &[1.0, 1.0]).unwrap(), vec![2.0]);
        assert_eq!(m.f(0.5, &[2.0], &[1.0, 1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn van_der_pol_values() {
        let m = van_der_pol();
        let f = m.f(0.0, &[1.0, 1.0], &[1.0]).unwrap();
        assert_abs_diff_eq!(f[0], -1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], 1.0, epsilon = 1e-15);
        let j = m.jac_x(0.3, &[0.0, 0.0], &[2.0]).unwrap();
        assert_eq!(j, vec![2.0, -2.0, 0.5, 0.0]);
        assert_eq!(m.observed(), &[0]);
    }

    #[test]
    fn van_der_pol_rejects_zero_theta() {
        let m = van_der_pol();
        assert!(m.f(0.0, &[1.0, 1.0], &[0.0]).is_err());
        assert!(m.jac_x(0.0, &[1.0, 1.0], &[0.0]).is_err());
    }

    /// The linearized right-hand side evaluated at the expansion point must
    /// reproduce f exactly (tangency of the first-order expansion).
    #[test]
    fn van_der_pol_linearization_is_tangent() {
        let m = van_der_pol();
        let theta = [1.3];
        for &(x1, x2) in &[(0.7, -0.4), (1.0, 1.0), (-2.0, 0.5)] {
            let x = [x1, x2];
            let f = m.f(0.0, &x, &theta).unwrap();
            let lin = theta[0] * (1.0 - x1 * x1) * x1 - theta[0] * x2
                + 2.0 * theta[0] / 3.0 * x1 * x1 * x1;
            assert_abs_diff_eq!(f[0], lin, epsilon = 1e-12);
        }
    }

    #[test]
    fn coupled_vdp_structure() {
        let m = coupled_van_der_pol();
        let theta = [-1.8, -0.2, 2.0, 1.5, 0.1, 0.0, 0.55];
        let x = [1.0, 1.0, 0.5, -0.2];
        let f = m.f(0.0, &x, &theta).unwrap();
        assert_eq!(f[0], x[1]);
        assert_eq!(f[2], x[3]);
        // With c1 = c2 = 0 the pairs decouple.
        let theta0 = [-1.8, -0.2, 2.0, 1.5, 0.1, 0.0, 0.0];
        let j = m.jac_x(0.0, &x, &theta0).unwrap();
        assert_eq!(j[1 * 4 + 2], 0.0);
        assert_eq!(j[3 * 4 + 0], 0.0);
        // Hand-computed entry (row 2, col 1 in 1-based terms).
        let j = m.jac_x(0.0, &[1.0, 1.0, 0.0, 0.0], &theta).unwrap();
        assert_abs_diff_eq!(j[1 * 4 + 0], -1.86, epsilon = 1e-12);
        assert_eq!(m.observed(), &[1, 3]);
    }

    #[test]
    fn lotka_volterra_values() {
        let m = lotka_volterra();
        let theta = [0.481, 0.025, 0.927, 0.028];
        // Equilibrium point (delta/eta, beta/zeta).
        let eq = [theta[2] / theta[3], theta[0] / theta[1]];
        let f = m.f(0.0, &eq, &theta).unwrap();
        assert_abs_diff_eq!(f[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f[1], 0.0, epsilon = 1e-12);
        // Arithmetic check at the 1900 lynx-hare observation.
        let f = m.f(0.0, &[30.0, 4.0], &theta).unwrap();
        assert_abs_diff_eq!(f[0], 11.43, epsilon = 1e-12);
        assert_abs_diff_eq!(f[1], -0.348, epsilon = 1e-12);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        for model in [first_order(), van_der_pol(), coupled_van_der_pol(), lotka_volterra()] {
            let report = validate_jacobian(&model, 100, 1234).unwrap();
            assert!(
                report.max_abs_diff < 1e-5,
                "{}: worst diff {} at ({}, {})",
                model.name(),
                report.max_abs_diff,
                report.row,
                report.col
            );
        }
    }

    #[test]
    fn zero_samples_is_an_error() {
        assert!(validate_jacobian(&first_order(), 0, 1).is_err());
    }
}
