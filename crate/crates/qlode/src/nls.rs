//! Nonlinear least squares baseline: fits ODE parameters and initial values
//! by Levenberg-Marquardt on the trajectory residuals, using the closed-form
//! solution where available and RK4 integration otherwise.

use ndarray::{Array1, Array2};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::OdeModel;
use crate::solvers;

/// How candidate trajectories are produced during the search.
#[derive(Debug, Clone)]
pub enum NlsModel {
    /// Closed-form solution of the first-order example (d = 1, q = 2).
    ClosedFormFirstOrder,
    /// Numerical solution of an arbitrary model.
    Numeric { model: OdeModel, domain: (f64, f64), n_steps: usize },
}

#[derive(Debug, Clone)]
pub struct NlsOptions {
    /// When set, the initial state is held fixed at these values instead of
    /// being estimated.
    pub fix_x0: Option<Vec<f64>>,
    pub max_iter: usize,
}

impl Default for NlsOptions {
    fn default() -> Self {
        Self { fix_x0: None, max_iter: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct NlsFit {
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    pub se_theta: Vec<Option<f64>>,
    pub se_x0: Vec<Option<f64>>,
    /// Residual precision `(n - p) / RSS`.
    pub tau: f64,
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct Problem<'a> {
    model: &'a NlsModel,
    data: &'a Dataset,
    fix_x0: Option<&'a [f64]>,
    q: usize,
    d: usize,
}

impl Problem<'_> {
    fn n_free(&self) -> usize {
        self.q + if self.fix_x0.is_some() { 0 } else { self.d }
    }

    fn split<'p>(&self, p: &'p [f64]) -> (&'p [f64], Vec<f64>) {
        let theta = &p[..self.q];
        let x0 = match self.fix_x0 {
            Some(fixed) => fixed.to_vec(),
            None => p[self.q..].to_vec(),
        };
        (theta, x0)
    }

    /// Residual vector `y - x(t; theta, x0)` over all observed states.
    fn residuals(&self, p: &[f64]) -> Result<Vec<f64>> {
        let (theta, x0) = self.split(p);
        let mut out = Vec::with_capacity(self.data.n_total());
        match self.model {
            NlsModel::ClosedFormFirstOrder => {
                let th: [f64; 2] = [theta[0], theta[1]];
                let tr = solvers::analytic_first_order(self.data.times(0), &th, x0[0])?;
                for (i, &y) in self.data.values(0).iter().enumerate() {
                    out.push(y - tr.state(i, 0));
                }
            }
            NlsModel::Numeric { model, domain, n_steps } => {
                let sol = solvers::rk4_solve(model, theta, &x0, *domain, *n_steps)?;
                for j in 0..self.data.dim() {
                    if self.data.n_obs(j) == 0 {
                        continue;
                    }
                    let tr = sol.sample(self.data.times(j))?;
                    for (i, &y) in self.data.values(j).iter().enumerate() {
                        out.push(y - tr.state(i, j));
                    }
                }
            }
        }
        Ok(out)
    }

    fn jacobian(&self, p: &[f64], base: &[f64]) -> Result<Array2<f64>> {
        let n = base.len();
        let np = p.len();
        let mut jac = Array2::zeros((n, np));
        let mut probe = p.to_vec();
        for k in 0..np {
            let h = 1e-6 * probe[k].abs().max(1e-3);
            probe[k] = p[k] + h;
            let hi = self.residuals(&probe)?;
            probe[k] = p[k];
            for i in 0..n {
                jac[[i, k]] = (hi[i] - base[i]) / h;
            }
        }
        Ok(jac)
    }
}

/// Levenberg-Marquardt minimization of the trajectory residual sum of
/// squares. Standard errors come from the linearized covariance
/// `rss/(n-p) (J'J)^{-1}` at the solution.
pub fn nls_fit(
    model: &NlsModel,
    data: &Dataset,
    init_theta: &[f64],
    init_x0: &[f64],
    opts: &NlsOptions,
) -> Result<NlsFit> {
    let (q, d) = match model {
        NlsModel::ClosedFormFirstOrder => (2usize, 1usize),
        NlsModel::Numeric { model, .. } => (model.n_params(), model.dim()),
    };
    if init_theta.len() != q || init_x0.len() != d {
        return Err(Error::Config("initial parameter dimensions do not match model".into()));
    }
    if !init_theta.iter().chain(init_x0.iter()).all(|v| v.is_finite()) {
        return Err(Error::Config("initial values must be finite".into()));
    }
    let problem = Problem {
        model,
        data,
        fix_x0: opts.fix_x0.as_deref(),
        q,
        d,
    };
    let mut p: Vec<f64> = init_theta.to_vec();
    if problem.fix_x0.is_none() {
        p.extend_from_slice(init_x0);
    }
    let np = problem.n_free();
    let n = data.n_total();
    if n <= np {
        return Err(Error::Domain(format!(
            "need more than {np} observations to fit {np} parameters, got {n}"
        )));
    }

    let mut resid = problem.residuals(&p)?;
    let mut rss: f64 = resid.iter().map(|r| r * r).sum();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0usize;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let jac = problem.jacobian(&p, &resid)?;
        let jtj = jac.t().dot(&jac);
        let jtr = jac.t().dot(&Array1::from_vec(resid.clone()));
        let mut improved = false;
        for _ in 0..12 {
            let mut damped = jtj.clone();
            for i in 0..np {
                damped[[i, i]] += lambda * jtj[[i, i]].max(1e-12);
            }
            let Ok(step) = linalg::solve_spd_refined(&damped, jtr.as_slice().unwrap()) else {
                lambda *= 4.0;
                continue;
            };
            // jac is d(residual)/d(theta), so the descent step is -step.
            let cand: Vec<f64> = p.iter().zip(&step).map(|(v, s)| v - s).collect();
            match problem.residuals(&cand) {
                Ok(r_new) => {
                    let rss_new: f64 = r_new.iter().map(|r| r * r).sum();
                    if rss_new < rss {
                        let rel = (rss - rss_new) / rss.max(1e-300);
                        p = cand;
                        resid = r_new;
                        rss = rss_new;
                        lambda = (lambda / 3.0).max(1e-12);
                        improved = true;
                        if rel < 1e-12 {
                            converged = true;
                        }
                        break;
                    }
                    lambda *= 4.0;
                }
                Err(_) => {
                    // Candidate left the solvable region (pole or blow-up).
                    lambda *= 4.0;
                }
            }
        }
        if converged {
            break;
        }
        if !improved {
            converged = true; // stalled at a (local) minimum
            break;
        }
    }

    // Linearized covariance at the solution.
    let jac = problem.jacobian(&p, &resid)?;
    let jtj = jac.t().dot(&jac);
    let dof = (n - np) as f64;
    let sigma2 = rss / dof;
    let cov = linalg::inverse(&jtj).map(|inv| inv * sigma2);
    let se_at = |k: usize| -> Option<f64> {
        cov.as_ref().and_then(|c| {
            let v = c[[k, k]];
            (v > 0.0).then(|| v.sqrt())
        })
    };
    let se_theta: Vec<Option<f64>> = (0..q).map(se_at).collect();
    let se_x0: Vec<Option<f64>> = if problem.fix_x0.is_some() {
        vec![None; d]
    } else {
        (q..q + d).map(se_at).collect()
    };
    let (theta, x0) = problem.split(&p);
    Ok(NlsFit {
        theta: theta.to_vec(),
        x0,
        se_theta,
        se_x0,
        tau: dof / rss.max(1e-300),
        rss,
        iterations,
        converged,
    })
}
