//! Reference solvers: the closed-form solution of the first-order example
//! and a fixed-step classical Runge-Kutta integrator with dense output.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::OdeModel;

/// Sampled states of an ODE solution.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `times.len() x d` state matrix.
    pub states: Array2<f64>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn state(&self, i: usize, j: usize) -> f64 {
        self.states[[i, j]]
    }
}

/// Closed-form solution `x(t) = 1 / (theta2 t^2 - theta1 t + 1/x0)` of the
/// first-order example, evaluated at the given times.
pub fn analytic_first_order(times: &[f64], theta: &[f64; 2], x0: f64) -> Result<Trajectory> {
    if x0 == 0.0 {
        return Err(Error::Domain("initial value must be nonzero".into()));
    }
    let (th1, th2) = (theta[0], theta[1]);
    let c = 1.0 / x0;
    if let (Some(&lo), Some(&hi)) = (
        times.iter().min_by(|a, b| a.partial_cmp(b).unwrap()),
        times.iter().max_by(|a, b| a.partial_cmp(b).unwrap()),
    ) {
        for root in denominator_roots(th1, th2, c) {
            if root >= lo && root <= hi {
                return Err(Error::Domain(format!(
                    "closed-form solution has a pole at t = {root} inside the requested range"
                )));
            }
        }
    }
    let mut states = Array2::zeros((times.len(), 1));
    for (i, &t) in times.iter().enumerate() {
        states[[i, 0]] = 1.0 / (th2 * t * t - th1 * t + c);
    }
    Ok(Trajectory { times: times.to_vec(), states })
}

fn denominator_roots(th1: f64, th2: f64, c: f64) -> Vec<f64> {
    if th2 == 0.0 {
        if th1 == 0.0 {
            return Vec::new();
        }
        return vec![c / th1];
    }
    let disc = th1 * th1 - 4.0 * th2 * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let s = disc.sqrt();
    vec![(th1 - s) / (2.0 * th2), (th1 + s) / (2.0 * th2)]
}

/// Grid solution of a model by classical fourth-order Runge-Kutta with
/// dense output between steps.
#[derive(Debug, Clone)]
pub struct Rk4Solution {
    model: OdeModel,
    theta: Vec<f64>,
    t0: f64,
    h: f64,
    /// `(n_steps + 1) x d` grid states.
    grid: Array2<f64>,
    /// `f` evaluated at every grid point.
    derivs: Array2<f64>,
}

/// Integrates `model` from `x0` over `domain` with `n_steps` uniform RK4
/// steps. Fails with the last valid time if the state blows up.
pub fn rk4_solve(
    model: &OdeModel,
    theta: &[f64],
    x0: &[f64],
    domain: (f64, f64),
    n_steps: usize,
) -> Result<Rk4Solution> {
    let (t0, t1) = domain;
    if n_steps == 0 {
        return Err(Error::Config("need at least one integration step".into()));
    }
    if t1 <= t0 {
        return Err(Error::Config(format!("invalid integration domain [{t0}, {t1}]")));
    }
    let d = model.dim();
    if x0.len() != d {
        return Err(Error::Config(format!(
            "initial state length {} does not match dimension {d}",
            x0.len()
        )));
    }
    let h = (t1 - t0) / n_steps as f64;
    let mut grid = Array2::zeros((n_steps + 1, d));
    let mut derivs = Array2::zeros((n_steps + 1, d));
    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];

    model.f_into(t0, &x, theta, &mut k1)?;
    for j in 0..d {
        grid[[0, j]] = x[j];
        derivs[[0, j]] = k1[j];
    }
    for step in 0..n_steps {
        let t = t0 + h * step as f64;
        model.f_into(t, &x, theta, &mut k1)?;
        for j in 0..d {
            tmp[j] = x[j] + 0.5 * h * k1[j];
        }
        model.f_into(t + 0.5 * h, &tmp, theta, &mut k2)?;
        for j in 0..d {
            tmp[j] = x[j] + 0.5 * h * k2[j];
        }
        model.f_into(t + 0.5 * h, &tmp, theta, &mut k3)?;
        for j in 0..d {
            tmp[j] = x[j] + h * k3[j];
        }
        model.f_into(t + h, &tmp, theta, &mut k4)?;
        for j in 0..d {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "trajectory blew up after t = {}",
                t + h
            )));
        }
        let t_next = t0 + h * (step + 1) as f64;
        model.f_into(t_next, &x, theta, &mut k1)?;
        for j in 0..d {
            grid[[step + 1, j]] = x[j];
            derivs[[step + 1, j]] = k1[j];
        }
    }
    Ok(Rk4Solution { model: model.clone(), theta: theta.to_vec(), t0, h, grid, derivs })
}

impl Rk4Solution {
    pub fn grid_times(&self) -> Vec<f64> {
        (0..self.grid.nrows()).map(|i| self.t0 + self.h * i as f64).collect()
    }

    /// One RK4 step of size h/2 from `(ta, ya)`.
    fn half_step(&self, ta: f64, ya: &[f64]) -> Result<Vec<f64>> {
        let d = ya.len();
        let hh = 0.5 * self.h;
        let mut k1 = vec![0.0; d];
        let mut k2 = vec![0.0; d];
        let mut k3 = vec![0.0; d];
        let mut k4 = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        self.model.f_into(ta, ya, &self.theta, &mut k1)?;
        for j in 0..d {
            tmp[j] = ya[j] + 0.5 * hh * k1[j];
        }
        self.model.f_into(ta + 0.5 * hh, &tmp, &self.theta, &mut k2)?;
        for j in 0..d {
            tmp[j] = ya[j] + 0.5 * hh * k2[j];
        }
        self.model.f_into(ta + 0.5 * hh, &tmp, &self.theta, &mut k3)?;
        for j in 0..d {
            tmp[j] = ya[j] + hh * k3[j];
        }
        self.model.f_into(ta + hh, &tmp, &self.theta, &mut k4)?;
        let mut out = vec![0.0; d];
        for j in 0..d {
            out[j] = ya[j] + hh / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        Ok(out)
    }

    pub fn grid_states(&self) -> &Array2<f64> {
        &self.grid
    }

    /// State at an arbitrary time inside the integration interval, via
    /// quartic Hermite interpolation on the enclosing step (endpoint values
    /// and slopes plus a midpoint value).
    pub fn at(&self, t: f64) -> Result<Vec<f64>> {
        let n = self.grid.nrows() - 1;
        let t1 = self.t0 + self.h * n as f64;
        let span = t1 - self.t0;
        if t < self.t0 - 1e-10 * span || t > t1 + 1e-10 * span {
            return Err(Error::Domain(format!(
                "time {t} outside integration interval [{}, {t1}]",
                self.t0
            )));
        }
        let t = t.clamp(self.t0, t1);
        let step = (((t - self.t0) / self.h).floor() as usize).min(n - 1);
        let ta = self.t0 + self.h * step as f64;
        let s = (t - ta) / self.h;
        let d = self.grid.ncols();
        // Midpoint value from one RK4 half-step (local error O(h^5)), which
        // gives the quartic a fifth interpolation condition of full order.
        let ya_row: Vec<f64> = (0..d).map(|j| self.grid[[step, j]]).collect();
        let mid = self.half_step(ta, &ya_row)?;
        let mut out = vec![0.0; d];
        for j in 0..d {
            let ya = self.grid[[step, j]];
            let yb = self.grid[[step + 1, j]];
            let hfa = self.h * self.derivs[[step, j]];
            let hfb = self.h * self.derivs[[step + 1, j]];
            // Quartic through (0, ya), (1, yb), slopes hfa/hfb, value mid at 1/2.
            let a = yb - ya - hfa;
            let b = hfb - hfa;
            let c = mid[j] - ya - 0.5 * hfa;
            let a4 = 2.0 * b + 16.0 * c - 8.0 * a;
            let a3 = -3.0 * b + 14.0 * a - 32.0 * c;
            let a2 = b + 16.0 * c - 5.0 * a;
            out[j] = ya + s * (hfa + s * (a2 + s * (a3 + s * a4)));
        }
        Ok(out)
    }

    /// Samples the dense solution at the requested times.
    pub fn sample(&self, times: &[f64]) -> Result<Trajectory> {
        let d = self.grid.ncols();
        let mut states = Array2::zeros((times.len(), d));
        for (i, &t) in times.iter().enumerate() {
            let x = self.at(t)?;
            for j in 0..d {
                states[[i, j]] = x[j];
            }
        }
        Ok(Trajectory { times: times.to_vec(), states })
    }
}

/// Default step counts used by the bundled experiments: chosen so that the
/// integration error is negligible against observation noise.
pub fn default_steps(domain: (f64, f64)) -> usize {
    let span = domain.1 - domain.0;
    if span <= 2.0 {
        2000
    } else {
        10000
    }
}
