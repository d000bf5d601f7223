//! The quasilinearized estimation loop.
//!
//! Each outer iteration (i) linearizes the ODE penalty at the current spline
//! coefficients, (ii) solves the conditionally linear coefficient update,
//! (iii) re-estimates the measurement precision from the effective dimension,
//! (iv) re-estimates the ODE-compliance parameter by a variance ratio, and
//! (v) updates the ODE parameters by a derivative-free search (with a
//! Gauss-Newton polish) over the profiled data criterion. Convergence is
//! declared when the largest relative change across the coefficient,
//! compliance, ODE-parameter and precision blocks drops below tolerance.

use ndarray::{Array1, Array2};

use crate::bspline::BSplineBasis;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor};
use crate::model::{OdeModel, StateCondition};
use crate::penalty::{self, LinearizationPoint, PenaltyAssembly};
use crate::pspline;
use crate::quadrature::QuadratureRule;
use crate::simplex::{self, SimplexOptions};

/// Caps applied when a precision or compliance update degenerates (perfect
/// fit or vanishing penalty).
const PRECISION_CAP: f64 = 1e12;
const COMPLIANCE_CAP: f64 = 1e12;

/// Strategy for the initial spline coefficients.
#[derive(Debug, Clone)]
pub enum AlphaInit {
    /// Difference-penalized spline smooth of the raw data per observed state.
    Psmooth,
    /// Constant state functions (observed states start at their data mean).
    Constant,
    /// Explicit full coefficient vector.
    Given(Array1<f64>),
}

/// Initialization of coefficients for unobserved states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnobservedInit {
    Zero,
    /// Deduce unobserved states from the smoothed observed ones through the
    /// model structure: inversion of the first equation for the Van der Pol
    /// system, running integrals of the observed derivative states for the
    /// coupled oscillator system.
    OdeInversion,
}

/// Compliance-parameter update mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaMode {
    /// Variance-ratio update; `per_equation` splits the update by equation
    /// instead of pooling penalty and effective dimension.
    Schall { per_equation: bool },
    /// Keep the initial compliance parameters throughout.
    Fixed,
}

/// Precision update granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauMode {
    Pooled,
    PerState,
}

/// How state conditions are imposed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstraintMode {
    Unconstrained,
    /// Quadratic penalty `kappa/2 ||S alpha - s||^2`.
    Soft { kappa: f64 },
    /// Exact enforcement through Lagrange multipliers.
    Lagrange,
}

/// Options for the ODE-parameter search in step (e).
#[derive(Debug, Clone, Copy)]
pub struct ThetaSearch {
    /// Simplex evaluation budget per outer iteration (0 = automatic).
    pub max_evals: usize,
    /// Simplex diameter below which the search stops.
    pub diameter_tol: f64,
    /// Initial simplex step relative to the parameter magnitude.
    pub initial_step_rel: f64,
    /// Lower bound on the initial simplex step.
    pub min_step: f64,
    /// Run a Gauss-Newton polish after the simplex search.
    pub gauss_newton_polish: bool,
}

impl Default for ThetaSearch {
    fn default() -> Self {
        Self {
            max_evals: 0,
            diameter_tol: 1e-6,
            initial_step_rel: 0.05,
            min_step: 0.01,
            gauss_newton_polish: true,
        }
    }
}

/// Full configuration of one fit.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub bases: Vec<BSplineBasis>,
    pub init_alpha: AlphaInit,
    pub unobserved_init: UnobservedInit,
    pub init_theta: Vec<f64>,
    /// Initial precision; derived from the initialization smooth when absent.
    pub init_tau: Option<f64>,
    /// Initial compliance parameter per equation.
    pub init_gamma: Vec<f64>,
    pub gamma_mode: GammaMode,
    pub tau_mode: TauMode,
    pub constraint_mode: ConstraintMode,
    pub conditions: Vec<StateCondition>,
    pub convergence_tol: f64,
    pub max_iter: usize,
    /// Quadrature points per inter-knot span.
    pub per_span: usize,
    /// Hold the compliance parameters at their initial values for this many
    /// iterations before Schall updates begin, so the linearization point can
    /// settle first. Ignored in fixed mode.
    pub gamma_warmup: usize,
    pub theta_search: ThetaSearch,
}

impl FitConfig {
    pub fn new(bases: Vec<BSplineBasis>, init_theta: Vec<f64>) -> Self {
        let d = bases.len();
        Self {
            bases,
            init_alpha: AlphaInit::Psmooth,
            unobserved_init: UnobservedInit::Zero,
            init_theta,
            init_tau: None,
            init_gamma: vec![1e4; d],
            gamma_mode: GammaMode::Schall { per_equation: false },
            tau_mode: TauMode::Pooled,
            constraint_mode: ConstraintMode::Unconstrained,
            conditions: Vec::new(),
            convergence_tol: 1e-4,
            max_iter: 200,
            per_span: 5,
            gamma_warmup: 0,
            theta_search: ThetaSearch::default(),
        }
    }
}

/// One iterate of the outer loop.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub alpha: Array1<f64>,
    pub theta: Vec<f64>,
    /// Precision per observed state, parallel to the dataset's observed set.
    pub tau: Vec<f64>,
    /// Compliance per equation.
    pub gamma: Vec<f64>,
    pub ed: f64,
    pub iteration: usize,
}

/// Per-iteration diagnostics recorded in the fit trace.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub tau: Vec<f64>,
    pub effective_dimension: f64,
    pub penalty_value: f64,
    pub rss: f64,
}

/// Converged (or best-effort) estimates with diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub theta_se: Vec<Option<f64>>,
    /// Precision per observed state (all equal under pooled updates).
    pub tau: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha: Array1<f64>,
    pub effective_dimension: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
    pub warnings: Vec<String>,
    pub bases: Vec<BSplineBasis>,
    offsets: Vec<usize>,
}

impl FitResult {
    /// Fitted state function `x~_j(t)` (or its derivative).
    pub fn state_value(&self, state: usize, t: f64, deriv: usize) -> Result<f64> {
        if state >= self.bases.len() {
            return Err(Error::Config(format!("state index {state} out of range")));
        }
        let block =
            &self.alpha.as_slice().unwrap()[self.offsets[state]..self.offsets[state + 1]];
        self.bases[state].value(block, t, deriv)
    }

    /// Pooled precision estimate (mean over observed states).
    pub fn tau_pooled(&self) -> f64 {
        self.tau.iter().sum::<f64>() / self.tau.len() as f64
    }

    /// Pooled compliance estimate (mean over equations).
    pub fn gamma_pooled(&self) -> f64 {
        self.gamma.iter().sum::<f64>() / self.gamma.len() as f64
    }
}

/// Data-fit blocks of the penalized normal equations: `G` is block diagonal
/// with `tau_j B_j' B_j` for observed states (zero otherwise) and `g` stacks
/// `tau_j B_j' y_j`.
pub fn build_data_terms(
    data: &Dataset,
    bases: &[BSplineBasis],
    tau_by_state: &[f64],
) -> Result<(Array2<f64>, Array1<f64>)> {
    if data.dim() != bases.len() || tau_by_state.len() != bases.len() {
        return Err(Error::Config("dimension mismatch between data, bases and tau".into()));
    }
    let offsets = penalty::block_offsets(bases);
    let k_total = *offsets.last().unwrap();
    let mut g_mat = Array2::zeros((k_total, k_total));
    let mut g_vec = Array1::zeros(k_total);
    for j in 0..bases.len() {
        if data.n_obs(j) == 0 {
            continue;
        }
        let tau = tau_by_state[j];
        if !(tau > 0.0) {
            return Err(Error::Config(format!(
                "precision for observed state {} must be positive, got {tau}",
                j + 1
            )));
        }
        let design = bases[j].design_matrix(data.times(j), 0)?;
        let btb = design.t().dot(&design);
        let y = Array1::from_vec(data.values(j).to_vec());
        let bty = design.t().dot(&y);
        let off = offsets[j];
        for a in 0..bases[j].len() {
            g_vec[off + a] += tau * bty[a];
            for b in 0..bases[j].len() {
                g_mat[[off + a, off + b]] += tau * btb[[a, b]];
            }
        }
    }
    Ok((g_mat, g_vec))
}

/// Effective dimension `trace[(G + R)^{-1} G]` of the penalized smoother.
pub fn effective_dimension(g_mat: &Array2<f64>, assembly: &PenaltyAssembly) -> Result<f64> {
    let m = g_mat + &assembly.r_mat;
    let factor = SpdFactor::new(&m)?;
    let x = factor.solve_mat(g_mat);
    Ok(x.diag().sum())
}

/// Coefficient update `alpha = (G + R [+ kappa S'S])^{-1} (g - r [+ kappa
/// S's])`, or the bordered Lagrange solve when conditions are enforced
/// exactly. Returns the coefficients and, in Lagrange mode, the multipliers.
pub fn update_alpha(
    g_mat: &Array2<f64>,
    g_vec: &Array1<f64>,
    assembly: &PenaltyAssembly,
    constraints: &ConstraintSystem,
) -> Result<(Array1<f64>, Option<Vec<f64>>)> {
    let k = g_vec.len();
    let rhs_base: Vec<f64> =
        (0..k).map(|i| g_vec[i] - assembly.r_vec[i]).collect();
    match constraints.mode {
        ConstraintMode::Unconstrained => {
            let m = g_mat + &assembly.r_mat;
            let alpha = linalg::solve_spd_refined(&m, &rhs_base)?;
            Ok((Array1::from_vec(alpha), None))
        }
        ConstraintMode::Soft { kappa } => {
            let mut m = g_mat + &assembly.r_mat;
            let mut rhs = rhs_base;
            let s = constraints.matrix.as_ref().expect("soft mode requires conditions");
            for (row, &value) in s.rows().into_iter().zip(&constraints.rhs) {
                for a in 0..k {
                    if row[a] == 0.0 {
                        continue;
                    }
                    rhs[a] += kappa * value * row[a];
                    for b in 0..k {
                        if row[b] != 0.0 {
                            m[[a, b]] += kappa * row[a] * row[b];
                        }
                    }
                }
            }
            let alpha = linalg::solve_spd_refined(&m, &rhs)?;
            Ok((Array1::from_vec(alpha), None))
        }
        ConstraintMode::Lagrange => {
            let s = constraints.matrix.as_ref().expect("lagrange mode requires conditions");
            let c = s.nrows();
            let mut bordered = Array2::zeros((k + c, k + c));
            for a in 0..k {
                for b in 0..k {
                    bordered[[a, b]] = g_mat[[a, b]] + assembly.r_mat[[a, b]];
                }
            }
            for (ci, row) in s.rows().into_iter().enumerate() {
                for a in 0..k {
                    bordered[[a, k + ci]] = row[a];
                    bordered[[k + ci, a]] = row[a];
                }
            }
            let mut rhs = rhs_base;
            rhs.extend_from_slice(&constraints.rhs);
            let sol = linalg::solve_lu_refined(&bordered, &rhs)?;
            let alpha = Array1::from_vec(sol[..k].to_vec());
            let omega = sol[k..].to_vec();
            Ok((alpha, Some(omega)))
        }
    }
}

/// State-condition rows `S alpha = s` evaluated on the bases.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub mode: ConstraintMode,
    /// `c x K` rows of basis evaluations; `None` when unconstrained or no
    /// conditions are present.
    pub matrix: Option<Array2<f64>>,
    pub rhs: Vec<f64>,
}

impl ConstraintSystem {
    pub fn build(
        mode: ConstraintMode,
        conditions: &[StateCondition],
        bases: &[BSplineBasis],
    ) -> Result<Self> {
        if matches!(mode, ConstraintMode::Unconstrained) || conditions.is_empty() {
            let effective = if conditions.is_empty() {
                ConstraintMode::Unconstrained
            } else {
                mode
            };
            return Ok(Self { mode: effective, matrix: None, rhs: Vec::new() });
        }
        if let ConstraintMode::Soft { kappa } = mode {
            if !(kappa > 0.0) {
                return Err(Error::Config(format!(
                    "soft-constraint weight must be positive, got {kappa}"
                )));
            }
        }
        let offsets = penalty::block_offsets(bases);
        let k_total = *offsets.last().unwrap();
        let mut matrix = Array2::zeros((conditions.len(), k_total));
        let mut rhs = Vec::with_capacity(conditions.len());
        for (ci, cond) in conditions.iter().enumerate() {
            if cond.state >= bases.len() {
                return Err(Error::Config(format!(
                    "state condition references state {} beyond dimension {}",
                    cond.state + 1,
                    bases.len()
                )));
            }
            let row = bases[cond.state].eval(cond.t0, 0)?;
            for a in 0..bases[cond.state].len() {
                matrix[[ci, offsets[cond.state] + a]] = row[a];
            }
            rhs.push(cond.value);
        }
        Ok(Self { mode, matrix: Some(matrix), rhs })
    }

    /// Largest violation `|S alpha - s|` (zero when unconstrained).
    pub fn residual(&self, alpha: &Array1<f64>) -> f64 {
        match &self.matrix {
            None => 0.0,
            Some(s) => s
                .rows()
                .into_iter()
                .zip(&self.rhs)
                .map(|(row, &b)| (row.dot(alpha) - b).abs())
                .fold(0.0, f64::max),
        }
    }
}

/// Precision update `tau = (N - ED) / ||y - x~(t)||^2` (pooled), or the
/// per-state analogue. Degenerate perfect fits are capped with a warning.
pub fn update_tau(
    rss_per_state: &[f64],
    n_per_state: &[usize],
    ed_total: f64,
    ed_per_state: &[f64],
    mode: TauMode,
    warnings: &mut Vec<String>,
) -> Result<Vec<f64>> {
    let n_total: usize = n_per_state.iter().sum();
    if ed_total >= n_total as f64 {
        return Err(Error::Numeric(format!(
            "degenerate fit: effective dimension {ed_total} >= observation count {n_total}"
        )));
    }
    match mode {
        TauMode::Pooled => {
            let rss: f64 = rss_per_state.iter().sum();
            let tau = if rss > 0.0 {
                ((n_total as f64 - ed_total) / rss).min(PRECISION_CAP)
            } else {
                warnings.push("zero residual: precision capped at 1e12".into());
                PRECISION_CAP
            };
            Ok(vec![tau; rss_per_state.len()])
        }
        TauMode::PerState => {
            let mut out = Vec::with_capacity(rss_per_state.len());
            for (idx, (&rss, &n)) in rss_per_state.iter().zip(n_per_state).enumerate() {
                let dof = n as f64 - ed_per_state[idx];
                if dof <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "degenerate fit for observed state {idx}: ED {} >= n {}",
                        ed_per_state[idx], n
                    )));
                }
                if rss > 0.0 {
                    out.push((dof / rss).min(PRECISION_CAP));
                } else {
                    warnings.push(format!(
                        "zero residual for observed state {idx}: precision capped at 1e12"
                    ));
                    out.push(PRECISION_CAP);
                }
            }
            Ok(out)
        }
    }
}

/// Compliance update `gamma = ED / PEN` from the unit-compliance penalty
/// components; pooled over equations or per equation.
pub fn update_gamma(
    pen_components: &[f64],
    ed_total: f64,
    ed_per_equation: &[f64],
    per_equation: bool,
    warnings: &mut Vec<String>,
) -> Vec<f64> {
    let d = pen_components.len();
    if !per_equation {
        let pen: f64 = pen_components.iter().sum();
        let gamma = if pen > 0.0 {
            (ed_total / pen).min(COMPLIANCE_CAP)
        } else {
            warnings.push("zero penalty: compliance capped at 1e12".into());
            COMPLIANCE_CAP
        };
        return vec![gamma; d];
    }
    (0..d)
        .map(|j| {
            let pen = pen_components[j];
            let ed = ed_per_equation[j].max(1e-8);
            if pen > 0.0 {
                (ed / pen).min(COMPLIANCE_CAP)
            } else {
                warnings.push(format!("zero penalty for equation {j}: compliance capped"));
                COMPLIANCE_CAP
            }
        })
        .collect()
}

/// Relative-change convergence criterion over the four blocks; components
/// with near-zero previous value are compared absolutely.
pub fn check_convergence(prev: &EstimatorState, next: &EstimatorState, tol: f64) -> bool {
    fn block_change(prev: &[f64], next: &[f64]) -> f64 {
        prev.iter()
            .zip(next)
            .map(|(&p, &n)| {
                if p.abs() < 1e-12 {
                    (n - p).abs()
                } else {
                    ((n - p) / p).abs()
                }
            })
            .fold(0.0, f64::max)
    }
    let worst = [
        block_change(prev.alpha.as_slice().unwrap(), next.alpha.as_slice().unwrap()),
        block_change(&prev.gamma, &next.gamma),
        block_change(&prev.theta, &next.theta),
        block_change(&prev.tau, &next.tau),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    worst < tol
}

struct Workspace<'a> {
    model: &'a OdeModel,
    data: &'a Dataset,
    config: &'a FitConfig,
    offsets: Vec<usize>,
    k_total: usize,
    rule: QuadratureRule,
    /// Design matrices for states carrying observations.
    design: Vec<Option<Array2<f64>>>,
    obs_states: Vec<usize>,
    n_per_state: Vec<usize>,
    n_total: usize,
    constraints: ConstraintSystem,
    /// Transposed stacked weighted design rows, rebuilt when tau changes.
    c_rows_state: Vec<usize>,
}

impl<'a> Workspace<'a> {
    fn new(model: &'a OdeModel, data: &'a Dataset, config: &'a FitConfig) -> Result<Self> {
        let d = model.dim();
        if config.bases.len() != d {
            return Err(Error::Config(format!(
                "need {d} bases (one per state), got {}",
                config.bases.len()
            )));
        }
        if config.init_theta.len() != model.n_params() {
            return Err(Error::Config(format!(
                "initial parameter vector length {} does not match {} model parameters",
                config.init_theta.len(),
                model.n_params()
            )));
        }
        if config.init_gamma.len() != d {
            return Err(Error::Config(format!(
                "initial compliance vector length {} does not match dimension {d}",
                config.init_gamma.len()
            )));
        }
        if !(config.convergence_tol > 0.0) {
            return Err(Error::Config("convergence tolerance must be positive".into()));
        }
        if data.dim() != d {
            return Err(Error::Config(format!(
                "dataset dimension {} does not match model dimension {d}",
                data.dim()
            )));
        }
        let obs_states = data.observed_states();
        if obs_states.is_empty() {
            return Err(Error::Config("dataset contains no observations".into()));
        }
        for &j in &obs_states {
            if !model.is_observed(j) {
                return Err(Error::Config(format!(
                    "dataset contains observations of state {} which the model marks unobserved",
                    j + 1
                )));
            }
        }
        let offsets = penalty::block_offsets(&config.bases);
        let k_total = *offsets.last().unwrap();
        let rule = QuadratureRule::for_bases(&config.bases, config.per_span)?;
        let mut design: Vec<Option<Array2<f64>>> = vec![None; d];
        for &j in &obs_states {
            design[j] = Some(config.bases[j].design_matrix(data.times(j), 0)?);
        }
        let n_per_state: Vec<usize> = obs_states.iter().map(|&j| data.n_obs(j)).collect();
        let n_total = n_per_state.iter().sum();
        let constraints =
            ConstraintSystem::build(config.constraint_mode, &config.conditions, &config.bases)?;
        let mut c_rows_state = Vec::with_capacity(n_total);
        for (idx, &j) in obs_states.iter().enumerate() {
            c_rows_state.extend(std::iter::repeat(idx).take(data.n_obs(j)));
        }
        Ok(Self {
            model,
            data,
            config,
            offsets,
            k_total,
            rule,
            design,
            obs_states,
            n_per_state,
            n_total,
            constraints,
            c_rows_state,
        })
    }

    /// Per-state tau vector (length d) from the observed-state tau vector.
    fn tau_by_state(&self, tau: &[f64]) -> Vec<f64> {
        let mut out = vec![1.0; self.model.dim()];
        for (idx, &j) in self.obs_states.iter().enumerate() {
            out[j] = tau[idx];
        }
        out
    }

    fn data_terms(&self, tau: &[f64]) -> Result<(Array2<f64>, Array1<f64>)> {
        build_data_terms(self.data, &self.config.bases, &self.tau_by_state(tau))
    }

    /// Stacked weighted design rows as a `K x N` matrix for trace solves.
    fn c_transposed(&self, tau: &[f64]) -> Array2<f64> {
        let mut ct = Array2::zeros((self.k_total, self.n_total));
        let mut col = 0;
        for (idx, &j) in self.obs_states.iter().enumerate() {
            let w = tau[idx].sqrt();
            let design = self.design[j].as_ref().unwrap();
            for i in 0..design.nrows() {
                for a in 0..design.ncols() {
                    ct[[self.offsets[j] + a, col]] = w * design[[i, a]];
                }
                col += 1;
            }
        }
        ct
    }

    /// Residual sum of squares per observed state.
    fn rss_per_state(&self, alpha: &Array1<f64>) -> Vec<f64> {
        let alpha_s = alpha.as_slice().unwrap();
        self.obs_states
            .iter()
            .map(|&j| {
                let design = self.design[j].as_ref().unwrap();
                let block = &alpha_s[self.offsets[j]..self.offsets[j + 1]];
                let mut acc = 0.0;
                for (i, &y) in self.data.values(j).iter().enumerate() {
                    let mut fitted = 0.0;
                    for a in 0..design.ncols() {
                        fitted += design[[i, a]] * block[a];
                    }
                    let r = y - fitted;
                    acc += r * r;
                }
                acc
            })
            .collect()
    }

    /// Weighted residual vector `sqrt(tau_j) (y_j - B_j alpha_j)`.
    fn weighted_residuals(&self, alpha: &Array1<f64>, tau: &[f64]) -> Vec<f64> {
        let alpha_s = alpha.as_slice().unwrap();
        let mut out = Vec::with_capacity(self.n_total);
        for (idx, &j) in self.obs_states.iter().enumerate() {
            let w = tau[idx].sqrt();
            let design = self.design[j].as_ref().unwrap();
            let block = &alpha_s[self.offsets[j]..self.offsets[j + 1]];
            for (i, &y) in self.data.values(j).iter().enumerate() {
                let mut fitted = 0.0;
                for a in 0..design.ncols() {
                    fitted += design[[i, a]] * block[a];
                }
                out.push(w * (y - fitted));
            }
        }
        out
    }

    /// Effective dimension (total and per observed state) via the weighted
    /// design rows: `trace[(G+R)^{-1} G] = sum_i c_i' (G+R)^{-1} c_i`.
    fn effective_dimension_split(
        &self,
        factor: &SpdFactor,
        tau: &[f64],
    ) -> (f64, Vec<f64>) {
        let ct = self.c_transposed(tau);
        let solved = factor.solve_mat(&ct);
        let mut per_state = vec![0.0; self.obs_states.len()];
        for col in 0..self.n_total {
            let mut acc = 0.0;
            for row in 0..self.k_total {
                acc += ct[[row, col]] * solved[[row, col]];
            }
            per_state[self.c_rows_state[col]] += acc;
        }
        let total = per_state.iter().sum();
        (total, per_state)
    }

    /// Solves the coefficient update for a given assembly.
    fn solve_alpha(
        &self,
        g_mat: &Array2<f64>,
        g_vec: &Array1<f64>,
        assembly: &PenaltyAssembly,
    ) -> Result<Array1<f64>> {
        let (alpha, _) = update_alpha(g_mat, g_vec, assembly, &self.constraints)?;
        Ok(alpha)
    }

    /// Evaluates the theta-search objective: assemble at `theta`, solve for
    /// the coefficients, return the weighted RSS and the solution.
    fn eval_theta(
        &self,
        theta: &[f64],
        gamma: &[f64],
        tau: &[f64],
        point: &LinearizationPoint,
        g_mat: &Array2<f64>,
        g_vec: &Array1<f64>,
    ) -> Result<(Array1<f64>, f64)> {
        let assembly = penalty::assemble(self.model, theta, gamma, point, &self.rule)?;
        let alpha = self.solve_alpha(g_mat, g_vec, &assembly)?;
        let rss_w: f64 = self
            .rss_per_state(&alpha)
            .iter()
            .zip(tau)
            .map(|(rss, t)| rss * t)
            .sum();
        if !rss_w.is_finite() {
            return Err(Error::Numeric("non-finite residual during parameter search".into()));
        }
        Ok((alpha, rss_w))
    }
}

struct ThetaOutcome {
    theta: Vec<f64>,
    alpha: Array1<f64>,
    rss_weighted: f64,
}

/// Step (e): derivative-free search over the ODE parameters with the
/// linearization point held fixed, then one Gauss-Newton polish.
fn update_theta(
    ws: &Workspace,
    state: &EstimatorState,
    gamma: &[f64],
    tau: &[f64],
    point: &LinearizationPoint,
    g_mat: &Array2<f64>,
    g_vec: &Array1<f64>,
    first_outer_iteration: bool,
) -> Result<ThetaOutcome> {
    let q = state.theta.len();
    let opts = &ws.config.theta_search;
    let auto_budget = 30 * (q + 1) + 20;
    let mut max_evals = if opts.max_evals > 0 { opts.max_evals } else { auto_budget };
    let mut step_rel = opts.initial_step_rel;
    let mut min_step = opts.min_step;
    if first_outer_iteration {
        max_evals *= 2;
    } else {
        step_rel *= 0.2;
        min_step *= 0.1;
    }

    let mut best: Option<ThetaOutcome> = None;
    {
        let objective = |theta: &[f64]| -> f64 {
            match ws.eval_theta(theta, gamma, tau, point, g_mat, g_vec) {
                Ok((alpha, rss_w)) => {
                    if best.as_ref().map_or(true, |b| rss_w < b.rss_weighted) {
                        best = Some(ThetaOutcome {
                            theta: theta.to_vec(),
                            alpha,
                            rss_weighted: rss_w,
                        });
                    }
                    rss_w
                }
                Err(_) => f64::INFINITY,
            }
        };
        let init_step: Vec<f64> =
            state.theta.iter().map(|t| (t.abs() * step_rel).max(min_step)).collect();
        let simplex_opts = SimplexOptions {
            diameter_tol: opts.diameter_tol,
            max_evals,
            ..Default::default()
        };
        simplex::minimize(objective, &state.theta, &init_step, &simplex_opts);
    }
    let mut best = best.ok_or_else(|| {
        Error::Numeric("parameter search failed: objective undefined at every candidate".into())
    })?;

    if opts.gauss_newton_polish {
        if let Some(polished) = gauss_newton_step(ws, &best, gamma, tau, point, g_mat, g_vec)? {
            best = polished;
        }
    }
    Ok(best)
}

/// One damped Gauss-Newton step on the weighted trajectory residuals with a
/// finite-difference Jacobian. Returns `None` when no improvement is found.
fn gauss_newton_step(
    ws: &Workspace,
    current: &ThetaOutcome,
    gamma: &[f64],
    tau: &[f64],
    point: &LinearizationPoint,
    g_mat: &Array2<f64>,
    g_vec: &Array1<f64>,
) -> Result<Option<ThetaOutcome>> {
    let q = current.theta.len();
    let base_res = ws.weighted_residuals(&current.alpha, tau);
    let n = base_res.len();
    let mut jac = Array2::zeros((n, q));
    let mut probe = current.theta.clone();
    for k in 0..q {
        let h = 1e-6 * probe[k].abs().max(1e-3);
        probe[k] = current.theta[k] + h;
        let Ok((alpha_h, _)) = ws.eval_theta(&probe, gamma, tau, point, g_mat, g_vec) else {
            probe[k] = current.theta[k];
            return Ok(None);
        };
        probe[k] = current.theta[k];
        let res_h = ws.weighted_residuals(&alpha_h, tau);
        for i in 0..n {
            jac[[i, k]] = (res_h[i] - base_res[i]) / h;
        }
    }
    let jtj = jac.t().dot(&jac);
    let jtr = jac.t().dot(&Array1::from_vec(base_res));
    let Ok(step) = linalg::solve_spd_refined(&jtj, jtr.as_slice().unwrap()) else {
        return Ok(None);
    };
    // Residuals are y - fitted, so the descent direction is -step.
    let mut scale = 1.0;
    for _ in 0..4 {
        let cand: Vec<f64> = current
            .theta
            .iter()
            .zip(&step)
            .map(|(t, s)| t - scale * s)
            .collect();
        if let Ok((alpha, rss_w)) = ws.eval_theta(&cand, gamma, tau, point, g_mat, g_vec) {
            if rss_w < current.rss_weighted {
                return Ok(Some(ThetaOutcome { theta: cand, alpha, rss_weighted: rss_w }));
            }
        }
        scale *= 0.5;
    }
    Ok(None)
}

/// Initial spline coefficients per the configured strategy.
fn initialize_alpha(ws: &Workspace) -> Result<(Array1<f64>, Option<f64>, Vec<String>)> {
    let d = ws.model.dim();
    let warnings = Vec::new();
    let mut alpha = Array1::zeros(ws.k_total);
    let mut tau_hint: Option<f64> = None;

    match &ws.config.init_alpha {
        AlphaInit::Given(v) => {
            if v.len() != ws.k_total {
                return Err(Error::Config(format!(
                    "given coefficient vector length {} does not match total basis size {}",
                    v.len(),
                    ws.k_total
                )));
            }
            alpha.assign(v);
            return Ok((alpha, None, warnings));
        }
        AlphaInit::Constant => {
            for &j in &ws.obs_states {
                let mean =
                    ws.data.values(j).iter().sum::<f64>() / ws.data.n_obs(j) as f64;
                for a in ws.offsets[j]..ws.offsets[j + 1] {
                    alpha[a] = mean;
                }
            }
        }
        AlphaInit::Psmooth => {
            let mut taus = Vec::new();
            for &j in &ws.obs_states {
                let smooth =
                    pspline::smooth(&ws.config.bases[j], ws.data.times(j), ws.data.values(j))?;
                for (a, c) in smooth.coefficients.iter().enumerate() {
                    alpha[ws.offsets[j] + a] = *c;
                }
                taus.push(smooth.tau);
            }
            tau_hint = Some(taus.iter().sum::<f64>() / taus.len() as f64);
        }
    }

    // Unobserved states.
    let unobserved: Vec<usize> =
        (0..d).filter(|j| !ws.obs_states.contains(j)).collect();
    if !unobserved.is_empty() && ws.config.unobserved_init == UnobservedInit::OdeInversion {
        let vdp_shape = d == 2
            && ws.model.n_params() == 1
            && unobserved == [1]
            && ws.obs_states == [0];
        let derivative_pairs = derivative_state_pairs(ws, &unobserved);
        if vdp_shape {
            // Inversion of the first Van der Pol equation:
            // x2 = x1 - x1^3/3 - (1/theta) dx1/dt.
            let theta = ws.config.init_theta[0];
            if theta == 0.0 {
                return Err(Error::Config(
                    "cannot invert Van der Pol system at theta = 0".into(),
                ));
            }
            let basis1 = &ws.config.bases[0];
            let block1 = alpha.as_slice().unwrap()[ws.offsets[0]..ws.offsets[1]].to_vec();
            let grid: Vec<f64> = ws.rule.nodes().to_vec();
            let mut target = Vec::with_capacity(grid.len());
            for &t in &grid {
                let x1 = basis1.value(&block1, t, 0)?;
                let dx1 = basis1.value(&block1, t, 1)?;
                target.push(x1 - x1 * x1 * x1 / 3.0 - dx1 / theta);
            }
            fit_block(ws, &mut alpha, 1, &grid, &target)?;
        } else if let Some(pairs) = derivative_pairs {
            // States entering as exact derivatives (dx_a/dt = x_b with x_b
            // observed) are initialized by the running integral of the
            // smoothed x_b, anchored at zero.
            for (a, b) in pairs {
                let basis_b = &ws.config.bases[b];
                let block_b =
                    alpha.as_slice().unwrap()[ws.offsets[b]..ws.offsets[b + 1]].to_vec();
                let nodes = ws.rule.nodes();
                let weights = ws.rule.weights();
                let mut grid = Vec::with_capacity(nodes.len());
                let mut target = Vec::with_capacity(nodes.len());
                let mut integral = 0.0;
                for (&t, &w) in nodes.iter().zip(weights) {
                    integral += w * basis_b.value(&block_b, t, 0)?;
                    grid.push(t);
                    target.push(integral);
                }
                fit_block(ws, &mut alpha, a, &grid, &target)?;
            }
        } else {
            return Err(Error::Config(
                "ODE-inversion initialization is not defined for this model's observed-state \
                 pattern"
                    .into(),
            ));
        }
    }
    Ok((alpha, tau_hint, warnings))
}

/// Least-squares fit of one state block to target values on a grid.
fn fit_block(
    ws: &Workspace,
    alpha: &mut Array1<f64>,
    state: usize,
    grid: &[f64],
    target: &[f64],
) -> Result<()> {
    let design = ws.config.bases[state].design_matrix(grid, 0)?;
    let coef = linalg::lstsq(&design, target)?;
    for (a, c) in coef.iter().enumerate() {
        alpha[ws.offsets[state] + a] = *c;
    }
    Ok(())
}

/// Detects unobserved states `a` whose equation is exactly `dx_a/dt = x_b`
/// with `x_b` observed, by probing the model at random points. Returns the
/// `(a, b)` pairs when every unobserved state is of that form.
fn derivative_state_pairs(ws: &Workspace, unobserved: &[usize]) -> Option<Vec<(usize, usize)>> {
    let d = ws.model.dim();
    let theta = &ws.config.init_theta;
    let probes: [(f64, f64); 3] = [(0.1, 0.7), (1.3, -0.4), (0.5, 0.25)];
    let mut pairs = Vec::new();
    'outer: for &a in unobserved {
        'candidate: for b in 0..d {
            if b == a || !ws.obs_states.contains(&b) {
                continue;
            }
            for &(scale, shift) in &probes {
                let x: Vec<f64> = (0..d).map(|k| shift + scale * (k as f64 + 1.0)).collect();
                let Ok(f) = ws.model.f(0.3, &x, theta) else { return None };
                if (f[a] - x[b]).abs() > 1e-9 {
                    continue 'candidate;
                }
            }
            pairs.push((a, b));
            continue 'outer;
        }
        return None;
    }
    Some(pairs)
}

/// Runs the full estimation loop.
pub fn fit(model: &OdeModel, data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    let ws = Workspace::new(model, data, config)?;
    let (alpha0, tau_hint, mut warnings) = initialize_alpha(&ws)?;

    let tau0 = match config.init_tau {
        Some(t) if t > 0.0 => t,
        Some(t) => {
            return Err(Error::Config(format!("initial precision must be positive, got {t}")))
        }
        None => match tau_hint {
            Some(t) => t,
            None => {
                // Constant/given strategies carry no residual information;
                // smooth once just to calibrate the precision scale.
                let mut taus = Vec::new();
                for &j in &ws.obs_states {
                    let s = pspline::smooth(
                        &config.bases[j],
                        data.times(j),
                        data.values(j),
                    )?;
                    taus.push(s.tau);
                }
                taus.iter().sum::<f64>() / taus.len() as f64
            }
        },
    };

    let mut state = EstimatorState {
        alpha: alpha0,
        theta: config.init_theta.clone(),
        tau: vec![tau0; ws.obs_states.len()],
        gamma: config.init_gamma.clone(),
        ed: 0.0,
        iteration: 0,
    };
    let mut trace = Vec::new();
    let mut converged = false;

    for iteration in 0..config.max_iter {
        let step = |err: Error| {
            Error::Numeric(format!("iteration {}: {err}", iteration + 1))
        };
        // (a) Linearize at the current coefficients.
        let point =
            LinearizationPoint::new(config.bases.clone(), state.alpha.clone()).map_err(step)?;
        let assembly =
            penalty::assemble(model, &state.theta, &state.gamma, &point, &ws.rule)
                .map_err(step)?;
        let (g_mat, g_vec) = ws.data_terms(&state.tau).map_err(step)?;

        // (b) Conditionally linear coefficient update.
        let alpha_new = ws.solve_alpha(&g_mat, &g_vec, &assembly).map_err(step)?;

        // (c) Effective dimension and precision update.
        let m = &g_mat + &assembly.r_mat;
        let factor = SpdFactor::new(&m).map_err(step)?;
        let (ed_total, ed_per_state) = ws.effective_dimension_split(&factor, &state.tau);
        let rss_per_state = ws.rss_per_state(&alpha_new);
        let tau_new = update_tau(
            &rss_per_state,
            &ws.n_per_state,
            ed_total,
            &ed_per_state,
            config.tau_mode,
            &mut warnings,
        )
        .map_err(step)?;

        // (d) Compliance update (skipped in fixed mode and during warm-up).
        let gamma_new = match config.gamma_mode {
            GammaMode::Fixed => state.gamma.clone(),
            GammaMode::Schall { .. } if iteration < config.gamma_warmup => state.gamma.clone(),
            GammaMode::Schall { per_equation } => {
                let pen_components = penalty::linearized_penalty_components(
                    model,
                    &state.theta,
                    &point,
                    &ws.rule,
                    &alpha_new,
                )
                .map_err(step)?;
                // Per-equation effective dimensions follow the observed-state
                // block traces; unobserved equations fall back to the mean.
                let mut ed_eq = vec![ed_total / model.dim() as f64; model.dim()];
                for (idx, &j) in ws.obs_states.iter().enumerate() {
                    ed_eq[j] = ed_per_state[idx];
                }
                update_gamma(&pen_components, ed_total, &ed_eq, per_equation, &mut warnings)
            }
        };

        // (e) ODE-parameter update with refreshed precision/compliance.
        let (g_mat_e, g_vec_e) = ws.data_terms(&tau_new).map_err(step)?;
        let outcome = update_theta(
            &ws,
            &state,
            &gamma_new,
            &tau_new,
            &point,
            &g_mat_e,
            &g_vec_e,
            iteration == 0,
        )
        .map_err(step)?;

        let pen_components = penalty::linearized_penalty_components(
            model,
            &outcome.theta,
            &point,
            &ws.rule,
            &outcome.alpha,
        )
        .map_err(step)?;
        let penalty_value: f64 =
            pen_components.iter().zip(&gamma_new).map(|(p, g)| p * g).sum();
        let rss_total: f64 = ws.rss_per_state(&outcome.alpha).iter().sum();

        let next = EstimatorState {
            alpha: outcome.alpha,
            theta: outcome.theta,
            tau: tau_new,
            gamma: gamma_new,
            ed: ed_total,
            iteration: iteration + 1,
        };
        trace.push(IterationRecord {
            theta: next.theta.clone(),
            gamma: next.gamma.clone(),
            tau: next.tau.clone(),
            effective_dimension: ed_total,
            penalty_value,
            rss: rss_total,
        });

        // (f) Convergence criterion.
        let done = check_convergence(&state, &next, config.convergence_tol);
        state = next;
        if done {
            converged = true;
            break;
        }
    }

    let theta_se = standard_errors(&ws, &state).unwrap_or_else(|e| {
        warnings.push(format!("standard errors unavailable: {e}"));
        vec![None; state.theta.len()]
    });

    Ok(FitResult {
        theta: state.theta.clone(),
        theta_se,
        tau: state.tau.clone(),
        gamma: state.gamma.clone(),
        alpha: state.alpha.clone(),
        effective_dimension: state.ed,
        iterations: state.iteration,
        converged,
        trace,
        warnings,
        bases: config.bases.clone(),
        offsets: ws.offsets.clone(),
    })
}

/// Standard errors from the curvature of the profiled data criterion
/// `H(theta)` at the converged parameters: central finite-difference Hessian
/// with the coefficient solve repeated at every probe.
fn standard_errors(ws: &Workspace, state: &EstimatorState) -> Result<Vec<Option<f64>>> {
    let q = state.theta.len();
    let point = LinearizationPoint::new(ws.config.bases.clone(), state.alpha.clone())?;
    let (g_mat, g_vec) = ws.data_terms(&state.tau)?;
    let h_value = |theta: &[f64]| -> Result<f64> {
        let assembly = penalty::assemble(ws.model, theta, &state.gamma, &point, &ws.rule)?;
        let alpha = ws.solve_alpha(&g_mat, &g_vec, &assembly)?;
        let rss = ws.rss_per_state(&alpha);
        let mut h = 0.0;
        for (idx, (&r, &n)) in rss.iter().zip(&ws.n_per_state).enumerate() {
            let tau = state.tau[idx];
            h += 0.5 * n as f64 * tau.ln() - 0.5 * tau * r;
        }
        Ok(h)
    };

    let h0 = h_value(&state.theta)?;
    let steps: Vec<f64> =
        state.theta.iter().map(|t| 1e-4 * t.abs().max(1e-2)).collect();
    let mut hess = Array2::zeros((q, q));
    let mut probe = state.theta.clone();
    // Diagonal entries.
    for k in 0..q {
        probe[k] = state.theta[k] + steps[k];
        let hp = h_value(&probe)?;
        probe[k] = state.theta[k] - steps[k];
        let hm = h_value(&probe)?;
        probe[k] = state.theta[k];
        hess[[k, k]] = (hp - 2.0 * h0 + hm) / (steps[k] * steps[k]);
    }
    // Off-diagonal entries.
    for k in 0..q {
        for l in (k + 1)..q {
            probe[k] = state.theta[k] + steps[k];
            probe[l] = state.theta[l] + steps[l];
            let hpp = h_value(&probe)?;
            probe[l] = state.theta[l] - steps[l];
            let hpm = h_value(&probe)?;
            probe[k] = state.theta[k] - steps[k];
            let hmm = h_value(&probe)?;
            probe[l] = state.theta[l] + steps[l];
            let hmp = h_value(&probe)?;
            probe[k] = state.theta[k];
            probe[l] = state.theta[l];
            let v = (hpp - hpm - hmp + hmm) / (4.0 * steps[k] * steps[l]);
            hess[[k, l]] = v;
            hess[[l, k]] = v;
        }
    }

    let neg_hess = hess.mapv(|v| -v);
    match linalg::inverse(&neg_hess) {
        Some(cov) => Ok((0..q)
            .map(|k| {
                let v = cov[[k, k]];
                (v > 0.0).then(|| v.sqrt())
            })
            .collect()),
        None => Ok(vec![None; q]),
    }
}
