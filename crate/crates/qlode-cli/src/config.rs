//! Declarative run configuration: flat key-value TOML files with strict
//! schemas (unknown keys rejected, missing keys reported by name).

use serde::Deserialize;

use qlode::bspline::BSplineBasis;
use qlode::estimator::{
    AlphaInit, ConstraintMode, FitConfig, GammaMode, TauMode, UnobservedInit,
};
use qlode::model::{self, OdeModel, StateCondition};
use qlode::sim::Sampling;

use crate::{CliError, CliResult};

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> CliResult<T> {
    toml::from_str(text).map_err(|e| CliError::Usage(format!("config error: {e}")))
}

/// Looks up a built-in model by config name.
pub fn model_by_name(name: &str) -> CliResult<OdeModel> {
    match name {
        "first_order" => Ok(model::first_order()),
        "van_der_pol" => Ok(model::van_der_pol()),
        "coupled_van_der_pol" => Ok(model::coupled_van_der_pol()),
        "lotka_volterra" => Ok(model::lotka_volterra()),
        other => Err(CliError::Usage(format!(
            "unknown model '{other}'; expected one of first_order, van_der_pol, \
             coupled_van_der_pol, lotka_volterra"
        ))),
    }
}

fn apply_observed(model: OdeModel, observed: &Option<Vec<usize>>) -> CliResult<OdeModel> {
    match observed {
        None => Ok(model),
        Some(states) => {
            let zero_based: Vec<usize> = states
                .iter()
                .map(|&s| {
                    if s == 0 {
                        Err(CliError::Usage("observed states are 1-based".into()))
                    } else {
                        Ok(s - 1)
                    }
                })
                .collect::<CliResult<_>>()?;
            model.with_observed(zero_based).map_err(CliError::from)
        }
    }
}

fn parse_sampling(s: &str) -> CliResult<Sampling> {
    match s {
        "uniform" => Ok(Sampling::UniformRandom),
        "equispaced" => Ok(Sampling::Equispaced),
        other => Err(CliError::Usage(format!(
            "unknown sampling '{other}'; expected uniform or equispaced"
        ))),
    }
}

/// `simulate` command configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub model: String,
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    pub n_obs: usize,
    pub noise_sd: f64,
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    pub seed: u64,
    #[serde(default = "default_sampling")]
    pub sampling: String,
    pub observed: Option<Vec<usize>>,
    #[serde(default = "default_truth_points")]
    pub truth_points: usize,
}

fn default_sampling() -> String {
    "uniform".into()
}

fn default_truth_points() -> usize {
    512
}

impl SimulateConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        parse_toml(text)
    }

    pub fn model(&self) -> CliResult<OdeModel> {
        apply_observed(model_by_name(&self.model)?, &self.observed)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }

    pub fn sampling(&self) -> CliResult<Sampling> {
        parse_sampling(&self.sampling)
    }
}

/// `fit` command configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFileConfig {
    pub model: String,
    pub observed: Option<Vec<usize>>,
    pub n_internal: usize,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    pub init_theta: Vec<f64>,
    pub init_tau: Option<f64>,
    pub init_gamma: Vec<f64>,
    #[serde(default = "default_gamma_mode")]
    pub gamma_mode: String,
    #[serde(default)]
    pub gamma_warmup: usize,
    #[serde(default = "default_tau_mode")]
    pub tau_mode: String,
    #[serde(default = "default_alpha_init")]
    pub alpha_init: String,
    #[serde(default = "default_unobserved_init")]
    pub unobserved_init: String,
    #[serde(default = "default_constraints")]
    pub constraint_mode: String,
    pub kappa: Option<f64>,
    /// `[t0, state (1-based), value]` triples.
    #[serde(default)]
    pub conditions: Vec<(f64, usize, f64)>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_per_span")]
    pub per_span: usize,
    #[serde(default)]
    pub theta_max_evals: usize,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

fn default_order() -> usize {
    4
}

fn default_gamma_mode() -> String {
    "schall".into()
}

fn default_tau_mode() -> String {
    "pooled".into()
}

fn default_alpha_init() -> String {
    "psmooth".into()
}

fn default_unobserved_init() -> String {
    "zero".into()
}

fn default_constraints() -> String {
    "none".into()
}

fn default_tol() -> f64 {
    1e-4
}

fn default_max_iter() -> usize {
    200
}

fn default_per_span() -> usize {
    5
}

fn default_grid_points() -> usize {
    512
}

impl FitFileConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        parse_toml(text)
    }

    pub fn model(&self) -> CliResult<OdeModel> {
        apply_observed(model_by_name(&self.model)?, &self.observed)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }

    /// Builds the estimator configuration for a model.
    pub fn fit_config(&self, model: &OdeModel) -> CliResult<FitConfig> {
        let basis = BSplineBasis::new(self.domain(), self.n_internal, self.order)?;
        let bases = vec![basis; model.dim()];
        let mut fc = FitConfig::new(bases, self.init_theta.clone());
        fc.init_tau = self.init_tau;
        if self.init_gamma.len() == 1 {
            fc.init_gamma = vec![self.init_gamma[0]; model.dim()];
        } else if self.init_gamma.len() == model.dim() {
            fc.init_gamma = self.init_gamma.clone();
        } else {
            return Err(CliError::Usage(format!(
                "init_gamma must have 1 or {} entries, got {}",
                model.dim(),
                self.init_gamma.len()
            )));
        }
        fc.gamma_mode = match self.gamma_mode.as_str() {
            "schall" => GammaMode::Schall { per_equation: false },
            "schall_per_equation" => GammaMode::Schall { per_equation: true },
            "fixed" => GammaMode::Fixed,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown gamma_mode '{other}'; expected schall, schall_per_equation or fixed"
                )))
            }
        };
        fc.gamma_warmup = self.gamma_warmup;
        fc.tau_mode = match self.tau_mode.as_str() {
            "pooled" => TauMode::Pooled,
            "per_state" => TauMode::PerState,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown tau_mode '{other}'; expected pooled or per_state"
                )))
            }
        };
        fc.init_alpha = match self.alpha_init.as_str() {
            "psmooth" => AlphaInit::Psmooth,
            "constant" => AlphaInit::Constant,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown alpha_init '{other}'; expected psmooth or constant"
                )))
            }
        };
        fc.unobserved_init = match self.unobserved_init.as_str() {
            "zero" => UnobservedInit::Zero,
            "ode_inversion" => UnobservedInit::OdeInversion,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown unobserved_init '{other}'; expected zero or ode_inversion"
                )))
            }
        };
        fc.constraint_mode = match self.constraint_mode.as_str() {
            "none" => ConstraintMode::Unconstrained,
            "soft" => ConstraintMode::Soft { kappa: self.kappa.unwrap_or(1e6) },
            "lagrange" => ConstraintMode::Lagrange,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown constraint_mode '{other}'; expected none, soft or lagrange"
                )))
            }
        };
        fc.conditions = self
            .conditions
            .iter()
            .map(|&(t0, state, value)| {
                if state == 0 {
                    return Err(CliError::Usage("condition states are 1-based".into()));
                }
                Ok(StateCondition { t0, state: state - 1, value })
            })
            .collect::<CliResult<_>>()?;
        fc.convergence_tol = self.tol;
        fc.max_iter = self.max_iter;
        fc.per_span = self.per_span;
        fc.theta_search.max_evals = self.theta_max_evals;
        Ok(fc)
    }
}

/// `study` command configuration: generation protocol plus estimator keys.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyFileConfig {
    pub model: String,
    pub observed: Option<Vec<usize>>,
    pub theta_true: Vec<f64>,
    pub x0_true: Vec<f64>,
    pub noise_sd: f64,
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "default_sampling")]
    pub sampling: String,
    #[serde(default)]
    pub with_nls: bool,
    #[serde(default)]
    pub with_constrained: bool,
    /// Runs the robustness grid (initializations x strategies) instead of a
    /// plain replication study.
    #[serde(default)]
    pub robustness_grid: bool,

    pub n_internal: usize,
    #[serde(default = "default_order")]
    pub order: usize,
    pub init_theta: Vec<f64>,
    pub init_tau: Option<f64>,
    pub init_gamma: Vec<f64>,
    #[serde(default = "default_gamma_mode")]
    pub gamma_mode: String,
    #[serde(default)]
    pub gamma_warmup: usize,
    #[serde(default = "default_alpha_init")]
    pub alpha_init: String,
    #[serde(default = "default_unobserved_init")]
    pub unobserved_init: String,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_per_span")]
    pub per_span: usize,
}

impl StudyFileConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        parse_toml(text)
    }

    pub fn model(&self) -> CliResult<OdeModel> {
        apply_observed(model_by_name(&self.model)?, &self.observed)
    }

    pub fn sampling(&self) -> CliResult<Sampling> {
        parse_sampling(&self.sampling)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }

    /// Estimator template via the fit-config pathway.
    pub fn fit_config(&self, model: &OdeModel) -> CliResult<FitConfig> {
        let as_fit = FitFileConfig {
            model: self.model.clone(),
            observed: self.observed.clone(),
            n_internal: self.n_internal,
            order: self.order,
            t_start: self.t_start,
            t_end: self.t_end,
            init_theta: self.init_theta.clone(),
            init_tau: self.init_tau,
            init_gamma: self.init_gamma.clone(),
            gamma_mode: self.gamma_mode.clone(),
            gamma_warmup: self.gamma_warmup,
            tau_mode: default_tau_mode(),
            alpha_init: self.alpha_init.clone(),
            unobserved_init: self.unobserved_init.clone(),
            constraint_mode: default_constraints(),
            kappa: None,
            conditions: Vec::new(),
            tol: self.tol,
            max_iter: self.max_iter,
            per_span: self.per_span,
            theta_max_evals: 0,
            grid_points: default_grid_points(),
        };
        as_fit.fit_config(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "model = \"first_order\"\ntheta = [1.0, 1.0]\nx0 = [1.0]\nn_obs = 10\n\
                    noise_sd = 0.01\nt_end = 2.0\nseed = 1\nbogus = 3\n";
        let err = SimulateConfig::parse(text).err().unwrap();
        assert!(err.message().contains("bogus"), "{}", err.message());
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn missing_keys_are_named() {
        let text = "model = \"first_order\"\n";
        let err = SimulateConfig::parse(text).err().unwrap();
        assert!(err.message().contains("theta"), "{}", err.message());
    }

    #[test]
    fn fit_config_roundtrip() {
        let text = "model = \"van_der_pol\"\nn_internal = 150\nt_end = 10.0\n\
                    init_theta = [1.0]\ninit_gamma = [1e4]\nconditions = [[0.0, 1, 1.0]]\n\
                    constraint_mode = \"lagrange\"\n";
        let cfg = FitFileConfig::parse(text).unwrap();
        let model = cfg.model().unwrap();
        let fc = cfg.fit_config(&model).unwrap();
        assert_eq!(fc.bases.len(), 2);
        assert_eq!(fc.bases[0].len(), 154);
        assert_eq!(fc.conditions[0].state, 0);
        assert!(matches!(fc.constraint_mode, ConstraintMode::Lagrange));
    }

    #[test]
    fn observed_override_is_one_based() {
        let text = "model = \"coupled_van_der_pol\"\ntheta = [-1.8, -0.2, 2.0, 1.5, 0.1, 0.0, 0.55]\n\
                    x0 = [1.0, 1.0, -0.01, -0.01]\nn_obs = 10\nnoise_sd = 0.14\nt_end = 20.0\n\
                    seed = 5\nobserved = [2, 4]\n";
        let cfg = SimulateConfig::parse(text).unwrap();
        let m = cfg.model().unwrap();
        assert_eq!(m.observed(), &[1, 3]);
    }
}
