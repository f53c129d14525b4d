use serde::{Deserialize, Serialize};

use crate::linalg::Triplets;

/// One entry of the state descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    /// Lower bound, `-inf` when unbounded.
    pub lower: f64,
    /// Upper bound, `+inf` when unbounded.
    pub upper: f64,
    /// Largest Newton update allowed for this variable in one iteration.
    pub max_step: Option<f64>,
}

impl Variable {
    pub fn free(name: impl Into<String>) -> Self {
        Self { name: name.into(), lower: f64::NEG_INFINITY, upper: f64::INFINITY, max_step: None }
    }

    pub fn bounded(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        Self { name: name.into(), lower, upper, max_step: None }
    }

    pub fn with_max_step(mut self, step: f64) -> Self {
        self.max_step = Some(step);
        self
    }

    pub fn has_lower(&self) -> bool {
        self.lower.is_finite()
    }

    pub fn has_upper(&self) -> bool {
        self.upper.is_finite()
    }

    pub fn is_strictly_inside(&self, x: f64) -> bool {
        (!self.has_lower() || x > self.lower) && (!self.has_upper() || x < self.upper)
    }
}

/// Equality-constrained nonlinear program with box bounds:
///
/// ```text
/// min f(x)  s.t.  g(x) = 0,  lower < x < upper
/// ```
///
/// Sparse derivative callbacks return triplets; duplicates are summed.
pub trait OptProblem {
    fn variables(&self) -> &[Variable];

    fn num_constraints(&self) -> usize;

    fn objective(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Vec<f64>;

    fn constraints(&self, x: &[f64]) -> Vec<f64>;

    /// Jacobian of `g`, `num_constraints x n`.
    fn jacobian(&self, x: &[f64]) -> Triplets;

    /// Hessian of `f(x) + lambda^T g(x)`, full (both triangles), `n x n`.
    fn lagrangian_hessian(&self, x: &[f64], lambda: &[f64]) -> Triplets;

    fn constraint_name(&self, j: usize) -> String {
        format!("g[{j}]")
    }

    fn num_variables(&self) -> usize {
        self.variables().len()
    }
}

/// How the damped step lengths of one iteration are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Every variable and dual keeps its own step length.
    #[default]
    PerVariable,
    /// One primal and one dual step length, the minimum over all entries.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Complementarity relaxation.
    pub epsilon: f64,
    /// Relaxation used for the first iterations. When larger than `epsilon`
    /// it is divided by 10 each time the relaxed system is solved to within
    /// ten times its value, until it reaches `epsilon`.
    pub epsilon_start: f64,
    pub gamma_x: f64,
    pub gamma_mu: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Retry singular factorizations with diagonal regularization.
    pub regularize: bool,
    pub step_rule: StepRule,
    /// Multiplier magnitude above which the stationarity and
    /// complementarity tolerances grow with the mean dual magnitude.
    /// Infinity keeps both tests absolute.
    pub dual_scale_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            epsilon_start: 1e-6,
            gamma_x: 0.95,
            gamma_mu: 0.95,
            tol: 1e-6,
            max_iter: 200,
            regularize: true,
            step_rule: StepRule::PerVariable,
            dual_scale_max: 100.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.epsilon > 0.0) {
            return Err(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.dual_scale_max > 0.0) {
            return Err(format!("dual_scale_max must be positive, got {}", self.dual_scale_max));
        }
        if !(self.epsilon_start.is_finite()) {
            return Err(format!("epsilon_start must be finite, got {}", self.epsilon_start));
        }
        for (name, g) in [("gamma_x", self.gamma_x), ("gamma_mu", self.gamma_mu)] {
            if !(g > 0.0 && g < 1.0) {
                return Err(format!("{name} must lie in (0, 1), got {g}"));
            }
        }
        if !(self.tol > 0.0) {
            return Err(format!("tol must be positive, got {}", self.tol));
        }
        Ok(())
    }
}
