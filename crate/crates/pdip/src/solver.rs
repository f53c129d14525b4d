use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kkt::{self, KktError, KktState};
use crate::linalg::{LinalgError, SparseLu};
use crate::problem::{OptProblem, SolverConfig, StepRule, Variable};

/// Per-iteration telemetry record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub kkt_residual: f64,
    pub complementarity_residual: f64,
    pub step_tau_min: f64,
    pub objective: f64,
}

/// Read-only view handed to the observer after every update.
pub struct IterationView<'a> {
    pub record: &'a IterationRecord,
    pub state: &'a KktState,
    pub variables: &'a [Variable],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptSolution {
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu_lo: Vec<f64>,
    pub mu_hi: Vec<f64>,
    pub objective: f64,
    /// max(|stationarity|, |g(x)|)
    pub kkt_residual: f64,
    pub complementarity_residual: f64,
    /// Factors applied to `tol` for the stationarity and complementarity
    /// tests; both are 1 unless multipliers exceed `dual_scale_max`.
    pub dual_scale: f64,
    pub comp_scale: f64,
    pub converged: bool,
    pub status: SolveStatus,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
}

impl OptSolution {
    pub fn state(&self) -> KktState {
        KktState { x: self.x.clone(), lambda: self.lambda.clone(), mu_lo: self.mu_lo.clone(), mu_hi: self.mu_hi.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("initial point has {got} entries, problem has {expected} variables")]
    Dimension { expected: usize, got: usize },
    #[error("singular KKT matrix at iteration {iteration}: no pivot for `{variable}`")]
    SingularKkt { iteration: usize, variable: String },
    #[error("non-finite Newton update at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error(transparent)]
    Kkt(#[from] KktError),
}

/// Moves a starting point strictly inside its bounds.
pub fn interior_start(vars: &[Variable], x0: &[f64]) -> Vec<f64> {
    vars.iter()
        .zip(x0)
        .map(|(v, &x)| {
            let x = if x.is_finite() { x } else { 0.0 };
            let width = v.upper - v.lower;
            let margin = |b: f64| {
                let m = 1e-2 * b.abs().max(1.0);
                if width.is_finite() {
                    m.min(0.25 * width)
                } else {
                    m
                }
            };
            let mut x = x;
            if v.has_lower() && x < v.lower + margin(v.lower) {
                x = v.lower + margin(v.lower);
            }
            if v.has_upper() && x > v.upper - margin(v.upper) {
                x = v.upper - margin(v.upper);
            }
            x
        })
        .collect()
}

/// Dual start `mu = max(eps / slack, 1e-3)` per finite bound, `lambda = 0`.
pub fn initial_state(problem: &dyn OptProblem, x0: &[f64], config: &SolverConfig) -> KktState {
    let vars = problem.variables();
    let x = interior_start(vars, x0);
    let mut mu_lo = vec![0.0; vars.len()];
    let mut mu_hi = vec![0.0; vars.len()];
    for (i, v) in vars.iter().enumerate() {
        if v.has_lower() {
            mu_lo[i] = (config.epsilon / (x[i] - v.lower)).max(1e-3);
        }
        if v.has_upper() {
            mu_hi[i] = (config.epsilon / (v.upper - x[i])).max(1e-3);
        }
    }
    KktState { x, lambda: vec![0.0; problem.num_constraints()], mu_lo, mu_hi }
}

pub fn solve(problem: &dyn OptProblem, x0: &[f64], config: &SolverConfig) -> Result<OptSolution, SolveError> {
    solve_observed(problem, x0, config, &mut |_| {})
}

/// Newton iteration on the relaxed KKT conditions with diode limiting.
///
/// `observer` runs synchronously after every accepted update.
pub fn solve_observed(
    problem: &dyn OptProblem,
    x0: &[f64],
    config: &SolverConfig,
    observer: &mut dyn FnMut(&IterationView<'_>),
) -> Result<OptSolution, SolveError> {
    config.validate().map_err(SolveError::Config)?;
    let vars = problem.variables();
    if x0.len() != vars.len() {
        return Err(SolveError::Dimension { expected: vars.len(), got: x0.len() });
    }
    let mut stage = *config;
    stage.epsilon = config.epsilon_start.max(config.epsilon);
    let mut state = initial_state(problem, x0, &stage);
    let mut trace = Vec::new();

    for iter in 0..config.max_iter {
        let (sys, lu) = loop {
            let (sys, lu) = factor_with_regularization(problem, &state, &stage, iter)?;
            let res = &sys.residual;
            let kkt_residual = res.stationarity_norm().max(res.feasibility_norm());
            let comp = res.complementarity_norm();
            let settled = kkt_residual <= (10.0 * stage.epsilon).max(config.tol) && comp <= 10.0 * stage.epsilon;
            if stage.epsilon > config.epsilon && settled {
                stage.epsilon = (stage.epsilon / 10.0).max(config.epsilon);
                continue;
            }
            break (sys, lu);
        };
        let res = &sys.residual;
        let kkt_residual = res.stationarity_norm().max(res.feasibility_norm());
        let comp = res.complementarity_norm();
        if is_converged(res, &state, config) {
            return Ok(finish(problem, state, kkt_residual, comp, true, iter, trace, config.dual_scale_max));
        }

        let dz = lu.solve_refined(&sys.matrix, &sys.rhs).map_err(|e| singular(problem, &sys.layout, iter, e))?;
        if dz.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite { iteration: iter });
        }
        let update = sys.layout.unpack_update(&dz);
        let mut steps = kkt::diode_step_lengths(vars, &state, &update, config);
        for (i, v) in vars.iter().enumerate() {
            if let Some(limit) = v.max_step {
                let dx = update.dx[i].abs();
                if dx * steps.tau_x[i] > limit {
                    steps.tau_x[i] = limit / dx;
                }
            }
        }
        if config.step_rule == StepRule::Uniform {
            steps.make_uniform();
        }

        state = apply_step(vars, &state, &update, &steps);
        kkt::check_interior(vars, &state)?;

        let record = IterationRecord {
            iter: iter + 1,
            kkt_residual,
            complementarity_residual: comp,
            step_tau_min: steps.min(),
            objective: problem.objective(&state.x),
        };
        observer(&IterationView { record: &record, state: &state, variables: vars });
        trace.push(record);
    }

    let res = kkt::residual(problem, &state, config.epsilon);
    let kkt_residual = res.stationarity_norm().max(res.feasibility_norm());
    let comp = res.complementarity_norm();
    let converged = is_converged(&res, &state, config);
    Ok(finish(problem, state, kkt_residual, comp, converged, config.max_iter, trace, config.dual_scale_max))
}

/// Tolerance factors `(s_d, s_c)` from the mean multiplier magnitudes.
pub fn tolerance_scales(s: &KktState, s_max: f64) -> (f64, f64) {
    if !s_max.is_finite() {
        return (1.0, 1.0);
    }
    let mu: f64 = s.mu_lo.iter().chain(&s.mu_hi).map(|v| v.abs()).sum();
    let n_mu = s.mu_lo.iter().chain(&s.mu_hi).filter(|v| **v != 0.0).count();
    let lam: f64 = s.lambda.iter().map(|v| v.abs()).sum();
    let s_d = ((lam + mu) / (s.lambda.len() + n_mu).max(1) as f64).max(s_max) / s_max;
    let s_c = (mu / n_mu.max(1) as f64).max(s_max) / s_max;
    (s_d, s_c)
}

fn is_converged(res: &kkt::KktResidual, s: &KktState, config: &SolverConfig) -> bool {
    let (s_d, s_c) = tolerance_scales(s, config.dual_scale_max);
    res.stationarity_norm() <= config.tol * s_d
        && res.feasibility_norm() <= config.tol
        && res.complementarity_norm() <= config.tol * s_c
}

fn apply_step(vars: &[Variable], s: &KktState, u: &kkt::KktUpdate, steps: &kkt::StepLengths) -> KktState {
    let mut t = s.clone();
    for (i, v) in vars.iter().enumerate() {
        t.x[i] += steps.tau_x[i] * u.dx[i];
        if !v.is_strictly_inside(t.x[i]) && v.is_strictly_inside(s.x[i]) {
            // The damped step rounded onto the bound; go halfway instead.
            let bound = if u.dx[i] > 0.0 { v.upper } else { v.lower };
            let half = s.x[i] + 0.5 * (bound - s.x[i]);
            t.x[i] = if v.is_strictly_inside(half) { half } else { s.x[i] };
        }
        if v.has_lower() {
            t.mu_lo[i] += steps.tau_mu_lo[i] * u.dmu_lo[i];
        }
        if v.has_upper() {
            t.mu_hi[i] += steps.tau_mu_hi[i] * u.dmu_hi[i];
        }
    }
    for (l, dl) in t.lambda.iter_mut().zip(&u.dlambda) {
        *l += steps.tau_lambda * dl;
    }
    t
}

fn factor_with_regularization(
    problem: &dyn OptProblem,
    state: &KktState,
    config: &SolverConfig,
    iter: usize,
) -> Result<(kkt::KktSystem, SparseLu), SolveError> {
    let sys = kkt::build_kkt(problem, state, config)?;
    let first_err = match SparseLu::factor(&sys.matrix) {
        Ok(lu) => return Ok((sys, lu)),
        Err(e) => e,
    };
    // Retry with growing diagonal regularization before giving up.
    let mut delta = 1e-8;
    while config.regularize && delta <= 1e-2 {
        let reg = kkt::build_kkt_regularized(problem, state, config, delta)?;
        if let Ok(lu) = SparseLu::factor(&reg.matrix) {
            // Keep the exact residual on the right-hand side.
            return Ok((kkt::KktSystem { rhs: sys.rhs, residual: sys.residual, ..reg }, lu));
        }
        delta *= 100.0;
    }
    Err(singular(problem, &sys.layout, iter, first_err))
}

fn singular(problem: &dyn OptProblem, layout: &kkt::KktLayout, iteration: usize, e: LinalgError) -> SolveError {
    match e {
        LinalgError::Singular { column } => {
            SolveError::SingularKkt { iteration, variable: layout.unknown_name(problem, column) }
        }
        LinalgError::Dimension { .. } => SolveError::NonFinite { iteration },
    }
}

fn finish(
    problem: &dyn OptProblem,
    state: KktState,
    kkt_residual: f64,
    comp: f64,
    converged: bool,
    iterations: usize,
    trace: Vec<IterationRecord>,
    s_max: f64,
) -> OptSolution {
    let (dual_scale, comp_scale) = tolerance_scales(&state, s_max);
    OptSolution {
        objective: problem.objective(&state.x),
        x: state.x,
        lambda: state.lambda,
        mu_lo: state.mu_lo,
        mu_hi: state.mu_hi,
        kkt_residual,
        complementarity_residual: comp,
        dual_scale,
        comp_scale,
        converged,
        status: if converged { SolveStatus::Converged } else { SolveStatus::IterationLimit },
        iterations,
        trace,
    }
}
