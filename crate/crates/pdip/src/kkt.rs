//! First-order optimality conditions with relaxed complementarity.
//!
//! For the Lagrangian `L = f + lambda^T g + mu_hi^T (x - upper) - mu_lo^T (x - lower)`
//! the residual map is
//!
//! ```text
//! stationarity:  grad f + J^T lambda + mu_hi - mu_lo = 0
//! feasibility:   g(x) = 0
//! upper:         mu_hi * (x - upper) + eps = 0
//! lower:        -mu_lo * (x - lower) + eps = 0
//! ```
//!
//! Newton unknowns are laid out as `[x | lambda | mu_lo (finite lower) | mu_hi (finite upper)]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{CsrMatrix, Triplets};
use crate::problem::{OptProblem, SolverConfig, Variable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KktError {
    #[error("state is not strictly interior: variable `{variable}` = {value} outside ({lower}, {upper})")]
    NotInterior { variable: String, value: f64, lower: f64, upper: f64 },
    #[error("bound dual for `{variable}` is not positive: {value}")]
    NonPositiveDual { variable: String, value: f64 },
}

/// Primal-dual iterate. Bound duals are stored per variable and are zero
/// where the corresponding bound is infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktState {
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu_lo: Vec<f64>,
    pub mu_hi: Vec<f64>,
}

/// Newton update in the same per-variable layout as [`KktState`].
#[derive(Debug, Clone, PartialEq)]
pub struct KktUpdate {
    pub dx: Vec<f64>,
    pub dlambda: Vec<f64>,
    pub dmu_lo: Vec<f64>,
    pub dmu_hi: Vec<f64>,
}

/// Positions of finite bounds inside the Newton unknown vector.
#[derive(Debug, Clone)]
pub struct KktLayout {
    pub n: usize,
    pub m: usize,
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
}

impl KktLayout {
    pub fn new(vars: &[Variable], m: usize) -> Self {
        Self {
            n: vars.len(),
            m,
            lower: (0..vars.len()).filter(|&i| vars[i].has_lower()).collect(),
            upper: (0..vars.len()).filter(|&i| vars[i].has_upper()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n + self.m + self.lower.len() + self.upper.len()
    }

    fn lo_offset(&self) -> usize {
        self.n + self.m
    }

    fn hi_offset(&self) -> usize {
        self.n + self.m + self.lower.len()
    }

    /// Flattens a state into the Newton unknown vector.
    pub fn pack(&self, s: &KktState) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.dim());
        z.extend_from_slice(&s.x);
        z.extend_from_slice(&s.lambda);
        z.extend(self.lower.iter().map(|&i| s.mu_lo[i]));
        z.extend(self.upper.iter().map(|&i| s.mu_hi[i]));
        z
    }

    pub fn unpack_state(&self, z: &[f64]) -> KktState {
        let u = self.unpack_update(z);
        KktState { x: u.dx, lambda: u.dlambda, mu_lo: u.dmu_lo, mu_hi: u.dmu_hi }
    }

    pub fn unpack_update(&self, z: &[f64]) -> KktUpdate {
        let mut dmu_lo = vec![0.0; self.n];
        let mut dmu_hi = vec![0.0; self.n];
        for (k, &i) in self.lower.iter().enumerate() {
            dmu_lo[i] = z[self.lo_offset() + k];
        }
        for (k, &i) in self.upper.iter().enumerate() {
            dmu_hi[i] = z[self.hi_offset() + k];
        }
        KktUpdate { dx: z[..self.n].to_vec(), dlambda: z[self.n..self.n + self.m].to_vec(), dmu_lo, dmu_hi }
    }

    /// Human-readable name of a Newton unknown, used for singular-pivot diagnostics.
    pub fn unknown_name(&self, problem: &dyn OptProblem, idx: usize) -> String {
        let vars = problem.variables();
        if idx < self.n {
            vars[idx].name.clone()
        } else if idx < self.n + self.m {
            format!("lambda[{}]", problem.constraint_name(idx - self.n))
        } else if idx < self.hi_offset() {
            format!("mu_lo[{}]", vars[self.lower[idx - self.lo_offset()]].name)
        } else {
            format!("mu_hi[{}]", vars[self.upper[idx - self.hi_offset()]].name)
        }
    }
}

/// Residual blocks of the relaxed KKT map.
#[derive(Debug, Clone, PartialEq)]
pub struct KktResidual {
    pub stationarity: Vec<f64>,
    pub feasibility: Vec<f64>,
    /// Per variable, zero where the lower bound is infinite.
    pub comp_lo: Vec<f64>,
    pub comp_hi: Vec<f64>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl KktResidual {
    pub fn stationarity_norm(&self) -> f64 {
        max_abs(&self.stationarity)
    }

    pub fn feasibility_norm(&self) -> f64 {
        max_abs(&self.feasibility)
    }

    pub fn complementarity_norm(&self) -> f64 {
        max_abs(&self.comp_lo).max(max_abs(&self.comp_hi))
    }

    pub fn flatten(&self, layout: &KktLayout) -> Vec<f64> {
        let mut f = Vec::with_capacity(layout.dim());
        f.extend_from_slice(&self.stationarity);
        f.extend_from_slice(&self.feasibility);
        f.extend(layout.lower.iter().map(|&i| self.comp_lo[i]));
        f.extend(layout.upper.iter().map(|&i| self.comp_hi[i]));
        f
    }
}

pub fn residual(problem: &dyn OptProblem, s: &KktState, epsilon: f64) -> KktResidual {
    let vars = problem.variables();
    let n = vars.len();
    let mut stationarity = problem.gradient(&s.x);
    for &(r, c, v) in problem.jacobian(&s.x).entries() {
        stationarity[c] += v * s.lambda[r];
    }
    let mut comp_lo = vec![0.0; n];
    let mut comp_hi = vec![0.0; n];
    for (i, var) in vars.iter().enumerate() {
        if var.has_lower() {
            stationarity[i] -= s.mu_lo[i];
            comp_lo[i] = -s.mu_lo[i] * (s.x[i] - var.lower) + epsilon;
        }
        if var.has_upper() {
            stationarity[i] += s.mu_hi[i];
            comp_hi[i] = s.mu_hi[i] * (s.x[i] - var.upper) + epsilon;
        }
    }
    KktResidual { stationarity, feasibility: problem.constraints(&s.x), comp_lo, comp_hi }
}

/// Linearized KKT system `matrix * dz = rhs` at a strictly interior state.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub layout: KktLayout,
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub residual: KktResidual,
}

pub fn check_interior(vars: &[Variable], s: &KktState) -> Result<(), KktError> {
    for (i, var) in vars.iter().enumerate() {
        if !var.is_strictly_inside(s.x[i]) || !s.x[i].is_finite() {
            return Err(KktError::NotInterior {
                variable: var.name.clone(),
                value: s.x[i],
                lower: var.lower,
                upper: var.upper,
            });
        }
        if var.has_lower() && !(s.mu_lo[i] > 0.0) {
            return Err(KktError::NonPositiveDual { variable: format!("mu_lo[{}]", var.name), value: s.mu_lo[i] });
        }
        if var.has_upper() && !(s.mu_hi[i] > 0.0) {
            return Err(KktError::NonPositiveDual { variable: format!("mu_hi[{}]", var.name), value: s.mu_hi[i] });
        }
    }
    Ok(())
}

/// Assembles the Newton linearization of the relaxed KKT conditions.
pub fn build_kkt(problem: &dyn OptProblem, s: &KktState, config: &SolverConfig) -> Result<KktSystem, KktError> {
    build_kkt_regularized(problem, s, config, 0.0)
}

/// As [`build_kkt`] with `delta` added to the Hessian diagonal and `-delta`
/// to the constraint block; used to recover from singular pivots.
pub fn build_kkt_regularized(
    problem: &dyn OptProblem,
    s: &KktState,
    config: &SolverConfig,
    delta: f64,
) -> Result<KktSystem, KktError> {
    let vars = problem.variables();
    check_interior(vars, s)?;
    let n = vars.len();
    let m = problem.num_constraints();
    let layout = KktLayout::new(vars, m);
    let dim = layout.dim();

    let mut t = Triplets::new(dim, dim);
    let hess = problem.lagrangian_hessian(&s.x, &s.lambda);
    t.extend_shifted(&hess, 0, 0);
    let jac = problem.jacobian(&s.x);
    t.extend_transposed(&jac, 0, n);
    t.extend_shifted(&jac, n, 0);
    if delta > 0.0 {
        for i in 0..n {
            t.push(i, i, delta);
        }
        for j in 0..m {
            t.push(n + j, n + j, -delta);
        }
    }
    for (k, &i) in layout.lower.iter().enumerate() {
        let row = layout.lo_offset() + k;
        t.push(i, row, -1.0);
        t.push(row, i, -s.mu_lo[i]);
        t.push(row, row, -(s.x[i] - vars[i].lower));
    }
    for (k, &i) in layout.upper.iter().enumerate() {
        let row = layout.hi_offset() + k;
        t.push(i, row, 1.0);
        t.push(row, i, s.mu_hi[i]);
        t.push(row, row, s.x[i] - vars[i].upper);
    }

    let res = residual(problem, s, config.epsilon);
    let rhs = res.flatten(&layout).into_iter().map(|v| -v).collect();
    Ok(KktSystem { layout, matrix: t.to_csr(), rhs, residual: res })
}

/// Damping factor for a bound dual: `min(1, -gamma * mu / dmu)` when the
/// update decreases the dual, otherwise 1.
pub fn dual_step_length(mu: f64, dmu: f64, gamma: f64) -> f64 {
    if dmu < 0.0 {
        (-gamma * mu / dmu).min(1.0)
    } else {
        1.0
    }
}

/// Fraction-to-boundary damping for one primal variable; each finite bound
/// limits the step only when the update moves toward it.
pub fn primal_step_length(x: f64, dx: f64, lower: f64, upper: f64, gamma: f64) -> f64 {
    if dx > 0.0 && upper.is_finite() {
        (gamma * (upper - x) / dx).min(1.0)
    } else if dx < 0.0 && lower.is_finite() {
        (gamma * (lower - x) / dx).min(1.0)
    } else {
        1.0
    }
}

/// Per-component damping factors.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLengths {
    pub tau_x: Vec<f64>,
    pub tau_mu_lo: Vec<f64>,
    pub tau_mu_hi: Vec<f64>,
    /// Applied to the equality multipliers.
    pub tau_lambda: f64,
}

impl StepLengths {
    pub fn min(&self) -> f64 {
        self.tau_x
            .iter()
            .chain(&self.tau_mu_lo)
            .chain(&self.tau_mu_hi)
            .fold(1.0, |m: f64, &t| m.min(t))
    }

    /// Replaces the primal lengths by their minimum, and the dual lengths
    /// likewise.
    pub fn make_uniform(&mut self) {
        let px = self.tau_x.iter().fold(1.0, |m: f64, &t| m.min(t));
        let pd = self.tau_mu_lo.iter().chain(&self.tau_mu_hi).fold(1.0, |m: f64, &t| m.min(t));
        self.tau_x.fill(px);
        self.tau_mu_lo.fill(pd);
        self.tau_mu_hi.fill(pd);
        self.tau_lambda = px;
    }
}

/// Diode limiting: every bounded primal and every bound dual is damped
/// separately so the iterate stays strictly interior with positive duals.
pub fn diode_step_lengths(vars: &[Variable], s: &KktState, u: &KktUpdate, config: &SolverConfig) -> StepLengths {
    let n = vars.len();
    let mut tau_x = vec![1.0; n];
    let mut tau_mu_lo = vec![1.0; n];
    let mut tau_mu_hi = vec![1.0; n];
    for (i, var) in vars.iter().enumerate() {
        tau_x[i] = primal_step_length(s.x[i], u.dx[i], var.lower, var.upper, config.gamma_x);
        if var.has_lower() {
            tau_mu_lo[i] = dual_step_length(s.mu_lo[i], u.dmu_lo[i], config.gamma_mu);
        }
        if var.has_upper() {
            tau_mu_hi[i] = dual_step_length(s.mu_hi[i], u.dmu_hi[i], config.gamma_mu);
        }
    }
    StepLengths { tau_x, tau_mu_lo, tau_mu_hi, tau_lambda: 1.0 }
}

/// Residual report for a candidate optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    /// All finite-bound duals strictly positive.
    pub signs_ok: bool,
    /// All primals strictly inside their bounds.
    pub interior_ok: bool,
    pub tol: f64,
}

impl KktReport {
    pub fn passed(&self) -> bool {
        self.stationarity <= self.tol
            && self.feasibility <= self.tol
            && self.complementarity <= self.tol
            && self.signs_ok
            && self.interior_ok
    }
}

pub fn check_kkt(problem: &dyn OptProblem, s: &KktState, epsilon: f64, tol: f64) -> KktReport {
    let vars = problem.variables();
    let res = residual(problem, s, epsilon);
    let signs_ok = vars
        .iter()
        .enumerate()
        .all(|(i, v)| (!v.has_lower() || s.mu_lo[i] > 0.0) && (!v.has_upper() || s.mu_hi[i] > 0.0));
    let interior_ok = vars.iter().enumerate().all(|(i, v)| v.is_strictly_inside(s.x[i]));
    KktReport {
        stationarity: res.stationarity_norm(),
        feasibility: res.feasibility_norm(),
        complementarity: res.complementarity_norm(),
        signs_ok,
        interior_ok,
        tol,
    }
}

/// Relaxed KKT residual at a packed unknown vector `z`.
pub fn residual_at(problem: &dyn OptProblem, layout: &KktLayout, z: &[f64], epsilon: f64) -> Vec<f64> {
    residual(problem, &layout.unpack_state(z), epsilon).flatten(layout)
}

/// Central finite-difference Jacobian of the relaxed KKT residual map, dense.
pub fn finite_difference_jacobian(problem: &dyn OptProblem, s: &KktState, epsilon: f64, h: f64) -> Vec<Vec<f64>> {
    let layout = KktLayout::new(problem.variables(), problem.num_constraints());
    let z0 = layout.pack(s);
    let dim = layout.dim();
    let mut jac = vec![vec![0.0; dim]; dim];
    let mut z = z0.clone();
    for c in 0..dim {
        let step = h * z0[c].abs().max(1.0);
        z[c] = z0[c] + step;
        let fp = residual_at(problem, &layout, &z, epsilon);
        z[c] = z0[c] - step;
        let fm = residual_at(problem, &layout, &z, epsilon);
        z[c] = z0[c];
        for r in 0..dim {
            jac[r][c] = (fp[r] - fm[r]) / (2.0 * step);
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::Qp;

    #[test]
    fn scalar_stationarity_row() {
        let p = Qp::new(vec![vec![2.0]], vec![0.0]).with_bounds(vec![(-1.0, 1.0)]);
        let s = KktState { x: vec![0.0], lambda: vec![], mu_lo: vec![0.3], mu_hi: vec![0.7] };
        let r = residual(&p, &s, 1e-6);
        // 2x + mu_hi - mu_lo
        assert_eq!(r.stationarity, vec![0.7 - 0.3]);
        assert!((r.comp_lo[0] - (-0.3 * 1.0 + 1e-6)).abs() < 1e-15);
        assert!((r.comp_hi[0] - (0.7 * -1.0 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn saddle_matrix_without_bounds() {
        // min x1^2 + x2^2  s.t.  x1 + x2 - 1 = 0
        let p = Qp::new(vec![vec![2.0, 0.0], vec![0.0, 2.0]], vec![0.0, 0.0]).with_equality(vec![vec![1.0, 1.0]], vec![1.0]);
        let s = KktState { x: vec![0.2, 0.3], lambda: vec![0.5], mu_lo: vec![0.0; 2], mu_hi: vec![0.0; 2] };
        let sys = build_kkt(&p, &s, &SolverConfig::default()).unwrap();
        let expected = vec![vec![2.0, 0.0, 1.0], vec![0.0, 2.0, 1.0], vec![1.0, 1.0, 0.0]];
        assert_eq!(sys.matrix.to_dense(), expected);
        assert_eq!(sys.rhs, vec![-(0.4 + 0.5), -(0.6 + 0.5), -(0.5 - 1.0)]);
    }

    #[test]
    fn complementarity_rows_are_appended() {
        let p = Qp::new(vec![vec![2.0]], vec![0.0]).with_bounds(vec![(-1.0, 2.0)]);
        let s = KktState { x: vec![0.5], lambda: vec![], mu_lo: vec![0.25], mu_hi: vec![0.125] };
        let m = build_kkt(&p, &s, &SolverConfig::default()).unwrap().matrix.to_dense();
        assert_eq!(m, vec![vec![2.0, -1.0, 1.0], vec![-0.25, -1.5, 0.0], vec![0.125, 0.0, -1.5]]);
    }

    #[test]
    fn matrix_matches_finite_differences() {
        let p = Qp::random(7, 5, 2, true);
        let s = p.random_interior_state(11);
        let sys = build_kkt(&p, &s, &SolverConfig::default()).unwrap();
        let fd = finite_difference_jacobian(&p, &s, 1e-6, 1e-6);
        let a = sys.matrix.to_dense();
        for (ra, rf) in a.iter().zip(&fd) {
            for (x, y) in ra.iter().zip(rf) {
                assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn non_interior_state_is_rejected() {
        let p = Qp::new(vec![vec![2.0]], vec![0.0]).with_bounds(vec![(0.0, 1.0)]);
        let s = KktState { x: vec![1.0], lambda: vec![], mu_lo: vec![1.0], mu_hi: vec![1.0] };
        assert!(matches!(build_kkt(&p, &s, &SolverConfig::default()), Err(KktError::NotInterior { .. })));
        let s = KktState { x: vec![0.5], lambda: vec![], mu_lo: vec![0.0], mu_hi: vec![1.0] };
        assert!(matches!(build_kkt(&p, &s, &SolverConfig::default()), Err(KktError::NonPositiveDual { .. })));
    }

    #[test]
    fn hand_step_lengths() {
        assert_eq!(dual_step_length(1.0, -2.0, 0.95), 0.475);
        assert_eq!(dual_step_length(1.0, 0.0, 0.95), 1.0);
        assert_eq!(dual_step_length(1.0, 3.0, 0.95), 1.0);
        assert!((primal_step_length(0.9, 0.2, f64::NEG_INFINITY, 1.0, 0.95) - 0.475).abs() < 1e-15);
        assert!((primal_step_length(-0.9, -0.2, -1.0, f64::INFINITY, 0.95) - 0.475).abs() < 1e-15);
        assert_eq!(primal_step_length(0.9, -0.2, f64::NEG_INFINITY, 1.0, 0.95), 1.0);
        assert_eq!(primal_step_length(0.0, 0.01, -1.0, 1.0, 0.95), 1.0);
    }

    #[test]
    fn each_bound_limited_separately() {
        let vars = vec![Variable::bounded("a", 0.0, 1.0), Variable::bounded("b", 0.0, 1.0)];
        let s = KktState { x: vec![0.9, 0.5], lambda: vec![], mu_lo: vec![1.0, 1.0], mu_hi: vec![1.0, 1.0] };
        let u = KktUpdate { dx: vec![0.2, 0.1], dlambda: vec![], dmu_lo: vec![-2.0, 0.5], dmu_hi: vec![0.0, -0.1] };
        let t = diode_step_lengths(&vars, &s, &u, &SolverConfig::default());
        assert!((t.tau_x[0] - 0.475).abs() < 1e-15);
        assert_eq!(t.tau_x[1], 1.0);
        assert_eq!(t.tau_mu_lo, vec![0.475, 1.0]);
        assert_eq!(t.tau_mu_hi, vec![1.0, 1.0]);
        assert!((t.min() - 0.475).abs() < 1e-15);
    }

    #[test]
    fn negative_dual_fails_sign_check() {
        let p = Qp::new(vec![vec![2.0]], vec![0.0]).with_bounds(vec![(-1.0, 1.0)]);
        let s = KktState { x: vec![0.0], lambda: vec![], mu_lo: vec![-1e-6], mu_hi: vec![1e-6] };
        let r = check_kkt(&p, &s, 1e-6, 1e-6);
        assert!(!r.signs_ok);
        assert!(!r.passed());
    }

    #[test]
    fn unknown_names_cover_every_block() {
        let p = Qp::new(vec![vec![1.0]], vec![0.0]).with_bounds(vec![(0.0, 1.0)]).with_equality(vec![vec![1.0]], vec![0.5]);
        let l = KktLayout::new(p.variables(), 1);
        let names: Vec<_> = (0..l.dim()).map(|i| l.unknown_name(&p, i)).collect();
        assert_eq!(names, vec!["x0", "lambda[g[0]]", "mu_lo[x0]", "mu_hi[x0]"]);
    }
}
