//! Crank-path validation and actuation.
//!
//! Each step is first checked with the governor power flow at the crank
//! dispatch. If frequency, voltages, generator limits and ramps all hold,
//! the step gets a go-ahead with no correction. Otherwise the grid
//! optimization finds the smallest set-point corrections that restore
//! feasibility.

mod problem;
mod sync;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use blackstart_pdip::{solve, IterationRecord, OptProblem, SolveError, SolverConfig};

use crate::netmodel::{apply_energization_with, islands, CrankPath, CrankStep, EnergizeError, Network};
use crate::powerflow::{solve_with, PFSolution, PfError, PfMode, PfOptions};

pub use problem::{BoundaryTarget, GenSpec, GridProblem, ProblemError};
pub use sync::{
    boundary_state, build_sync_problem, flag_voltage_issues, synchronize, BoundaryState, SyncError, SyncOptions,
    SyncRecommendation, SyncSetpoint, VoltageDeviation, DEFAULT_FLAG_THRESHOLD,
};

pub(crate) use problem::{DPG, DPP, P, PTOT, Q};

/// Default weight on squared-voltage deviations at regulated buses.
pub const DEFAULT_WEIGHT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepBounds {
    pub delta_f_min: f64,
    pub delta_f_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for StepBounds {
    fn default() -> Self {
        Self { delta_f_min: -1.2, delta_f_max: 1.2, v_min: 0.9, v_max: 1.1 }
    }
}

impl StepBounds {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.delta_f_min < self.delta_f_max) {
            return Err("delta_f_min must be below delta_f_max".into());
        }
        if !(0.0 < self.v_min && self.v_min < self.v_max) {
            return Err("need 0 < v_min < v_max".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestorationConfig {
    pub solver: SolverConfig,
    pub pf: PfOptions,
    pub weight: f64,
    pub loading_factor: f64,
    /// Tolerance on bound checks of reported states.
    pub feasibility_tol: f64,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            pf: PfOptions::default(),
            weight: DEFAULT_WEIGHT,
            loading_factor: 1.0,
            feasibility_tol: 1e-6,
        }
    }
}

/// Actuated active set-point per generator id.
pub type DispatchMap = BTreeMap<u32, f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RestorationError {
    #[error(transparent)]
    Energize(#[from] EnergizeError),
    #[error(transparent)]
    PowerFlow(#[from] PfError),
    #[error("no previous set-point for generator {generator}, energized before this step")]
    MissingDispatch { generator: u32 },
    #[error("step {step} report is not feasible and cannot be actuated")]
    NotFeasible { step: u32 },
    #[error("report is for step {report}, not step {step}")]
    StepMismatch { step: u32, report: u32 },
    #[error("invalid bounds: {0}")]
    Bounds(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    /// Governor power flow at the crank dispatch violates nothing.
    GoAhead,
    /// Corrections found that satisfy every bound.
    Corrected,
    /// Solver converged but a bound is violated beyond tolerance.
    Infeasible,
    /// Solver failed; see diagnostics.
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorAction {
    pub id: u32,
    pub bus: u32,
    /// Crank-path target `P^C`.
    pub p_crank: f64,
    pub delta_p: f64,
    /// Set-point to actuate, `P^C + ΔP`.
    pub p_set: f64,
    pub p_out: f64,
    pub q_out: f64,
    /// Recommended voltage set-point, the solved magnitude at the bus.
    pub v_set: f64,
    pub q_limit_violated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusState {
    pub bus: u32,
    pub v_real: f64,
    pub v_imag: f64,
}

impl BusState {
    pub fn v_mag(&self) -> f64 {
        self.v_real.hypot(self.v_imag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u32,
    pub status: StepStatus,
    pub feasible: bool,
    pub loading_factor: f64,
    pub delta_f: f64,
    /// Frequency deviation of the uncorrected governor power flow.
    pub governor_delta_f: Option<f64>,
    pub v_min: f64,
    pub v_max: f64,
    pub generators: Vec<GeneratorAction>,
    /// Signed correction of largest magnitude.
    pub max_delta_p: f64,
    pub max_delta_p_bus: Option<u32>,
    /// Active output of the reference generator.
    pub slack_p: f64,
    pub objective: f64,
    pub buses: Vec<BusState>,
    pub voltage_deviations: Vec<VoltageDeviation>,
    pub telemetry: Vec<IterationRecord>,
    pub diagnostics: Vec<String>,
}

impl StepReport {
    pub fn delta_p(&self, generator: u32) -> Option<f64> {
        self.generators.iter().find(|g| g.id == generator).map(|g| g.delta_p)
    }

    pub fn delta_p_norm_inf(&self) -> f64 {
        self.generators.iter().map(|g| g.delta_p.abs()).fold(0.0, f64::max)
    }

    pub fn delta_p_sum(&self) -> f64 {
        self.generators.iter().map(|g| g.delta_p).sum()
    }

    pub fn dispatch(&self) -> DispatchMap {
        self.generators.iter().map(|g| (g.id, g.p_set)).collect()
    }
}

/// Actuated set-points of all energized generators.
pub fn dispatch_of(net: &Network) -> DispatchMap {
    net.generators.iter().filter(|g| g.energized).map(|g| (g.id, g.p_set)).collect()
}

/// Copy of `net` with every energized generator back at its crank target.
fn at_crank_dispatch(net: &Network) -> Network {
    let mut out = net.clone();
    for g in out.generators.iter_mut().filter(|g| g.energized) {
        g.p_set = g.crank_p();
    }
    out
}

struct Check {
    ok: bool,
    reasons: Vec<String>,
}

fn check_pf(net: &Network, pf: &PFSolution, prev: &DispatchMap, bounds: &StepBounds, tol: f64) -> Check {
    let mut reasons = Vec::new();
    for isl in &pf.islands {
        if isl.delta_f < bounds.delta_f_min - tol || isl.delta_f > bounds.delta_f_max + tol {
            reasons.push(format!("frequency deviation {:.4} Hz outside bounds", isl.delta_f));
        }
    }
    for (k, &b) in pf.buses.iter().enumerate() {
        let v = pf.v_real[k].hypot(pf.v_imag[k]);
        let (lo, hi) = net.voltage_bounds(b, (bounds.v_min, bounds.v_max));
        if v < lo - tol || v > hi + tol {
            reasons.push(format!("bus {b} voltage {v:.4} outside [{lo}, {hi}]"));
        }
    }
    for o in &pf.generators {
        let g = net.generator(o.id).expect("solution generator exists");
        if o.p_out < g.p_min - tol || o.p_out > g.p_max + tol {
            reasons.push(format!("generator {} output {:.4} outside limits", g.id, o.p_out));
        }
        if let Some(&p_prev) = prev.get(&g.id) {
            let step = g.crank_p() - p_prev;
            if step < g.ramp_min - tol || step > g.ramp_max + tol {
                reasons.push(format!("generator {} ramp {:.4} outside limits", g.id, step));
            }
        }
    }
    Check { ok: reasons.is_empty(), reasons }
}

/// Builds the crank-step problem over the energized network `snapshot`
/// (the step already applied, generators at their crank targets).
pub fn build_crank_problem(
    snapshot: &Network,
    prev: &DispatchMap,
    bounds: &StepBounds,
    weight: f64,
) -> Result<GridProblem, RestorationError> {
    let parts = islands(snapshot);
    if parts.is_empty() {
        return Err(PfError::NothingEnergized.into());
    }
    let mut refs = Vec::new();
    for part in &parts {
        let r = snapshot.energized_generators().find(|g| g.is_reference && part.contains(&g.bus)).map(|g| g.bus);
        if r.is_none() {
            return Err(PfError::NoReference { island: part.clone() }.into());
        }
        refs.push(r);
    }
    let mut gens = Vec::new();
    for (index, g) in snapshot.generators.iter().enumerate() {
        if !g.energized || !snapshot.is_energized(g.bus) {
            continue;
        }
        let p_c = g.crank_p();
        let dpg_bounds = prev.get(&g.id).map(|&p_prev| (g.ramp_min + p_prev - p_c, g.ramp_max + p_prev - p_c));
        gens.push(GenSpec {
            index,
            id: g.id,
            bus: g.bus,
            p_target: p_c,
            dpg_bounds: Some(dpg_bounds.unwrap_or((f64::NEG_INFINITY, f64::INFINITY))),
            droop_gain: g.droop_gain,
            p_bounds: (g.p_min, g.p_max),
            q_bounds: (g.q_min, g.q_max),
            v_set: g.v_set,
            regulates: true,
            saturation: None,
        });
    }
    let vb = |b: u32| snapshot.voltage_bounds(b, (bounds.v_min, bounds.v_max));
    GridProblem::new(snapshot, &parts, &refs, gens, &vb, (bounds.delta_f_min, bounds.delta_f_max), None, weight)
        .map_err(|e| match e {
            ProblemError::NoReference(island) => PfError::NoReference { island }.into(),
            ProblemError::UnknownBus(b) => PfError::NoReference { island: vec![b] }.into(),
        })
}

/// Shifts set-points so the governor power flow lands inside the frequency
/// bounds, splitting the shortfall evenly within each island. Returns the
/// shifted network and its power flow; used only to start the optimizer.
fn frequency_warm_start(
    snapshot: &Network,
    problem: &GridProblem,
    bounds: &StepBounds,
    pf: &PfOptions,
    first: Option<PFSolution>,
) -> (Network, Option<PFSolution>) {
    let margin = 1e-3 * (bounds.delta_f_max - bounds.delta_f_min);
    let mut net = snapshot.clone();
    let mut sol = first;
    for _ in 0..6 {
        let Some(s) = &sol else { break };
        let mut moved = false;
        for isl in &s.islands {
            let target = isl.delta_f.clamp(bounds.delta_f_min + margin, bounds.delta_f_max - margin);
            if target == isl.delta_f {
                continue;
            }
            let members: Vec<&GenSpec> = problem.gens.iter().filter(|g| isl.buses.contains(&g.bus)).collect();
            let gain: f64 = members.iter().map(|g| g.droop_gain).sum();
            if members.is_empty() || gain <= 0.0 {
                continue;
            }
            let each = gain * (target - isl.delta_f) / members.len() as f64;
            for spec in members {
                let gen = &mut net.generators[spec.index];
                let (lo, hi) = spec.dpg_bounds.unwrap_or((0.0, 0.0));
                let dpg = (gen.p_set - spec.p_target + each).clamp(lo + margin, hi - margin);
                gen.p_set = spec.p_target + dpg;
            }
            moved = true;
        }
        if !moved {
            break;
        }
        sol = solve_with(&net, PfMode::Governor, pf).ok();
    }
    match sol {
        Some(s) => (net, Some(s)),
        None => (snapshot.clone(), None),
    }
}

/// Starting point from a governor power flow, or flat when unavailable.
/// Generator set-points in `net` above their targets start as corrections.
pub fn initial_point(problem: &GridProblem, net: &Network, pf: Option<&PFSolution>) -> Vec<f64> {
    let mut x = vec![0.0; problem.num_variables()];
    for (i, &b) in problem.buses.iter().enumerate() {
        let v = pf.and_then(|s| s.voltage(b)).unwrap_or(num_complex::Complex64::new(1.0, 0.0));
        x[problem.vr(i)] = v.re;
        x[problem.vi(i)] = v.im;
        x[problem.vsq(i)] = v.norm_sqr();
    }
    for k in 0..problem.n_islands() {
        let bus = (0..problem.n_bus()).find(|&i| problem.island_of_bus(i) == k).map(|i| problem.buses[i]);
        x[problem.df(k)] = pf
            .zip(bus)
            .and_then(|(s, b)| s.islands.iter().find(|isl| isl.buses.contains(&b)))
            .map_or(0.0, |isl| isl.delta_f);
    }
    for (g, spec) in problem.gens.iter().enumerate() {
        let gen = &net.generators[spec.index];
        let df = x[problem.df(problem.island_of_bus(problem.bus_index(spec.bus).unwrap()))];
        let q = pf.and_then(|s| s.generator(spec.id)).map_or(gen.q_set, |o| o.q_out);
        x[problem.gen_var(g, P)] = spec.p_target;
        x[problem.gen_var(g, Q)] = q;
        let dpp = spec.droop(crate::ad::Jet::<1>::constant(df)).v;
        x[problem.gen_var(g, DPP)] = dpp;
        let dpg = if spec.dpg_bounds.is_some() { gen.p_set - spec.p_target } else { 0.0 };
        x[problem.gen_var(g, DPG)] = dpg;
        x[problem.gen_var(g, PTOT)] = spec.p_target + dpp + dpg;
    }
    x
}

/// Validates one crank step against the network state before the step.
pub fn validate_step(
    net: &Network,
    step: &CrankStep,
    prev: &DispatchMap,
    bounds: &StepBounds,
    config: &RestorationConfig,
) -> Result<StepReport, RestorationError> {
    bounds.validate().map_err(RestorationError::Bounds)?;
    for g in net.generators.iter().filter(|g| g.energized) {
        if !prev.contains_key(&g.id) && !step.generators.contains(&g.id) {
            return Err(RestorationError::MissingDispatch { generator: g.id });
        }
    }
    let snapshot = at_crank_dispatch(&apply_energization_with(net, step, config.loading_factor)?);
    // On re-validation the step is already applied; ramps still refer to the
    // dispatch before it.
    let gpf = match solve_with(&snapshot, PfMode::Governor, &config.pf) {
        Ok(s) => Some(s),
        Err(e @ (PfError::NoReference { .. } | PfError::MultipleReferences { .. } | PfError::NothingEnergized)) => {
            return Err(e.into())
        }
        Err(_) => None,
    };
    let mut diagnostics = Vec::new();
    if let Some(pf) = &gpf {
        let check = check_pf(&snapshot, pf, prev, bounds, config.feasibility_tol);
        if check.ok {
            return Ok(go_ahead_report(&snapshot, step.sequence, pf, config.loading_factor));
        }
        diagnostics.extend(check.reasons);
    } else {
        diagnostics.push("governor power flow did not converge at the crank dispatch".into());
    }

    let problem = build_crank_problem(&snapshot, prev, bounds, config.weight)?;
    let (start, start_pf) = frequency_warm_start(&snapshot, &problem, bounds, &config.pf, gpf.clone());
    let x0 = initial_point(&problem, &start, start_pf.as_ref());
    let mut report = match solve(&problem, &x0, &config.solver) {
        Ok(sol) if sol.converged => {
            let mut r = report_from_solution(&snapshot, step.sequence, &problem, &sol.x, config.loading_factor);
            r.objective = sol.objective;
            r.telemetry = sol.trace;
            let violations = check_report(&snapshot, &r, bounds, config.feasibility_tol);
            if violations.is_empty() {
                r.status = StepStatus::Corrected;
                r.feasible = true;
            } else {
                r.status = StepStatus::Infeasible;
                diagnostics.extend(violations);
            }
            r
        }
        Ok(sol) => {
            let mut r = report_from_solution(&snapshot, step.sequence, &problem, &sol.x, config.loading_factor);
            r.status = StepStatus::Indeterminate;
            r.objective = sol.objective;
            diagnostics.push(format!(
                "optimizer stopped after {} iterations: kkt residual {:.3e}, complementarity residual {:.3e}; infeasible or hard to solve",
                sol.iterations, sol.kkt_residual, sol.complementarity_residual
            ));
            r.telemetry = sol.trace;
            r
        }
        Err(e) => {
            let mut r = report_from_solution(&snapshot, step.sequence, &problem, &x0, config.loading_factor);
            r.status = StepStatus::Indeterminate;
            diagnostics.push(describe_solve_error(&e));
            r
        }
    };
    report.governor_delta_f = gpf.as_ref().map(|s| s.delta_f);
    report.diagnostics = diagnostics;
    Ok(report)
}

fn describe_solve_error(e: &SolveError) -> String {
    format!("optimizer failed: {e}; infeasible or hard to solve")
}

fn go_ahead_report(net: &Network, step: u32, pf: &PFSolution, loading_factor: f64) -> StepReport {
    let mut generators = Vec::new();
    for o in &pf.generators {
        let g = net.generator(o.id).expect("solution generator exists");
        let v = pf.voltage(g.bus).map_or(g.v_set, |v| v.norm());
        generators.push(GeneratorAction {
            id: g.id,
            bus: g.bus,
            p_crank: g.crank_p(),
            delta_p: 0.0,
            p_set: g.crank_p(),
            p_out: o.p_out,
            q_out: o.q_out,
            v_set: v,
            q_limit_violated: o.q_out < g.q_min || o.q_out > g.q_max,
        });
    }
    let buses: Vec<BusState> =
        pf.buses.iter().enumerate().map(|(k, &bus)| BusState { bus, v_real: pf.v_real[k], v_imag: pf.v_imag[k] }).collect();
    finish_report(net, step, StepStatus::GoAhead, true, pf.delta_f, Some(pf.delta_f), generators, buses, Vec::new(), loading_factor)
}

#[allow(clippy::too_many_arguments)]
fn finish_report(
    net: &Network,
    step: u32,
    status: StepStatus,
    feasible: bool,
    delta_f: f64,
    governor_delta_f: Option<f64>,
    generators: Vec<GeneratorAction>,
    buses: Vec<BusState>,
    voltage_deviations: Vec<VoltageDeviation>,
    loading_factor: f64,
) -> StepReport {
    let (v_min, v_max) = buses.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b.v_mag()), hi.max(b.v_mag())));
    let worst = generators.iter().max_by(|a, b| a.delta_p.abs().total_cmp(&b.delta_p.abs()));
    let (max_delta_p, max_delta_p_bus) = match worst {
        Some(g) if g.delta_p != 0.0 => (g.delta_p, Some(g.bus)),
        _ => (0.0, None),
    };
    let slack_p = generators
        .iter()
        .find(|a| net.generator(a.id).is_some_and(|g| g.is_reference))
        .map_or(0.0, |a| a.p_out);
    StepReport {
        step,
        status,
        feasible,
        loading_factor,
        delta_f,
        governor_delta_f,
        v_min,
        v_max,
        generators,
        max_delta_p,
        max_delta_p_bus,
        slack_p,
        objective: 0.0,
        buses,
        voltage_deviations,
        telemetry: Vec::new(),
        diagnostics: Vec::new(),
    }
}

fn report_from_solution(net: &Network, step: u32, problem: &GridProblem, x: &[f64], loading_factor: f64) -> StepReport {
    let buses: Vec<BusState> = problem
        .buses
        .iter()
        .enumerate()
        .map(|(i, &bus)| BusState { bus, v_real: x[problem.vr(i)], v_imag: x[problem.vi(i)] })
        .collect();
    let mut generators = Vec::new();
    for (g, spec) in problem.gens.iter().enumerate() {
        let gen = &net.generators[spec.index];
        let i = problem.bus_index(spec.bus).expect("generator bus in problem");
        let q = x[problem.gen_var(g, Q)];
        let delta_p = x[problem.gen_var(g, DPG)];
        generators.push(GeneratorAction {
            id: spec.id,
            bus: spec.bus,
            p_crank: spec.p_target,
            delta_p,
            p_set: spec.p_target + delta_p,
            p_out: x[problem.gen_var(g, PTOT)],
            q_out: q,
            v_set: x[problem.vr(i)].hypot(x[problem.vi(i)]),
            q_limit_violated: q < gen.q_min || q > gen.q_max,
        });
    }
    let deviations = problem
        .regulated_buses()
        .into_iter()
        .enumerate()
        .map(|(k, bus)| VoltageDeviation { bus, dvsq: x[problem.dev_var(k)] / problem.weight })
        .collect();
    let delta_f = x[problem.df(0)];
    finish_report(net, step, StepStatus::Indeterminate, false, delta_f, None, generators, buses, deviations, loading_factor)
}

fn check_report(net: &Network, r: &StepReport, bounds: &StepBounds, tol: f64) -> Vec<String> {
    let mut out = Vec::new();
    if r.delta_f < bounds.delta_f_min - tol || r.delta_f > bounds.delta_f_max + tol {
        out.push(format!("frequency deviation {:.6} Hz outside bounds", r.delta_f));
    }
    for b in &r.buses {
        let (lo, hi) = net.voltage_bounds(b.bus, (bounds.v_min, bounds.v_max));
        if b.v_mag() < lo - tol || b.v_mag() > hi + tol {
            out.push(format!("bus {} voltage {:.6} outside [{lo}, {hi}]", b.bus, b.v_mag()));
        }
    }
    out
}

/// Energizes the step and moves generators to the validated set-points.
pub fn actuate_step(net: &Network, step: &CrankStep, report: &StepReport, loading_factor: f64) -> Result<Network, RestorationError> {
    if report.step != step.sequence {
        return Err(RestorationError::StepMismatch { step: step.sequence, report: report.step });
    }
    if !report.feasible {
        return Err(RestorationError::NotFeasible { step: step.sequence });
    }
    let mut out = apply_energization_with(net, step, loading_factor)?;
    for a in &report.generators {
        if let Some(g) = out.generator_mut(a.id) {
            g.p_set = a.p_set;
            g.v_set = a.v_set;
        }
    }
    for b in &report.buses {
        if let Some(bus) = out.bus_mut(b.bus) {
            bus.v_real = Some(b.v_real);
            bus.v_imag = Some(b.v_imag);
        }
    }
    out.delta_f = report.delta_f;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationRun {
    pub reports: Vec<StepReport>,
    pub network: Network,
    /// Step at which the run stopped early, if any.
    pub halted_at: Option<u32>,
}

/// Validates and actuates every step in order, stopping at the first step
/// that is not feasible.
pub fn run_restoration(
    net: &Network,
    path: &CrankPath,
    bounds: &StepBounds,
    config: &RestorationConfig,
) -> Result<RestorationRun, RestorationError> {
    let mut current = net.clone();
    let mut reports = Vec::new();
    for step in &path.steps {
        let prev = dispatch_of(&current);
        let report = validate_step(&current, step, &prev, bounds, config)?;
        if !report.feasible {
            let seq = report.step;
            reports.push(report);
            return Ok(RestorationRun { reports, network: current, halted_at: Some(seq) });
        }
        current = actuate_step(&current, step, &report, config.loading_factor)?;
        reports.push(report);
    }
    Ok(RestorationRun { reports, network: current, halted_at: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampViolation {
    pub generator: u32,
    pub step: u32,
    pub change: f64,
    pub ramp_min: f64,
    pub ramp_max: f64,
}

/// Checks set-point changes between consecutive reports against each
/// generator's ramp range. A generator's first step has no predecessor.
pub fn audit_ramps(net: &Network, reports: &[StepReport], tol: f64) -> Vec<RampViolation> {
    let mut out = Vec::new();
    for pair in reports.windows(2) {
        let before = pair[0].dispatch();
        for a in &pair[1].generators {
            let Some(&p_prev) = before.get(&a.id) else { continue };
            let Some(g) = net.generator(a.id) else { continue };
            let change = a.p_set - p_prev;
            if change < g.ramp_min - tol || change > g.ramp_max + tol {
                out.push(RampViolation { generator: a.id, step: pair[1].step, change, ramp_min: g.ramp_min, ramp_max: g.ramp_max });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
