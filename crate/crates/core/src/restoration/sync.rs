use serde::{Deserialize, Serialize};
use thiserror::Error;

use blackstart_pdip::{solve, IterationRecord, SolverConfig};

use super::problem::{BoundaryTarget, GenSpec, GridProblem, ProblemError, DPG, Q};
use super::{initial_point, StepBounds, DEFAULT_WEIGHT};
use crate::netmodel::{islands, Network};
use crate::powerflow::{solve_with, PfError, PfMode, PfOptions, SmoothLimitParams};

pub const DEFAULT_FLAG_THRESHOLD: f64 = 1e-4;

/// The message one island sends another: three physical scalars at the
/// interconnection bus plus routing metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryState {
    pub bus: u32,
    pub v_mag: f64,
    /// Degrees.
    pub theta: f64,
    /// Hz.
    pub delta_f: f64,
    pub island_id: String,
    pub timestamp: f64,
}

impl BoundaryState {
    pub fn v_real(&self) -> f64 {
        self.v_mag * self.theta.to_radians().cos()
    }

    pub fn v_imag(&self) -> f64 {
        self.v_mag * self.theta.to_radians().sin()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SyncError {
    #[error("island is not fully energized")]
    NotFullyEnergized,
    #[error("bus {0} has no solved voltage")]
    NoState(u32),
    #[error("boundary bus {0} is not in the island")]
    BoundaryNotInIsland(u32),
    #[error("no participating generators")]
    NoParticipants,
    #[error("generator {0} is not an energized unit of the island")]
    UnknownParticipant(u32),
    #[error("invalid boundary state: {0}")]
    InvalidBoundary(String),
    #[error(transparent)]
    PowerFlow(#[from] PfError),
}

/// Boundary message from a solved, fully energized network.
pub fn boundary_state(net: &Network, bus: u32, island_id: &str, timestamp: f64) -> Result<BoundaryState, SyncError> {
    if !net.is_fully_energized() {
        return Err(SyncError::NotFullyEnergized);
    }
    let v = net.bus(bus).ok_or(SyncError::BoundaryNotInIsland(bus))?.voltage().ok_or(SyncError::NoState(bus))?;
    Ok(BoundaryState {
        bus,
        v_mag: v.norm(),
        theta: v.arg().to_degrees(),
        delta_f: net.delta_f,
        island_id: island_id.to_string(),
        timestamp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncOptions {
    pub weight: f64,
    pub bounds: StepBounds,
    pub solver: SolverConfig,
    pub pf: PfOptions,
    pub flag_threshold: f64,
}

impl Default for SyncOptions {
    fn default() -> Self {
        Self {
            weight: DEFAULT_WEIGHT,
            bounds: StepBounds::default(),
            solver: SolverConfig::default(),
            pf: PfOptions::default(),
            flag_threshold: DEFAULT_FLAG_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageDeviation {
    pub bus: u32,
    /// Squared-magnitude deviation from the set-point, pu².
    pub dvsq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSetpoint {
    pub id: u32,
    pub bus: u32,
    pub delta_p: f64,
    pub p_set: f64,
    pub q_set: f64,
    pub v_set: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRecommendation {
    pub converged: bool,
    pub objective: f64,
    pub generators: Vec<SyncSetpoint>,
    /// Island-1 state at the boundary bus after the solve.
    pub local: BoundaryState,
    pub remote: BoundaryState,
    pub deviations: Vec<VoltageDeviation>,
    pub flagged: Vec<VoltageDeviation>,
    pub telemetry: Vec<IterationRecord>,
    pub diagnostics: Vec<String>,
}

fn island_of(net: &Network, bus: u32) -> Result<Vec<u32>, SyncError> {
    islands(net).into_iter().find(|isl| isl.contains(&bus)).ok_or(SyncError::BoundaryNotInIsland(bus))
}

/// Problem matching island 1's state at `local_bus` to the values island 2
/// reports for its end of the tie. Participating generators move their
/// active power within ramp limits and release their voltage regulation;
/// all others keep their set-points.
pub fn build_sync_problem(
    island1: &Network,
    local_bus: u32,
    remote: &BoundaryState,
    participating: &[u32],
    weight: f64,
    bounds: &StepBounds,
) -> Result<GridProblem, SyncError> {
    if !(remote.v_mag > 0.0) || !remote.theta.is_finite() || !remote.delta_f.is_finite() {
        return Err(SyncError::InvalidBoundary(format!("{remote:?}")));
    }
    if participating.is_empty() {
        return Err(SyncError::NoParticipants);
    }
    let part = island_of(island1, local_bus)?;
    for &id in participating {
        let ok = island1.generator(id).is_some_and(|g| g.energized && part.contains(&g.bus));
        if !ok {
            return Err(SyncError::UnknownParticipant(id));
        }
    }
    let mut gens = Vec::new();
    for (index, g) in island1.generators.iter().enumerate() {
        if !g.energized || !part.contains(&g.bus) {
            continue;
        }
        let moves = participating.contains(&g.id);
        gens.push(GenSpec {
            index,
            id: g.id,
            bus: g.bus,
            p_target: g.p_set,
            dpg_bounds: moves.then_some((g.ramp_min, g.ramp_max)),
            droop_gain: g.droop_gain,
            p_bounds: (g.p_min, g.p_max),
            q_bounds: (g.q_min, g.q_max),
            v_set: g.v_set,
            regulates: !moves,
            saturation: (!moves).then_some(SmoothLimitParams::default().sharpness),
        });
    }
    let target = BoundaryTarget { bus: local_bus, v_real: remote.v_real(), v_imag: remote.v_imag(), delta_f: remote.delta_f };
    let vb = |b: u32| island1.voltage_bounds(b, (bounds.v_min, bounds.v_max));
    GridProblem::new(island1, &[part], &[None], gens, &vb, (bounds.delta_f_min, bounds.delta_f_max), Some(target), weight)
        .map_err(|e| match e {
            ProblemError::UnknownBus(b) => SyncError::BoundaryNotInIsland(b),
            ProblemError::NoReference(_) => SyncError::BoundaryNotInIsland(local_bus),
        })
}

/// Set-point recommendation that brings island 1 to the remote boundary
/// state. Nothing is applied to the network.
pub fn synchronize(
    island1: &Network,
    local_bus: u32,
    remote: &BoundaryState,
    participating: &[u32],
    opts: &SyncOptions,
) -> Result<SyncRecommendation, SyncError> {
    if !island1.is_fully_energized() {
        return Err(SyncError::NotFullyEnergized);
    }
    let problem = build_sync_problem(island1, local_bus, remote, participating, opts.weight, &opts.bounds)?;
    let gpf = solve_with(island1, PfMode::Governor, &opts.pf).ok();
    let x0 = initial_point(&problem, island1, gpf.as_ref());
    let mut diagnostics = Vec::new();
    let (x, converged, objective, telemetry) = match solve(&problem, &x0, &opts.solver) {
        Ok(sol) => {
            if !sol.converged {
                diagnostics.push(format!(
                    "optimizer stopped after {} iterations: kkt residual {:.3e}; indeterminate",
                    sol.iterations, sol.kkt_residual
                ));
            }
            (sol.x, sol.converged, sol.objective, sol.trace)
        }
        Err(e) => {
            diagnostics.push(format!("optimizer failed: {e}; indeterminate"));
            (x0, false, f64::NAN, Vec::new())
        }
    };

    let mut generators = Vec::new();
    for (g, spec) in problem.gens.iter().enumerate() {
        if spec.dpg_bounds.is_none() {
            continue;
        }
        let i = problem.bus_index(spec.bus).expect("generator bus in problem");
        generators.push(SyncSetpoint {
            id: spec.id,
            bus: spec.bus,
            delta_p: x[problem.gen_var(g, DPG)],
            p_set: spec.p_target + x[problem.gen_var(g, DPG)],
            q_set: x[problem.gen_var(g, Q)],
            v_set: x[problem.vr(i)].hypot(x[problem.vi(i)]),
        });
    }
    let b = problem.bus_index(local_bus).expect("boundary bus in problem");
    let (vr, vi) = (x[problem.vr(b)], x[problem.vi(b)]);
    let local = BoundaryState {
        bus: local_bus,
        v_mag: vr.hypot(vi),
        theta: vi.atan2(vr).to_degrees(),
        delta_f: x[problem.df(0)],
        island_id: island1.name.clone(),
        timestamp: remote.timestamp,
    };
    let deviations: Vec<VoltageDeviation> = problem
        .regulated_buses()
        .into_iter()
        .enumerate()
        .map(|(k, bus)| VoltageDeviation { bus, dvsq: x[problem.dev_var(k)] / problem.weight })
        .collect();
    let flagged = flag_voltage_issues(&deviations, opts.flag_threshold);
    Ok(SyncRecommendation {
        converged,
        objective,
        generators,
        local,
        remote: remote.clone(),
        deviations,
        flagged,
        telemetry,
        diagnostics,
    })
}

/// Regulated buses whose squared-voltage deviation exceeds `threshold`,
/// largest first.
pub fn flag_voltage_issues(deviations: &[VoltageDeviation], threshold: f64) -> Vec<VoltageDeviation> {
    let mut out: Vec<VoltageDeviation> = deviations.iter().copied().filter(|d| d.dvsq.abs() > threshold).collect();
    out.sort_by(|a, b| b.dvsq.abs().total_cmp(&a.dvsq.abs()));
    out
}
