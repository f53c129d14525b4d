#![allow(dead_code)]

use blackstart_core::netmodel::{islands, load_case, load_crankpath, Branch, CrankPath, Network};
use blackstart_core::powerflow::{IslandSystem, PFSolution, PfMode, SmoothLimitParams};
use blackstart_core::restoration::{run_restoration, RestorationConfig, StepBounds};
use blackstart_pdip::kkt::{build_kkt, finite_difference_jacobian};
use blackstart_pdip::SolverConfig;
pub use blackstart_pdip::{KktState, OptProblem, Triplets, Variable};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[path = "../../../pdip/src/testing.rs"]
mod testing;

#[allow(unused_imports)]
pub use testing::Qp;

pub const POINTS: u64 = 20;
pub const REL_TOL: f64 = 1e-5;

pub fn data(name: &str) -> String {
    std::fs::read_to_string(format!("{}/../../data/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

pub fn case39() -> (Network, CrankPath) {
    let net = load_case(&data("ieee39.toml")).unwrap();
    let path = load_crankpath(&data("table1_crankpath.toml"), &net).unwrap();
    (net, path)
}

/// Terminal currents of one branch, written out from the ideal transformer
/// on the from side followed by the pi section.
pub fn branch_currents(br: &Branch, vf: Complex64, vt: Complex64) -> (Complex64, Complex64) {
    let y = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
    let shunt = Complex64::new(0.0, br.b / 2.0);
    let vf_inner = vf / br.tap;
    let i_series = (vf_inner - vt) * y;
    let i_from_inner = i_series + shunt * vf_inner;
    let i_to = -i_series + shunt * vt;
    (i_from_inner / br.tap, i_to)
}

/// Per-bus current balance and total series/shunt losses computed branch by
/// branch from a solution's voltages.
pub fn branch_balance(net: &Network, sol: &PFSolution) -> (f64, f64) {
    let v = |b: u32| sol.voltage(b).unwrap();
    let mut mismatch: std::collections::BTreeMap<u32, Complex64> = sol.buses.iter().map(|&b| (b, Complex64::new(0.0, 0.0))).collect();
    let mut losses = 0.0;
    for br in net.in_service_branches() {
        let (vf, vt) = (v(br.from), v(br.to));
        let (i_f, i_t) = branch_currents(br, vf, vt);
        *mismatch.get_mut(&br.from).unwrap() -= i_f;
        *mismatch.get_mut(&br.to).unwrap() -= i_t;
        losses += (vf * i_f.conj() + vt * i_t.conj()).re;
    }
    for &b in &sol.buses {
        let bus = net.bus(b).unwrap();
        let shunt = Complex64::new(bus.g_shunt, bus.b_shunt) * v(b);
        *mismatch.get_mut(&b).unwrap() -= shunt;
        losses += (v(b) * shunt.conj()).re;
    }
    for l in net.energized_loads() {
        *mismatch.get_mut(&l.bus).unwrap() -= l.current(v(l.bus));
    }
    for g in &sol.generators {
        *mismatch.get_mut(&g.bus).unwrap() += (Complex64::new(g.p_out, g.q_out) / v(g.bus)).conj();
    }
    (mismatch.values().map(|m| m.norm()).fold(0.0, f64::max), losses)
}

pub fn worst_relative_error(analytic: &[Vec<f64>], fd: &[Vec<f64>]) -> (f64, usize, usize) {
    let mut worst = (0.0, 0, 0);
    for (r, (ra, rf)) in analytic.iter().zip(fd).enumerate() {
        for (c, (a, f)) in ra.iter().zip(rf).enumerate() {
            let e = (a - f).abs() / a.abs().max(f.abs()).max(1.0);
            if e > worst.0 {
                worst = (e, r, c);
            }
        }
    }
    worst
}

/// Random primal point strictly inside the bounds near `x0`, random
/// multipliers, positive bound duals.
pub fn random_state(problem: &dyn OptProblem, x0: &[f64], seed: u64) -> KktState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let vars = problem.variables();
    let x: Vec<f64> = vars
        .iter()
        .zip(x0)
        .map(|(v, &x)| {
            if v.has_lower() && v.has_upper() {
                v.lower + (v.upper - v.lower) * rng.random_range(0.1..0.9)
            } else {
                let y = x + 0.05 * normal.sample(&mut rng);
                let y = if v.has_lower() { y.max(v.lower + 0.01) } else { y };
                if v.has_upper() { y.min(v.upper - 0.01) } else { y }
            }
        })
        .collect();
    let lambda = (0..problem.num_constraints()).map(|_| normal.sample(&mut rng)).collect();
    let mu_lo = vars.iter().map(|v| if v.has_lower() { rng.random_range(0.05..2.0) } else { 0.0 }).collect();
    let mu_hi = vars.iter().map(|v| if v.has_upper() { rng.random_range(0.05..2.0) } else { 0.0 }).collect();
    KktState { x, lambda, mu_lo, mu_hi }
}

/// Worst relative error between the assembled KKT matrix and central
/// differences of the residual map over `POINTS` random interior points.
pub fn kkt_derivative_error(problem: &dyn OptProblem, x0: &[f64]) -> f64 {
    let cfg = SolverConfig::default();
    (0..POINTS)
        .map(|seed| {
            let state = random_state(problem, x0, seed);
            let analytic = build_kkt(problem, &state, &cfg).unwrap().matrix.to_dense();
            let fd = finite_difference_jacobian(problem, &state, cfg.epsilon, 1e-6);
            worst_relative_error(&analytic, &fd).0
        })
        .fold(0.0, f64::max)
}

pub fn check_kkt_derivatives(name: &str, problem: &dyn OptProblem, x0: &[f64]) {
    let e = kkt_derivative_error(problem, x0);
    assert!(e <= REL_TOL, "{name}: worst relative error {e}");
}

/// Worst relative error of the power-flow Jacobian of the first island of
/// `net` against central differences, over `POINTS` perturbed flat starts.
pub fn pf_jacobian_error(net: &Network, mode: PfMode) -> f64 {
    let buses = islands(net).remove(0);
    let sys = IslandSystem::new(net, &buses, mode, SmoothLimitParams::default()).unwrap();
    let base = sys.flat_start();
    let mut worst = 0.0f64;
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = base.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        let jac = sys.evaluate(&z, true).1.unwrap().to_dense();
        let mut fd = vec![vec![0.0; z.len()]; z.len()];
        for c in 0..z.len() {
            let h = 1e-6 * z[c].abs().max(1.0);
            let mut p = z.clone();
            let mut m = z.clone();
            p[c] += h;
            m[c] -= h;
            let (fp, _) = sys.evaluate(&p, false);
            let (fm, _) = sys.evaluate(&m, false);
            for r in 0..z.len() {
                fd[r][c] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        worst = worst.max(worst_relative_error(&jac, &fd).0);
    }
    worst
}

/// The 39-bus case after the full crank path at `loading`.
pub fn restored(loading: f64) -> Network {
    let (net, path) = case39();
    run_restoration(&net, &path, &StepBounds::default(), &RestorationConfig { loading_factor: loading, ..Default::default() })
        .unwrap()
        .network
}

