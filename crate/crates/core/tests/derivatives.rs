//! Analytic Jacobians against central finite differences at random
//! interior points.

mod common;

use blackstart_core::netmodel::*;
use blackstart_core::powerflow::*;
use blackstart_core::restoration::*;
use common::{case39, check_kkt_derivatives, pf_jacobian_error, restored, REL_TOL};

#[test]
fn power_flow_jacobians() {
    let (net, path) = case39();
    let mut cur = net;
    for step in &path.steps[..4] {
        cur = apply_energization(&cur, step).unwrap();
    }
    let full = restored(1.0);
    for (label, n) in [("partial", &cur), ("restored", &full)] {
        for mode in [PfMode::Classical, PfMode::Governor] {
            let e = pf_jacobian_error(n, mode);
            assert!(e <= REL_TOL, "{label} {mode:?}: worst relative error {e}");
        }
    }
}

#[test]
fn crank_problem_kkt_matrices() {
    let (net, path) = case39();
    let mut cur = net;
    let mut prev = DispatchMap::new();
    for step in &path.steps[..5] {
        prev = dispatch_of(&cur);
        cur = apply_energization(&cur, step).unwrap();
    }
    let problem = build_crank_problem(&cur, &prev, &StepBounds::default(), DEFAULT_WEIGHT).unwrap();
    let x0 = initial_point(&problem, &cur, solve_gpf(&cur).ok().as_ref());
    check_kkt_derivatives("crank", &problem, &x0);
}

#[test]
fn sync_problem_kkt_matrices() {
    let island1 = restored(0.95);
    let island2 = restored(1.0);
    let remote = boundary_state(&island2, 28, "island-2", 0.0).unwrap();
    let problem = build_sync_problem(&island1, 30, &remote, &[9, 10], DEFAULT_WEIGHT, &StepBounds::default()).unwrap();
    let x0 = initial_point(&problem, &island1, solve_gpf(&island1).ok().as_ref());
    check_kkt_derivatives("sync", &problem, &x0);
}
