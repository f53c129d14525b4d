use super::*;
use crate::netmodel::{apply_energization, load_case, load_crankpath};
use crate::powerflow::solve_gpf;

fn generator(id: u32, bus: u32, p: f64, gain: f64, reference: bool) -> String {
    format!(
        "[[generators]]\nid = {id}\nbus = {bus}\np_set = {p}\nq_set = 0.0\np_min = 0.0\np_max = 3.0\n\
         q_min = -2.0\nq_max = 2.0\ndroop_gain = {gain}\nv_set = 1.0\nis_reference = {reference}\n"
    )
}

fn bus(id: u32) -> String {
    format!("[[buses]]\nid = {id}\nbase_kv = 100.0\n")
}

fn branch(from: u32, to: u32) -> String {
    format!("[[branches]]\nfrom = {from}\nto = {to}\nr = 0.01\nx = 0.1\n")
}

fn load(bus: u32, p: f64, q: f64) -> String {
    format!("[[loads]]\nbus = {bus}\nkind = \"constant_power\"\np_d = {p}\nq_d = {q}\n")
}

/// Generators on buses 1 and 3, load on bus 2, one crank step.
fn three_bus(p1: f64, p2: f64, load_p: f64) -> (Network, CrankPath) {
    let case = [
        "format_version = 1\n".to_string(),
        bus(1),
        bus(2),
        bus(3),
        branch(1, 2),
        branch(2, 3),
        generator(1, 1, p1, 1.0, true),
        generator(2, 3, p2, 1.0, false),
        load(2, load_p, 0.1),
    ]
    .join("\n");
    let net = load_case(&case).unwrap();
    let path = "format_version = 1\n[[steps]]\nsequence = 1\nbuses = [1, 2, 3]\ngenerators = [1, 2]\n";
    let path = load_crankpath(path, &net).unwrap();
    (net, path)
}

/// One generator feeding one load through a line.
fn two_bus(p: f64, gain: f64, load_p: f64) -> (Network, CrankPath) {
    let case = ["format_version = 1\n".to_string(), bus(1), bus(2), branch(1, 2), generator(1, 1, p, gain, true), load(2, load_p, 0.1)]
        .join("\n");
    let net = load_case(&case).unwrap();
    let path = "format_version = 1\n[[steps]]\nsequence = 1\nbuses = [1, 2]\ngenerators = [1]\n";
    let path = load_crankpath(path, &net).unwrap();
    (net, path)
}

fn cfg() -> RestorationConfig {
    RestorationConfig::default()
}

#[test]
fn balanced_island_needs_no_correction() {
    let (net, path) = three_bus(0.5, 0.3, 0.8);
    let report = validate_step(&net, &path.steps[0], &DispatchMap::new(), &StepBounds::default(), &cfg()).unwrap();
    assert_eq!(report.status, StepStatus::GoAhead);
    assert!(report.feasible);
    assert_eq!(report.delta_p_norm_inf(), 0.0);
    assert!(report.delta_f.abs() < 0.1);

    // The optimizer itself also leaves the dispatch alone.
    let snapshot = apply_energization(&net, &path.steps[0]).unwrap();
    let problem = build_crank_problem(&snapshot, &DispatchMap::new(), &StepBounds::default(), DEFAULT_WEIGHT).unwrap();
    let x0 = initial_point(&problem, &snapshot, solve_gpf(&snapshot).ok().as_ref());
    let sol = solve(&problem, &x0, &SolverConfig::default()).unwrap();
    assert!(sol.converged);
    for g in 0..problem.gens.len() {
        assert!(sol.x[problem.gen_var(g, DPG)].abs() < 1e-6);
    }
    assert!(sol.objective < 1e-10);
}

fn grid_search(net: &Network, path: &CrankPath, bounds: &StepBounds) -> f64 {
    let snapshot = apply_energization(net, &path.steps[0]).unwrap();
    let mut best = f64::NAN;
    for k in 0..=3000 {
        let dpg = -(k as f64) * 1e-3;
        let mut trial = snapshot.clone();
        trial.generators[0].p_set += dpg;
        let Ok(pf) = solve_gpf(&trial) else { continue };
        let (lo, hi) = pf.v_extremes();
        if pf.delta_f <= bounds.delta_f_max && lo >= bounds.v_min && hi <= bounds.v_max {
            best = dpg;
            break;
        }
    }
    best
}

#[test]
fn surplus_is_clipped_to_the_frequency_bound() {
    let (net, path) = two_bus(2.0, 0.5, 0.5);
    let bounds = StepBounds::default();
    let report = validate_step(&net, &path.steps[0], &DispatchMap::new(), &bounds, &cfg()).unwrap();
    assert!(report.governor_delta_f.unwrap() > 1.2);
    assert_eq!(report.status, StepStatus::Corrected, "{:?}", report.diagnostics);
    assert!((report.delta_f - 1.2).abs() < 1e-4, "{}", report.delta_f);
    let dp = report.delta_p(1).unwrap();
    assert!(dp < 0.0);

    let scan = grid_search(&net, &path, &bounds);
    assert!((dp - scan).abs() <= 2e-3, "optimizer {dp}, scan {scan}");
    assert!((report.objective - scan * scan).abs() <= 1e-3 * scan.abs().max(1.0) * 2.0);
}

#[test]
fn revalidating_an_actuated_step_stays_feasible() {
    let (net, path) = two_bus(2.0, 0.5, 0.5);
    let step = &path.steps[0];
    let report = validate_step(&net, step, &DispatchMap::new(), &StepBounds::default(), &cfg()).unwrap();
    let actuated = actuate_step(&net, step, &report, 1.0).unwrap();
    assert!((actuated.generator(1).unwrap().p_set - report.generators[0].p_set).abs() < 1e-12);
    assert_eq!(actuated.generator(1).unwrap().crank_p(), 2.0);
    let again = validate_step(&actuated, step, &DispatchMap::new(), &StepBounds::default(), &cfg()).unwrap();
    assert!(again.feasible);
    assert!((again.delta_f - report.delta_f).abs() < 1e-6);
    assert!((again.delta_p(1).unwrap() - report.delta_p(1).unwrap()).abs() < 1e-6);
}

#[test]
fn go_ahead_actuation_keeps_crank_dispatch() {
    let (net, path) = three_bus(0.5, 0.3, 0.8);
    let report = validate_step(&net, &path.steps[0], &DispatchMap::new(), &StepBounds::default(), &cfg()).unwrap();
    let out = actuate_step(&net, &path.steps[0], &report, 1.0).unwrap();
    assert_eq!(dispatch_of(&out), DispatchMap::from([(1, 0.5), (2, 0.3)]));
}

#[test]
fn infeasible_reports_are_not_actuated() {
    let (net, path) = three_bus(0.5, 0.3, 0.8);
    let mut report = validate_step(&net, &path.steps[0], &DispatchMap::new(), &StepBounds::default(), &cfg()).unwrap();
    report.feasible = false;
    report.status = StepStatus::Infeasible;
    assert_eq!(actuate_step(&net, &path.steps[0], &report, 1.0), Err(RestorationError::NotFeasible { step: 1 }));
    report.step = 7;
    assert!(matches!(actuate_step(&net, &path.steps[0], &report, 1.0), Err(RestorationError::StepMismatch { .. })));
}

#[test]
fn island_without_generator_has_no_reference() {
    let (net, _) = three_bus(0.5, 0.3, 0.8);
    let step = CrankStep { sequence: 1, buses: vec![2], generators: vec![], dispatch: vec![], previous: None };
    let err = validate_step(&net, &step, &DispatchMap::new(), &StepBounds::default(), &cfg()).unwrap_err();
    assert!(matches!(err, RestorationError::PowerFlow(PfError::NoReference { .. })), "{err}");
}

#[test]
fn missing_previous_dispatch_is_an_error() {
    let (net, path) = three_bus(0.5, 0.3, 0.8);
    let on = apply_energization(&net, &path.steps[0]).unwrap();
    let next = CrankStep { sequence: 2, buses: vec![], generators: vec![], dispatch: vec![], previous: Some(1) };
    let err = validate_step(&on, &next, &DispatchMap::new(), &StepBounds::default(), &cfg()).unwrap_err();
    assert!(matches!(err, RestorationError::MissingDispatch { .. }));
}

#[test]
fn empty_path_gives_no_reports() {
    let (net, _) = three_bus(0.5, 0.3, 0.8);
    let path = CrankPath { format_version: 1, steps: vec![] };
    let run = run_restoration(&net, &path, &StepBounds::default(), &cfg()).unwrap();
    assert!(run.reports.is_empty());
    assert_eq!(run.halted_at, None);
}

#[test]
fn ramp_bounds_limit_corrections() {
    let (net, path) = two_bus(0.7, 0.5, 0.5);
    let on = actuate_step(
        &net,
        &path.steps[0],
        &validate_step(&net, &path.steps[0], &DispatchMap::new(), &StepBounds::default(), &cfg()).unwrap(),
        1.0,
    )
    .unwrap();
    // A later step doubles the crank target; the ramp allows only +0.5.
    let mut later = on.clone();
    later.generators[0].p_crank = Some(1.4);
    later.applied_steps.clear();
    let step = CrankStep { sequence: 2, buses: vec![], generators: vec![], dispatch: vec![], previous: None };
    let prev = dispatch_of(&on);
    let r = validate_step(&later, &step, &prev, &StepBounds::default(), &cfg()).unwrap();
    let change = r.generators[0].p_set - prev[&1];
    assert!(change <= 0.5 + 1e-6, "{change}");
}

#[test]
fn flags_sorted_by_magnitude() {
    let d = |bus, dvsq| VoltageDeviation { bus, dvsq };
    let devs = [d(1, 2e-4), d(2, -5e-4), d(3, 5e-5), d(4, 1e-3)];
    let flagged = flag_voltage_issues(&devs, 1e-4);
    assert_eq!(flagged.iter().map(|v| v.bus).collect::<Vec<_>>(), vec![4, 2, 1]);
    assert!(flag_voltage_issues(&[d(1, 1e-5), d(2, -9e-5)], 1e-4).is_empty());
}

fn restored_three_bus() -> Network {
    let (net, path) = three_bus(0.5, 0.3, 0.8);
    run_restoration(&net, &path, &StepBounds::default(), &cfg()).unwrap().network
}

#[test]
fn already_synchronized_islands_need_nothing() {
    let island = restored_three_bus();
    let remote = boundary_state(&island, 2, "other", 0.0).unwrap();
    let rec = synchronize(&island, 2, &remote, &[2], &SyncOptions::default()).unwrap();
    assert!(rec.converged, "{:?}", rec.diagnostics);
    assert!(rec.objective < 1e-8, "{}", rec.objective);
    assert!(rec.generators[0].delta_p.abs() < 1e-4);
    assert!(rec.flagged.is_empty());
}

#[test]
fn sync_matches_the_remote_boundary() {
    let island = restored_three_bus();
    let mut remote = boundary_state(&island, 2, "other", 0.0).unwrap();
    remote.theta += 2.0;
    remote.delta_f = 0.1;
    let rec = synchronize(&island, 2, &remote, &[2], &SyncOptions::default()).unwrap();
    assert!(rec.converged, "{:?}", rec.diagnostics);
    assert!((rec.local.v_real() - remote.v_real()).abs() < 1e-6);
    assert!((rec.local.v_imag() - remote.v_imag()).abs() < 1e-6);
    assert!((rec.local.delta_f - remote.delta_f).abs() < 1e-6);
    // Raising frequency lowers every droop response; the participating unit
    // makes up the difference.
    assert!(rec.generators[0].delta_p > 0.15, "{}", rec.generators[0].delta_p);
}

#[test]
fn unreachable_boundary_voltage_is_flagged() {
    let mut island = restored_three_bus();
    let mut remote = boundary_state(&island, 2, "other", 0.0).unwrap();
    // Bus 1 cannot absorb enough reactive power to stay at its set-point.
    island.generators[0].q_min = -0.5;
    remote.v_mag = 1.12;
    let opts = SyncOptions { bounds: StepBounds { v_max: 1.5, ..StepBounds::default() }, ..SyncOptions::default() };
    let rec = synchronize(&island, 2, &remote, &[2], &opts).unwrap();
    assert!(rec.converged, "{:?}", rec.diagnostics);
    assert!(rec.flagged.iter().any(|d| d.bus == 1), "{:?}", rec.deviations);

    let heavier = SyncOptions { weight: opts.weight * 10.0, ..opts };
    let rec10 = synchronize(&island, 2, &remote, &[2], &heavier).unwrap();
    assert!(rec10.converged);
    for (a, b) in rec.deviations.iter().zip(&rec10.deviations) {
        assert!(b.dvsq.abs() <= a.dvsq.abs() * (1.0 + 1e-6) + 1e-12, "{a:?} -> {b:?}");
    }
}

#[test]
fn sync_input_errors() {
    let island = restored_three_bus();
    let remote = boundary_state(&island, 2, "other", 0.0).unwrap();
    let opts = SyncOptions::default();
    assert_eq!(synchronize(&island, 2, &remote, &[], &opts).unwrap_err(), SyncError::NoParticipants);
    assert_eq!(synchronize(&island, 2, &remote, &[9], &opts).unwrap_err(), SyncError::UnknownParticipant(9));
    assert_eq!(synchronize(&island, 8, &remote, &[2], &opts).unwrap_err(), SyncError::BoundaryNotInIsland(8));
    let (fresh, _) = three_bus(0.5, 0.3, 0.8);
    assert_eq!(synchronize(&fresh, 2, &remote, &[2], &opts).unwrap_err(), SyncError::NotFullyEnergized);
    let bad = BoundaryState { v_mag: 0.0, ..remote };
    assert!(matches!(synchronize(&island, 2, &bad, &[2], &opts), Err(SyncError::InvalidBoundary(_))));
}

#[test]
fn crank_problem_derivatives_match_finite_differences() {
    let (net, path) = three_bus(0.5, 0.3, 0.8);
    let snapshot = apply_energization(&net, &path.steps[0]).unwrap();
    let problem = build_crank_problem(&snapshot, &DispatchMap::new(), &StepBounds::default(), DEFAULT_WEIGHT).unwrap();
    let x0 = initial_point(&problem, &snapshot, solve_gpf(&snapshot).ok().as_ref());
    let state = blackstart_pdip::solver::initial_state(&problem, &x0, &SolverConfig::default());
    let analytic = blackstart_pdip::build_kkt(&problem, &state, &SolverConfig::default()).unwrap().matrix.to_dense();
    let fd = blackstart_pdip::kkt::finite_difference_jacobian(&problem, &state, 1e-6, 1e-6);
    let scale = analytic.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    for (ra, rf) in analytic.iter().zip(&fd) {
        for (a, f) in ra.iter().zip(rf) {
            assert!((a - f).abs() <= 1e-5 * scale, "{a} vs {f}");
        }
    }
}
