mod common;

use blackstart_core::netmodel::*;
use blackstart_core::powerflow::*;
use proptest::prelude::*;

use common::{branch_balance, case39};

fn restored39() -> Network {
    let (mut net, path) = case39();
    for step in &path.steps {
        net = apply_energization(&net, step).unwrap();
    }
    net
}

fn load_p(net: &Network, sol: &PFSolution) -> f64 {
    net.energized_loads().map(|l| l.power(sol.voltage(l.bus).unwrap()).re).sum()
}

#[test]
fn restored_case_satisfies_kcl_in_both_modes() {
    let net = restored39();
    for mode in [PfMode::Classical, PfMode::Governor] {
        let sol = solve_with(&net, mode, &PfOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.max_kcl_residual <= 1e-8, "{mode:?}: {}", sol.max_kcl_residual);
        let (worst, losses) = branch_balance(&net, &sol);
        assert!(worst <= 1e-8, "{mode:?}: branch-level mismatch {worst}");
        let generated: f64 = sol.generators.iter().map(|g| g.p_out).sum();
        assert!((generated - load_p(&net, &sol) - losses).abs() < 1e-7);
        assert!(losses > 0.0);
    }
}

#[test]
fn governor_outputs_follow_droop() {
    let net = restored39();
    let sol = solve_gpf(&net).unwrap();
    assert!(sol.delta_f.abs() > 1e-3);
    for o in &sol.generators {
        let g = net.generator(o.id).unwrap();
        let expect = g.p_set + droop_response(g, sol.delta_f);
        assert!((o.p_out - expect).abs() < 1e-9, "generator {}", o.id);
        // Away from the limits the softplus blend is linear to round-off.
        let margin = 40.0 * SmoothLimitParams::default().sharpness * (g.p_max - g.p_min);
        if g.p_set + g.droop_gain * sol.delta_f.abs() < g.p_max - margin && g.p_set - g.droop_gain * sol.delta_f.abs() > g.p_min + margin {
            assert!((o.p_out - (g.p_set - g.droop_gain * sol.delta_f)).abs() < 1e-6, "generator {} outside its linear range", o.id);
        }
    }
}

#[test]
fn balanced_dispatch_gives_zero_frequency_deviation() {
    let mut net = restored39();
    let classical = solve_pf(&net).unwrap();
    assert_eq!(classical.delta_f, 0.0);
    let reference = net.generators.iter().position(|g| g.is_reference).unwrap();
    let id = net.generators[reference].id;
    net.generators[reference].p_set = classical.generator(id).unwrap().p_out;
    // Units dispatched at a limit respond with -s ln 2 at zero deviation;
    // wide limits keep every unit in the linear part of its droop curve.
    for g in &mut net.generators {
        g.p_max = 2.0 * g.p_set.abs() + 1.0;
        g.p_min = -g.p_max;
    }
    let governor = solve_gpf(&net).unwrap();
    assert!(governor.delta_f.abs() < 1e-7, "{}", governor.delta_f);
    for (k, _) in governor.buses.iter().enumerate() {
        assert!((governor.v_real[k] - classical.v_real[k]).abs() < 1e-7);
        assert!((governor.v_imag[k] - classical.v_imag[k]).abs() < 1e-7);
    }
}

#[test]
fn separate_islands_are_solved_independently() {
    let (net, path) = case39();
    let mut two = apply_energization(&net, &path.steps[0]).unwrap();
    // A second island fed by generator 4 at bus 33 through bus 19.
    for b in [19, 33] {
        two.bus_mut(b).unwrap().energized = true;
    }
    let g4 = two.generators.iter().position(|g| g.id == 4).unwrap();
    two.generators[g4].energized = true;
    two.generators[g4].is_reference = true;
    assert_eq!(islands(&two).len(), 2);
    let sol = solve_gpf(&two).unwrap();
    assert_eq!(sol.islands.len(), 2);
    let alone = solve_gpf(&apply_energization(&net, &path.steps[0]).unwrap()).unwrap();
    assert!((sol.islands[0].delta_f - alone.delta_f).abs() < 1e-9);
    assert!(sol.islands[1].delta_f.abs() > 0.0);
}

/// Three buses with limits wide enough that the droop stays linear.
fn small(load: f64) -> Network {
    let text = format!(
        "format_version = 1\n\
         [[buses]]\nid = 1\nbase_kv = 100.0\n[[buses]]\nid = 2\nbase_kv = 100.0\n[[buses]]\nid = 3\nbase_kv = 100.0\n\
         [[branches]]\nfrom = 1\nto = 2\nr = 0.01\nx = 0.1\n[[branches]]\nfrom = 2\nto = 3\nr = 0.02\nx = 0.15\nb = 0.05\n\
         [[generators]]\nid = 1\nbus = 1\np_set = 1.0\nq_set = 0.0\np_min = -20.0\np_max = 20.0\nq_min = -3.0\nq_max = 3.0\ndroop_gain = 1.0\nv_set = 1.02\nis_reference = true\n\
         [[generators]]\nid = 2\nbus = 3\np_set = 0.6\nq_set = 0.0\np_min = -20.0\np_max = 20.0\nq_min = -3.0\nq_max = 3.0\ndroop_gain = 0.5\nv_set = 1.0\n\
         [[loads]]\nbus = 2\nkind = \"constant_power\"\np_d = {load}\nq_d = 0.2\n"
    );
    let mut net = load_case(&text).unwrap();
    let path = load_crankpath("format_version = 1\n[[steps]]\nsequence = 1\nbuses = [1, 2, 3]\ngenerators = [1, 2]\n", &net).unwrap();
    net = apply_energization(&net, &path.steps[0]).unwrap();
    net
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn more_load_means_lower_frequency(a in 0.5f64..2.5, extra in 0.01f64..0.5) {
        let low = solve_gpf(&small(a)).unwrap();
        let high = solve_gpf(&small(a + extra)).unwrap();
        prop_assert!(high.delta_f < low.delta_f);
        prop_assert!(low.max_kcl_residual <= 1e-8 && high.max_kcl_residual <= 1e-8);
    }

    #[test]
    fn frequency_balances_the_island(a in 0.5f64..2.5) {
        let net = small(a);
        let sol = solve_gpf(&net).unwrap();
        let (_, losses) = branch_balance(&net, &sol);
        let gain: f64 = net.generators.iter().map(|g| g.droop_gain).sum();
        let set: f64 = net.generators.iter().map(|g| g.p_set).sum();
        let oracle = (set - load_p(&net, &sol) - losses) / gain;
        prop_assert!((sol.delta_f - oracle).abs() < 1e-6, "{} vs {}", sol.delta_f, oracle);
    }
}
