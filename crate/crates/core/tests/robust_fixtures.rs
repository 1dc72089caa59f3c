use std::path::PathBuf;

use approx::assert_abs_diff_eq;
use gridreserve::dispatch::solve_baseline;
use gridreserve::netmodel::{load_case, DeviceKind, GridCase};
use gridreserve::robust::*;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn case(name: &str) -> GridCase {
    load_case(fixtures().join(name)).unwrap()
}

fn spec(name: &str) -> DisturbanceSpec {
    DisturbanceSpec::from_json(&std::fs::read_to_string(fixtures().join(name)).unwrap()).unwrap()
}

#[test]
fn two_bus_radius_along_load_increase() {
    let case = case("2bus.json");
    let spec = spec("2bus_load_box.json");
    let sol = solve_baseline(&case).unwrap();
    let sched = ReserveSchedule::from_solution(&case, &sol);
    let policy = RecoursePolicy::Free { schedule: &sched, allow_load_shed: false };
    let rep = feasibility_radius(&case, &sol, &spec, &[0.0], None, policy).unwrap();
    // Demand can rise until the 1.2 pu generator is exhausted: 0.5 + 0.7.
    let up = rep.per_direction.iter().find(|d| d.dir == vec![1.0]).unwrap();
    assert_abs_diff_eq!(up.r, 0.7, epsilon = 1e-3);
    assert!(up.r <= 0.7 + 1e-9, "certified end must be feasible");
    let down = rep.per_direction.iter().find(|d| d.dir == vec![-1.0]).unwrap();
    assert_abs_diff_eq!(down.r, 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(rep.radius, 0.5, epsilon = 1e-12);

    // Convex combinations of certified points stay feasible.
    let (a, b) = (&rep.vertices[0], &rep.vertices[1]);
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let w = vec![t * a[0] + (1.0 - t) * b[0]];
        assert!(recourse_feasible(&case, &spec, &w, policy).unwrap(), "w = {w:?}");
    }
    assert!(!recourse_feasible(&case, &spec, &[0.7 + 1e-2], policy).unwrap());
}

#[test]
fn two_bus_sensitivity_predicts_resolve() {
    let case = case("2bus.json");
    let spec = spec("2bus_load_box.json");
    let (k, rep, prog) = dispatch_sensitivity(&case, &spec, &[0.0]).unwrap();
    let pg: Vec<usize> = (0..case.steps()).map(|s| prog.var(&format!("Pg[dg1,{s}]")).unwrap()).collect();
    for &i in &pg {
        assert_abs_diff_eq!(k[(i, 0)], 1.0, epsilon = 1e-6);
    }
    for dw in [3e-3, -2e-3, 7.5e-3] {
        let (p2, _) = disturbed_baseline_program(&case, &spec, &[dw]).unwrap();
        let opts = gridreserve::conic::SolveOptions { tol_feas: 1e-9, tol_gap: 1e-9, ..Default::default() };
        let r2 = gridreserve::conic::solve_with(&p2, &opts);
        assert!(r2.is_optimal());
        for &i in &pg {
            let pred = rep.x[i] + k[(i, 0)] * dw;
            assert!((pred - r2.x[i]).abs() <= 1e-6, "δw {dw}: predicted {pred} vs {}", r2.x[i]);
        }
    }
}

#[test]
fn gain_tuning_cases() {
    let case = case("2bus.json");
    let spec = spec("2bus_load_box.json");
    let sol = solve_baseline(&case).unwrap();

    let mut sched = ReserveSchedule::from_solution(&case, &sol);
    assert_eq!(tune_reserve_gain(&case, &sol, &sched, &spec, 0), Err(RobustError::NoFeasibleGain { direction: 0 }));

    let dg = sched.devices.iter().position(|d| d.kind == DeviceKind::Dg).unwrap();
    sched.devices[dg].up = vec![0.5; case.steps()];
    let tuning = tune_reserve_gain(&case, &sol, &sched, &spec, 0).unwrap();
    assert_abs_diff_eq!(tuning.alpha, 0.5, epsilon = 1e-3);
    let j = tuning.control_names.iter().position(|n| n == "dg1[0]").unwrap();
    let row = tuning.gain_row(j);
    let applied: f64 = row.iter().zip(&tuning.margins).map(|(k, c)| k * c).sum();
    assert_abs_diff_eq!(applied, tuning.delta_u[j], epsilon = 1e-9);
    assert!(tuning.delta_u[j] <= 0.5 + 1e-6);
}

#[test]
fn four_bus_dg_trip_is_covered() {
    let case = case("4bus.json");
    let spec = spec("robust_dg_trip.json");
    let base = solve_baseline(&case).unwrap();
    let (sol, sched) = solve_robust(&case, &spec).unwrap();
    assert!(sol.objective >= base.objective - 1e-6);
    assert!(sched.headroom_violation() <= 1e-6, "{}", sched.headroom_violation());

    let dg = case.device_index("dg1").unwrap();
    for k in 20..=40 {
        // Losing dg1 removes its whole output; the others must stand in.
        let lost = sol.devices[dg].p_pu[k];
        let others: f64 = sched.devices.iter().enumerate().filter(|(d, _)| *d != dg).map(|(_, d)| d.up[k]).sum();
        assert!(others >= lost - 1e-6, "step {k}: reserve {others} < lost {lost}");
    }
    let vertices = spec.vertices().unwrap();
    let ok = verify_vertices(&case, &spec, &sched, &vertices).unwrap();
    assert!(ok.iter().all(|&v| v), "{ok:?}");
}

#[test]
fn degenerate_box_matches_baseline() {
    let case = case("2bus.json");
    let mut spec = spec("2bus_load_box.json");
    spec.dims[0].lo = 0.0;
    spec.dims[0].hi = 0.0;
    let base = solve_baseline(&case).unwrap();
    let (sol, sched) = solve_robust(&case, &spec).unwrap();
    assert_abs_diff_eq!(sol.objective, base.objective, epsilon = 1e-6);
    assert!(sched.total() <= 1e-6);
}

#[test]
fn losing_all_generation_is_infeasible() {
    let case = case("2bus.json");
    let spec = DisturbanceSpec::new(vec![Dimension {
        target: "dg1".into(),
        channel: Channel::CapacityScale,
        lo: 0.0,
        hi: 1.0,
        steps: [0, 1],
    }]);
    match solve_robust(&case, &spec) {
        Err(RobustError::InfeasibleRobust { index, w }) => {
            assert_eq!(index, 0);
            assert_eq!(w, vec![1.0]);
        }
        other => panic!("expected InfeasibleRobust, got {other:?}"),
    }
}

#[test]
fn margins_flag_the_trip() {
    let case = case("4bus.json");
    let spec = spec("robust_dg_trip.json");
    let sol = solve_baseline(&case).unwrap();
    let m0 = compute_margins(&case, &sol, &spec, &[0.0, 0.0]).unwrap();
    // Lossless reconstruction; the dispatch itself includes no losses in the linear model.
    assert!(m0.max() <= 1e-6, "nominal margin {}", m0.max());
    let m1 = compute_margins(&case, &sol, &spec, &[1.0, 0.0]).unwrap();
    let dg = case.device_index("dg1").unwrap();
    let k = 30;
    let lost = sol.devices[dg].p_pu[k];
    assert_abs_diff_eq!(m1.get(&format!("balance_deficit[{k}]")).unwrap(), lost, epsilon = 1e-6);
    assert_abs_diff_eq!(m1.get(&format!("cap_hi[dg1,{k}]")).unwrap(), lost, epsilon = 1e-9);
}

#[test]
fn proportional_dispatch_respects_bands() {
    let case = case("4bus.json");
    let spec = spec("robust_dg_trip.json");
    let (_, sched) = solve_robust(&case, &spec).unwrap();
    let k = 30;
    let avail = sched.total_up(k);
    let act = proportional_dispatch(&sched, 0.5 * avail, k);
    assert_abs_diff_eq!(act.deployed, 0.5 * avail, epsilon = 1e-12);
    assert_eq!(act.shortfall, 0.0);
    for ((_, a), d) in act.per_device.iter().zip(&sched.devices) {
        assert!(*a >= 0.0 && *a <= d.up[k] + 1e-15);
    }
    let act = proportional_dispatch(&sched, avail + 1.0, k);
    assert_abs_diff_eq!(act.shortfall, 1.0, epsilon = 1e-9);
}
