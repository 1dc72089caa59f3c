use std::path::PathBuf;

use gridreserve::dro::{build_ambiguity_set, label_spec, solve_dro, AmbiguityConfig, SampleSet};
use gridreserve::events::{EventModel, EventProbabilityMatrix, EventsFile};
use gridreserve::netmodel::{load_case, GridCase};
use gridreserve::simharness::*;
use gridreserve::stochastic::{solve_chance, solve_cvar, GaussianModel};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn case(name: &str) -> GridCase {
    load_case(fixtures().join(name)).unwrap()
}

fn samples() -> SampleSet {
    SampleSet::from_json(&std::fs::read_to_string(fixtures().join("dro_samples.json")).unwrap()).unwrap()
}

fn gaussian() -> GaussianModel {
    GaussianModel::from_json(&std::fs::read_to_string(fixtures().join("gaussian_4bus.json")).unwrap()).unwrap()
}

#[test]
fn quiet_catalog_never_violates() {
    let case = case("4bus.json");
    let text = std::fs::read_to_string(fixtures().join("events_dro_matched.json")).unwrap();
    let mut file: EventsFile = serde_json::from_str(&text).unwrap();
    file.probability_matrix = EventProbabilityMatrix::Static(vec![vec![0.0; 2]; 2]);
    let model = EventModel::new(&case, file).unwrap();
    let (sol, sched) = solve_chance(&case, &gaussian(), 0.05).unwrap();
    let rep = validate(&case, &sol, &sched, &model, 2000, 3, 0.05);
    assert_eq!(rep.violation_probability, 0.0);
    assert!(rep.pass);
}

#[test]
fn violation_matches_scalar_recomputation() {
    let case = case("4bus.json");
    let model = EventModel::load(&case, fixtures().join("events_dro_shifted.json")).unwrap();
    let agg: Vec<f64> = samples().samples.iter().map(|s| s.iter().sum()).collect();
    let (sol, sched) = solve_cvar(&case, &agg, 0.05).unwrap();
    let rep = validate(&case, &sol, &sched, &model, 5000, 9, 0.05);
    for s in &rep.scenarios {
        let avail = if s.imbalance_pu > 0.0 { sched.total_up(s.step) } else { sched.total_down(s.step) };
        let expect = (s.imbalance_pu.abs() - avail).max(0.0);
        assert!((s.violation_pu - expect).abs() <= 1e-12, "{s:?}");
        assert!(s.violation_pu >= 0.0);
    }
    let count = rep.scenarios.iter().filter(|s| s.violation_pu > VIOLATION_TOL).count();
    assert_eq!(rep.violation_probability, count as f64 / 5000.0);
}

#[test]
fn dro_holds_where_cvar_fails_under_shift() {
    let case = case("4bus.json");
    let s = samples();
    let rho = 0.05;
    let set = build_ambiguity_set(&s, &AmbiguityConfig::new(rho)).unwrap();
    let spec = label_spec(&case, &set).unwrap();
    let (dsol, dsched) = solve_dro(&case, &set, &spec).unwrap();
    let agg: Vec<f64> = s.samples.iter().map(|v| v.iter().sum()).collect();
    let (csol, csched) = solve_cvar(&case, &agg, rho).unwrap();

    let shifted = EventModel::load(&case, fixtures().join("events_dro_shifted.json")).unwrap();
    let d = validate(&case, &dsol, &dsched, &shifted, 20_000, 42, rho);
    let c = validate(&case, &csol, &csched, &shifted, 20_000, 42, rho);
    assert!(d.violation_probability <= rho, "dro {}", d.violation_probability);
    assert!(c.violation_probability > rho, "cvar {}", c.violation_probability);

    let matched = EventModel::load(&case, fixtures().join("events_dro_matched.json")).unwrap();
    let d = validate(&case, &dsol, &dsched, &matched, 20_000, 42, rho);
    let c = validate(&case, &csol, &csched, &matched, 20_000, 42, rho);
    assert!(d.pass && c.pass, "dro {} cvar {}", d.violation_probability, c.violation_probability);
    assert!(dsched.total() >= csched.total() - 1e-6);
}

#[test]
fn chance_sweep_trades_cost_for_resilience() {
    let case = case("4bus.json");
    let model = gaussian();
    let sampler = GaussianSampler::new(model.clone()).unwrap();
    let grid = [0.01, 0.05, 0.1, 0.2];
    let pts = pareto_sweep(&case, &SweepMethod::Chance(&model), &grid, &sampler, 5000, 5);
    assert_eq!(pts.len(), 4);
    for w in pts.windows(2) {
        assert!(w[1].cost <= w[0].cost + 1e-6, "{pts:?}");
        assert!(w[1].resilience <= w[0].resilience + 1e-12, "{pts:?}");
    }
    let csv = pareto_csv(&pts);
    assert!(csv.starts_with("rho,cost,resilience,total_reserves_pu,seed\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn single_point_sweep_equals_direct_run() {
    let case = case("4bus.json");
    let model = gaussian();
    let sampler = GaussianSampler::new(model.clone()).unwrap();
    let pts = pareto_sweep(&case, &SweepMethod::Chance(&model), &[0.1], &sampler, 3000, 8);
    let (sol, sched) = solve_chance(&case, &model, 0.1).unwrap();
    let rep = validate(&case, &sol, &sched, &sampler, 3000, 8, 0.1);
    assert_eq!(pts[0].cost, sol.objective);
    assert_eq!(pts[0].resilience, rep.resilience());
    assert_eq!(pts[0].total_reserves_pu, sched.total());
}

#[test]
fn failed_points_are_recorded() {
    let case = case("4bus.json");
    let model = gaussian();
    let sampler = GaussianSampler::new(model.clone()).unwrap();
    let pts = pareto_sweep(&case, &SweepMethod::Chance(&model), &[0.9, 0.1], &sampler, 1000, 1);
    assert!(pts[0].error.is_some());
    assert!(pts[1].error.is_none());
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let case = case("4bus.json");
    let model = EventModel::load(&case, fixtures().join("events_4bus.json")).unwrap();
    let (sol, sched) = solve_chance(&case, &gaussian(), 0.05).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| validate(&case, &sol, &sched, &model, 4000, 17, 0.05))
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.to_json_string(), four.to_json_string());
    assert_eq!(one.to_csv(), four.to_csv());
}
