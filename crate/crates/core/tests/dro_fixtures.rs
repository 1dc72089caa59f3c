use std::path::PathBuf;

use approx::assert_abs_diff_eq;
use gridreserve::dispatch::solve_baseline;
use gridreserve::dro::*;
use gridreserve::netmodel::{load_case, GridCase};
use gridreserve::robust::{solve_robust, verify_vertices, DisturbanceSpec};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn case(name: &str) -> GridCase {
    load_case(fixtures().join(name)).unwrap()
}

fn samples() -> SampleSet {
    SampleSet::from_json(&std::fs::read_to_string(fixtures().join("dro_samples.json")).unwrap()).unwrap()
}

#[test]
fn fixture_set_is_certified() {
    let s = samples();
    let set = build_ambiguity_set(&s, &AmbiguityConfig::new(0.05)).unwrap();
    assert_eq!(set.n, 500);
    assert_eq!(set.vertices.len(), 4);
    assert!(set.c > 0.0 && set.epsilon > 0.0 && set.sigma > 0.0);
    let stats = s.stats().unwrap();
    let norms = max_norms(&stats.whitened);
    assert!(h_value(set.sigma, set.lambda, &norms, set.epsilon) <= set.rho + 1e-9);
    let json: serde_json::Value = serde_json::from_str(&set.to_json_string()).unwrap();
    for key in ["C", "epsilon", "sigma", "lambda", "vertices"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn dro_reserves_cover_every_vertex() {
    let case = case("4bus.json");
    let set = build_ambiguity_set(&samples(), &AmbiguityConfig::new(0.05)).unwrap();
    let spec = label_spec(&case, &set).unwrap();
    let base = solve_baseline(&case).unwrap();
    let (sol, sched) = solve_dro(&case, &set, &spec).unwrap();
    assert!(sol.objective >= base.objective - 1e-6);
    let ok = verify_vertices(&case, &spec, &sched, &set.vertices).unwrap();
    assert!(ok.iter().all(|&v| v));
    // Aggregate up reserve covers the largest total load increase in U.
    let worst: f64 = set.vertices.iter().map(|v| v.iter().sum::<f64>()).fold(0.0, f64::max);
    for k in 0..case.steps() {
        assert!(sched.total_up(k) >= worst - 1e-6, "step {k}");
    }
}

#[test]
fn singleton_set_is_baseline() {
    let case = case("4bus.json");
    let mut set = build_ambiguity_set(&samples(), &AmbiguityConfig::new(0.05)).unwrap();
    set.vertices = vec![vec![0.0, 0.0]];
    let spec = label_spec(&case, &set).unwrap();
    let base = solve_baseline(&case).unwrap();
    let (sol, sched) = solve_dro(&case, &set, &spec).unwrap();
    assert_abs_diff_eq!(sol.objective, base.objective, epsilon = 1e-6);
    assert!(sched.total() <= 1e-6);
}

#[test]
fn diagonal_covariance_reduces_to_box() {
    let case = case("4bus.json");
    // Axis-aligned samples give a diagonal Σ̂, so U is the corner set of its box.
    let s = SampleSet {
        dims: 2,
        labels: vec!["ld2".into(), "ld3".into()],
        samples: vec![vec![0.05, 0.0], vec![-0.05, 0.0], vec![0.0, 0.03], vec![0.0, -0.03]],
    };
    let set = build_ambiguity_set(&s, &AmbiguityConfig::new(0.3)).unwrap();
    let spec = label_spec(&case, &set).unwrap();
    let (dro, _) = solve_dro(&case, &set, &spec).unwrap();
    let mut boxed = spec.clone();
    for (d, (lo, hi)) in boxed.dims.iter_mut().zip(set.bounding_box()) {
        d.lo = lo;
        d.hi = hi;
    }
    let (rob, _) = solve_robust(&case, &boxed).unwrap();
    assert_abs_diff_eq!(dro.objective, rob.objective, epsilon = 1e-6);
}

#[test]
fn mapping_must_match_dimensions() {
    let case = case("4bus.json");
    let set = build_ambiguity_set(&samples(), &AmbiguityConfig::new(0.05)).unwrap();
    let spec = DisturbanceSpec::new(vec![]);
    assert!(matches!(solve_dro(&case, &set, &spec), Err(DroError::Samples(_))));
}
