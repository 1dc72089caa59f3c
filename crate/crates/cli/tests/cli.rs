use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> String {
    root().join("fixtures").join(name).to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridreserve")).args(args).output().expect("binary runs")
}

fn run_in(out: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    let dir = out.to_str().unwrap();
    all.extend(["--out", dir]);
    run(&all)
}

fn check_schema(report: &Path, schema: &str) {
    let schema_path = root().join("schemas").join(format!("{schema}.schema.json"));
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(schema_path).unwrap()).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(&doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{} violates {schema}: {errors:?}", report.display());
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

#[test]
fn baseline_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["baseline", "--case", &fixture("4bus.json"), "--dump-lp"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    check_schema(&dir.path().join("solution.json"), "solution");
    let csv = std::fs::read_to_string(dir.path().join("solution.csv")).unwrap();
    assert!(csv.starts_with("case,step,device,kind,p_pu,q_pu,soc_pu_h,curtail_p_pu\n"));
    assert!(dir.path().join("program.lp").exists());
    // No temporaries left behind by the atomic writes.
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 3, "{names:?}");
}

#[test]
fn every_report_matches_its_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let case4 = fixture("4bus.json");
    let cases: Vec<(Vec<String>, &str, &str)> = vec![
        (vec!["robust".into(), "--case".into(), case4.clone(), "--spec".into(), fixture("robust_dg_trip.json")], "robust", "reserve_run"),
        (vec!["chance".into(), "--case".into(), case4.clone(), "--gaussian".into(), fixture("gaussian_4bus.json")], "chance", "reserve_run"),
        (vec!["dro".into(), "build-set".into(), "--samples".into(), fixture("dro_samples.json")], "ambiguity_set", "ambiguity_set"),
        (vec!["dro".into(), "solve".into(), "--case".into(), case4.clone(), "--samples".into(), fixture("dro_samples.json")], "dro", "reserve_run"),
        (
            vec!["verify".into(), "radius".into(), "--case".into(), fixture("2bus.json"), "--spec".into(), fixture("2bus_load_box.json")],
            "radius",
            "radius",
        ),
        (
            vec!["verify".into(), "gain".into(), "--case".into(), case4.clone(), "--spec".into(), fixture("robust_dg_trip.json")],
            "gain",
            "gain",
        ),
        (
            vec![
                "simulate".into(), "--case".into(), case4.clone(), "--method".into(), "chance".into(),
                "--gaussian".into(), fixture("gaussian_4bus.json"), "--n".into(), "500".into(),
            ],
            "validation",
            "validation",
        ),
        (
            vec![
                "pareto".into(), "--case".into(), case4.clone(), "--method".into(), "chance".into(),
                "--gaussian".into(), fixture("gaussian_4bus.json"), "--n".into(), "200".into(), "--grid".into(), "0.05,0.9".into(),
            ],
            "pareto",
            "pareto",
        ),
        (vec!["modes".into(), "--case".into(), case4.clone(), "--events".into(), fixture("events_4bus.json")], "modes", "modes"),
    ];
    for (args, stem, schema) in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = run_in(d, &args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        check_schema(&d.join(format!("{stem}.json")), schema);
        assert!(d.join(format!("{stem}.csv")).exists());
    }
}

#[test]
fn rho_outside_unit_interval_is_an_input_error() {
    let o = run(&["dro", "build-set", "--samples", &fixture("dro_samples.json"), "--rho", "1.5"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("rho must be in (0,1)"));
}

#[test]
fn input_and_infeasibility_exit_codes() {
    assert_eq!(code(&run(&["baseline", "--case", "does-not-exist.json"])), 2);
    assert_eq!(code(&run(&["baseline", "--case", &fixture("4bus.json"), "--no-such-flag"])), 2);
    // The 2-bus box asks for more load than generation can ever supply.
    let o = run(&["robust", "--case", &fixture("2bus.json"), "--spec", &fixture("2bus_load_box.json")]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    // Unreserved baseline against the event catalog fails validation.
    let o = run(&["simulate", "--case", &fixture("4bus.json"), "--method", "baseline", "--events", &fixture("events_4bus.json"), "--n", "200"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn csv_format_on_stdout() {
    let o = run(&["modes", "--case", &fixture("4bus.json"), "--events", &fixture("events_4bus.json"), "--format", "csv"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("from,to,mode,value"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn seed_determines_simulation_bytes() {
    let args = |seed: &'static str, threads: &'static str| {
        vec![
            "simulate".to_string(), "--case".into(), fixture("4bus.json"), "--events".into(), fixture("events_dro_shifted.json"),
            "--samples".into(), fixture("dro_samples.json"), "--method".into(), "dro".into(), "--rho".into(), "0.05".into(),
            "--n".into(), "20000".into(), "--seed".into(), seed.into(), "--threads".into(), threads.into(),
        ]
    };
    let bytes = |a: Vec<String>| {
        let dir = tempfile::tempdir().unwrap();
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        let o = run_in(dir.path(), &a);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read(dir.path().join("validation.json")).unwrap(), std::fs::read(dir.path().join("validation.csv")).unwrap())
    };
    let first = bytes(args("42", "1"));
    assert_eq!(first, bytes(args("42", "4")));
    assert_ne!(first.0, bytes(args("43", "4")).0);
}

#[test]
fn threads_fall_back_to_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_gridreserve"))
        .args(["modes", "--case", &fixture("4bus.json"), "--events", &fixture("events_4bus.json")])
        .env("GRIDRESERVE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}
