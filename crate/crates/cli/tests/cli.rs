use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use chemoplan::solver::read_mps;
use chemoplan::validate::{micro_chemo_params, restrict_tumor};
use chemoplan::{default_params, load_params, ParamBundle, ScenarioSet};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chemoplan"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .env_remove("CHEMOPLAN_SOLVER")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_params(dir: &Path, p: &ParamBundle) -> String {
    let path = dir.join("params.toml");
    fs::write(&path, p.to_toml_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn docetaxel_micro() -> ParamBundle {
    let base = default_params();
    let d = base.drug_index("docetaxel").unwrap();
    let mut p = base.clone();
    p.drugs = vec![base.drugs[d].clone()];
    p.tumor = restrict_tumor(&p.tumor, "docetaxel");
    p.grid = p.grid.with_horizon(3).with_step_minutes(720).unwrap();
    p.wbc.delay_days = 1;
    p
}

#[test]
fn drug_free_simulation_grows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["simulate", "--no-drugs"]);
    assert!(o.status.success());
    let mut rd = csv::Reader::from_path(dir.path().join("log_pops.csv")).unwrap();
    let sum_col = rd.headers().unwrap().iter().position(|h| h.starts_with("sum")).unwrap();
    let sums: Vec<f64> = rd.records().map(|r| r.unwrap()[sum_col].parse().unwrap()).collect();
    assert_eq!(sums.len(), 21 * 24 + 1);
    assert!(sums.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn bad_step_exits_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["build", "--h-minutes", "7"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step_minutes"));
}

#[test]
fn build_writes_readable_mps() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["build", "--h-minutes", "240"]);
    assert!(o.status.success());
    let m = read_mps(dir.path().join("chemo_deterministic.mps")).unwrap();
    let s = m.stats();
    assert_eq!((s.integers, s.binaries), (714, 588));
}

#[test]
fn builtin_solve_then_regularize_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path(), &micro_chemo_params(&default_params()).unwrap());
    let o = run(
        dir.path(),
        &["--params", &params, "solve", "--solver", "builtin", "--bilinear", "mccormick"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("status optimal"));
    for f in ["solution.sol", "plan.csv", "feasibility.txt", "log_pops.csv", "wbc.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(dir.path().join("feasibility.txt")).unwrap();
    assert!(report.contains("violations 0"));

    let plan = dir.path().join("plan.csv");
    let o = run(dir.path(), &["--params", &params, "regularize", "--plan", plan.to_str().unwrap()]);
    assert!(dir.path().join("regulated_plan.csv").exists());
    assert!(stdout(&o).contains("regulated"));

    let o = run(
        dir.path(),
        &[
            "--params", &params, "sweep", "--target", "eta0:etoposide", "--fractions", "0.9,1.1",
            "--solver", "builtin", "--bilinear", "mccormick",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rd = csv::Reader::from_path(dir.path().join("sweep_eta0_etoposide.csv")).unwrap();
    let objs: Vec<f64> = rd.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(objs.len(), 2);
    assert!(objs[1] <= objs[0]);
}

#[test]
fn infeasible_target_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = docetaxel_micro();
    let params = write_params(dir.path(), &p);
    let scen = dir.path().join("scen.csv");
    fs::write(&scen, "non-resistant,docetaxel-resistant,probability\n20.5,17.9,1.0\n").unwrap();
    let o = run(
        dir.path(),
        &[
            "--params", &params, "solve", "--solver", "builtin", "--bilinear", "mccormick", "--chance",
            "--scenarios", scen.to_str().unwrap(), "--epsilon", "0", "--n-surg", "1e8",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn scenarios_and_calibration_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["scenarios", "--replications", "400", "--generations", "12", "--k", "3", "--populations"],
    );
    assert!(o.status.success());
    let set = ScenarioSet::load_csv(dir.path().join("scenarios.csv")).unwrap();
    assert!(set.len() <= 3);
    assert!((set.scenarios.iter().map(|s| s.prob).sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(dir.path().join("populations.csv").exists());

    let o = run(dir.path(), &["calibrate", "--drug", "docetaxel", "--trials", "200"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p = load_params(dir.path().join("params_calibrated.toml")).unwrap();
    let eta = p.drugs[p.drug_index("docetaxel").unwrap()].eta0;
    let table = fs::read_to_string(dir.path().join("calibration.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with(&format!("docetaxel,{eta}")));
}

#[test]
fn validate_passes_with_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--seed", "7", "validate"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn same_seed_same_scenarios() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(run(d.path(), &["--seed", "11", "scenarios", "--replications", "300", "--k", "4"]).status.success());
    }
    assert_eq!(
        fs::read_to_string(a.path().join("scenarios.csv")).unwrap(),
        fs::read_to_string(b.path().join("scenarios.csv")).unwrap()
    );
}
