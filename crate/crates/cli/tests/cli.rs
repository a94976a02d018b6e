//! End-to-end runs of the `divband` binary on small fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use divband_cli::artifacts::{self, read_policy, read_value_function};
use divband_cli::{run_simulate, run_solve, Overrides, RunConfig};
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn divband(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divband")).args(args).output().expect("binary runs")
}

fn solve_into(config: &str, out: &Path) -> Output {
    let o = divband(&["solve", fixture(config).to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.code().is_some(), "killed");
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn check<'a>(report: &'a Value, name: &str, subject: &str) -> &'a Value {
    report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == name && c["subject"] == subject)
        .unwrap_or_else(|| panic!("no check {name}/{subject}"))
}

fn verify(config: &str, out: &Path) -> (i32, Value) {
    let o = divband(&["verify", fixture(config).to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let report = json(&out.join(artifacts::VERIFICATION_REPORT));
    (o.status.code().unwrap(), report)
}

#[test]
fn bundled_fixtures_parse_and_validate() {
    for entry in fs::read_dir(fixture("")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if name.ends_with("_model.toml") || !name.ends_with(".toml") {
            continue;
        }
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn solve_writes_stamped_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = solve_into("single_line_exp.toml", dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = RunConfig::load(&fixture("single_line_exp.toml")).unwrap();
    let hash = cfg.hash();
    for name in [artifacts::VALUE_FUNCTION, artifacts::CONVERGENCE] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(text.starts_with(&format!("# divband {}\n", artifacts::VERSION)), "{name}");
        assert!(text.contains(&format!("# config_hash {hash}\n")), "{name}");
    }
    for name in [artifacts::POLICY, artifacts::RESIDUAL_REPORT] {
        let doc = json(&dir.path().join(name));
        assert_eq!(doc["config_hash"], hash.as_str());
        assert_eq!(doc["version"], artifacts::VERSION);
    }
    let header = fs::read_to_string(dir.path().join(artifacts::VALUE_FUNCTION)).unwrap();
    let columns = header.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(columns, "x,f,fprime,V,residual");

    let policy = read_policy(&dir.path().join(artifacts::POLICY)).unwrap().body.policy;
    assert_eq!(policy.levels.len(), 1);
    // Single exponential line: the barrier of the classical problem is near 2.21.
    assert!((policy.levels[0] - 2.21).abs() < 0.05, "{:?}", policy.levels);
    let report = json(&dir.path().join(artifacts::RESIDUAL_REPORT));
    assert_eq!(report["verified"], true);
    assert_eq!(report["lump_bands"][0]["upper"], "inf");
}

#[test]
fn policy_file_round_trips_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    solve_into("barrier_at_zero.toml", dir.path());
    let path = dir.path().join(artifacts::POLICY);
    let first = read_policy(&path).unwrap();
    let again = dir.path().join("again.json");
    artifacts::write_policy(&again, &first.config_hash, &first.body.policy).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    let second = read_policy(&again).unwrap();
    assert_eq!(first.body.policy, second.body.policy);
    for (a, b) in first.body.policy.levels.iter().zip(&second.body.policy.levels) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn per_line_contract_columns_follow_the_family() {
    let dir = tempfile::tempdir().unwrap();
    solve_into("barrier_at_zero.toml", dir.path());
    let text = fs::read_to_string(dir.path().join(artifacts::VALUE_FUNCTION)).unwrap();
    let columns = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(columns, "x,f,fprime,V,residual,line1_b");
    let table = read_value_function(&dir.path().join(artifacts::VALUE_FUNCTION)).unwrap();
    assert!((table.h() - 0.01).abs() < 1e-12);
}

#[test]
fn nonpositive_step_exits_1_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    for h in ["0", "-0.1"] {
        let o = divband(&[
            "solve",
            fixture("single_line_exp.toml").to_str().unwrap(),
            &format!("--h={h}"),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&o.stderr).contains("numerics.h"));
    }
}

#[test]
fn unreadable_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[numerics]\nh = \"fast\"\n").unwrap();
    let o = divband(&["solve", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = divband(&["solve", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulation_agrees_with_grid_value() {
    let dir = tempfile::tempdir().unwrap();
    let ov = Overrides { out: Some(dir.path().to_path_buf()), ..Default::default() };
    let cfg = fixture("single_line_exp.toml");
    assert!(run_solve(&cfg, &ov).unwrap().verified);
    let outcome = run_simulate(&cfg, &ov).unwrap();
    let report = json(&dir.path().join(artifacts::SIMULATION_REPORT));
    let points = report["points"].as_array().unwrap();
    assert_eq!(points.len(), 3);
    let a1 = read_policy(&dir.path().join(artifacts::POLICY)).unwrap().body.policy.levels[0];
    let x0: Vec<f64> = points.iter().map(|p| p["x0"].as_f64().unwrap()).collect();
    assert_eq!(x0, vec![0.0, a1 / 2.0, a1]);
    for p in points {
        let (mc, v, se) = (
            p["mean_discounted_dividends"].as_f64().unwrap(),
            p["v_h"].as_f64().unwrap(),
            p["std_error"].as_f64().unwrap(),
        );
        assert!((mc - v).abs() <= 3.0 * se, "{p}");
        assert_eq!(p["within_3se"], true);
    }
    assert!(outcome.verified);
}

#[test]
fn zero_paths_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    solve_into("barrier_at_zero.toml", dir.path());
    let o = divband(&[
        "simulate",
        fixture("barrier_at_zero.toml").to_str().unwrap(),
        "--paths",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("paths"));
}

#[test]
fn mismatched_model_exits_1_with_both_hashes() {
    let dir = tempfile::tempdir().unwrap();
    solve_into("barrier_at_zero.toml", dir.path());
    let policy = dir.path().join(artifacts::POLICY);
    let stored = read_policy(&policy).unwrap().body.policy.model_hash.unwrap();
    let other = RunConfig::load(&fixture("single_line_exp.toml")).unwrap();
    let expected = divband_cli::config::model_hash(other.model().unwrap());
    for cmd in ["simulate", "verify"] {
        let o = divband(&[
            cmd,
            fixture("single_line_exp.toml").to_str().unwrap(),
            "--policy",
            policy.to_str().unwrap(),
            "--out",
            dir.path().join("other").to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(1), "{cmd}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(&stored) && err.contains(&expected), "{err}");
    }
}

#[test]
fn verify_without_artifacts_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = divband(&["verify", fixture("barrier_at_zero.toml").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing artifact"));
}

#[test]
fn fresh_solve_passes_every_check_when_the_barrier_is_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    solve_into("barrier_at_zero.toml", dir.path());
    let (code, report) = verify("barrier_at_zero.toml", dir.path());
    assert_eq!(code, 0, "{report:#}");
    assert_eq!(report["all_passed"], true);
    assert!(check(&report, "boundary_closed_form", "policy")["margin"].as_f64().unwrap() > 0.0);
}

#[test]
fn fresh_solve_with_interior_barrier_fails_only_the_boundary_formula() {
    // The boundary formula is the value of paying out from zero, a lower
    // bound on V(0) that is attained only when the barrier is at zero.
    let dir = tempfile::tempdir().unwrap();
    solve_into("single_line_exp.toml", dir.path());
    let (code, report) = verify("single_line_exp.toml", dir.path());
    assert_eq!(code, 2);
    for c in report["checks"].as_array().unwrap() {
        let boundary = c["name"] == "boundary_closed_form";
        assert_eq!(c["passed"], !boundary, "{c}");
    }
    let detail = check(&report, "boundary_closed_form", "policy")["detail"].as_str().unwrap().to_string();
    let nums: Vec<f64> = detail
        .split(|ch: char| !(ch.is_ascii_digit() || ch == '.'))
        .filter_map(|s| s.parse().ok())
        .collect();
    assert!(nums[1] >= nums[2], "{detail}");
}

fn shift_barrier(dir: &Path, shift: f64) -> f64 {
    let path = dir.join(artifacts::POLICY);
    let mut doc = json(&path);
    let p = &mut doc["policy"];
    let h = p["h"].as_f64().unwrap();
    let level = p["levels"][0].as_f64().unwrap() + shift;
    p["levels"][0] = level.into();
    p["lump_bands"][0]["lower"] = level.into();
    let cells = (level / h).round() as usize + 1;
    let r = p["reinsurance"].as_array_mut().unwrap();
    let last = r.last().unwrap().clone();
    r.resize(cells, last);
    fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
    level
}

#[test]
fn moved_barrier_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    solve_into("single_line_exp.toml", dir.path());
    let a = read_policy(&dir.path().join(artifacts::POLICY)).unwrap().body.policy.levels[0];
    let moved = shift_barrier(dir.path(), 1.0);
    let (code, report) = verify("single_line_exp.toml", dir.path());
    assert_eq!(code, 2);
    assert_eq!(check(&report, "value_consistency", "table")["passed"], false);
    // V' < 1 below the moved barrier.
    let slope = check(&report, "slope", "policy");
    assert_eq!(slope["passed"], false);
    let iv = &slope["intervals"][0];
    let (from, to) = (iv["from"].as_f64().unwrap(), iv["to"].as_f64().unwrap());
    assert!(from < a && to <= moved && to > a, "{iv}");
    assert_eq!(check(&report, "barrier_lambda", "table")["passed"], false);
}

#[test]
fn far_moved_barrier_fails_the_residual_check() {
    let dir = tempfile::tempdir().unwrap();
    solve_into("single_line_exp.toml", dir.path());
    let moved = shift_barrier(dir.path(), 3.0);
    let (code, report) = verify("single_line_exp.toml", dir.path());
    assert_eq!(code, 2);
    let res = check(&report, "hjb_residual", "policy");
    assert_eq!(res["passed"], false);
    let iv = &res["intervals"][0];
    assert!(iv["from"].as_f64().unwrap() < moved, "{iv}");
}

#[test]
fn scaled_table_fails_the_barrier_check() {
    let dir = tempfile::tempdir().unwrap();
    solve_into("single_line_exp.toml", dir.path());
    let path = dir.path().join(artifacts::VALUE_FUNCTION);
    let text = fs::read_to_string(&path).unwrap();
    let mut out = String::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with('x') {
            out.push_str(line);
        } else {
            let mut cols: Vec<String> = line.split(',').map(String::from).collect();
            let v: f64 = cols[3].parse().unwrap_or_else(|_| panic!("line {n}"));
            cols[3] = (1.1 * v).to_string();
            out.push_str(&cols.join(","));
        }
        out.push('\n');
    }
    fs::write(&path, out).unwrap();
    let (code, report) = verify("single_line_exp.toml", dir.path());
    assert_eq!(code, 2);
    assert_eq!(check(&report, "slope", "table")["passed"], true);
    assert_eq!(check(&report, "barrier_lambda", "table")["passed"], false);
    assert_eq!(check(&report, "value_consistency", "table")["passed"], false);
}

#[test]
fn converge_writes_a_monotone_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = divband(&[
        "converge",
        fixture("single_line_exp.toml").to_str().unwrap(),
        "--h-list",
        "0.04,0.02,0.01",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let text = fs::read_to_string(dir.path().join(artifacts::CONVERGENCE)).unwrap();
    assert!(text.contains("# monotone true"));
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "h,a1,v0,max_residual,verified,a1_diff,v0_diff");
    assert_eq!(rows.len(), 4);
}

#[test]
fn converge_needs_steps() {
    let dir = tempfile::tempdir().unwrap();
    let o = divband(&["converge", fixture("barrier_at_zero.toml").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("numerics.h_list"));
}
