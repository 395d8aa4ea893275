use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"))
}

fn ppde(args: &[&str], workers: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ppde"));
    cmd.args(args);
    match workers {
        Some(w) => cmd.env("WORKERS", w),
        None => cmd.env_remove("WORKERS"),
    };
    cmd.output().expect("binary runs")
}

fn run(stage: &str, config: &Path, out: &Path) -> Output {
    ppde(&[stage, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], None)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

/// A bundled scenario with edits applied to its JSON.
fn edited(name: &str, dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(scenario(name)).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join(format!("{name}-edited.json"));
    std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    path
}

#[test]
fn out_of_range_gamma_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = edited("ou_linear_f", tmp.path(), |v| v["model"]["gamma"] = 0.6.into());
    let o = run("all", &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn stage_without_its_block_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("simulate", &scenario("bang_bang"), &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing block"), "{}", stderr(&o));
    assert!(!tmp.path().join("out").join("report.json").exists());
}

#[test]
fn unknown_fields_and_builtins_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = edited("ou_linear_f", tmp.path(), |v| v["model"]["colour"] = "blue".into());
    let o = run("solve", &cfg, &tmp.path().join("a"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
    let cfg = edited("ou_linear_f", tmp.path(), |v| v["coefficients"]["drift"] = serde_json::json!({"type": "cubic"}));
    assert_eq!(run("solve", &cfg, &tmp.path().join("b")).status.code(), Some(2));
    let cfg = edited("ou_linear_f", tmp.path(), |v| v["solver"]["features"] = serde_json::json!(["x0", "x7^2"]));
    let o = run("solve", &cfg, &tmp.path().join("c"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("solver.features"), "{}", stderr(&o));
}

#[test]
fn oracle_scenario_passes_with_exponential_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run("all", &scenario("ou_linear_f"), &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(&out);
    assert_eq!(r["passed"], true);
    let checks = r["checks"].as_array().unwrap();
    let oracle = checks.iter().find(|c| c["name"] == "exponential_oracle").expect("oracle check");
    assert_eq!(oracle["passed"], true);
    for q in r["results"].as_array().unwrap() {
        assert!(q["stderr"].is_number() || q["exact"] == true, "{q}");
    }
    for a in r["artifacts"].as_array().unwrap() {
        let file = out.join(a["file"].as_str().unwrap());
        assert_eq!(std::fs::metadata(&file).unwrap().len(), a["bytes"].as_u64().unwrap());
    }
    assert!(out.join("ensemble.bin").exists());
    assert!(!std::fs::read_dir(&out).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn failed_checks_exit_4_and_still_write_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = edited("bang_bang", tmp.path(), |v| v["control"]["expected_value"] = 3.0.into());
    let out = tmp.path().join("out");
    let o = run("control", &cfg, &out);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("expected_value"));
    assert_eq!(report(&out)["passed"], false);
}

#[test]
fn blown_up_simulation_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = edited("ou_linear_f", tmp.path(), |v| {
        v["coefficients"]["drift"] = serde_json::json!({"type": "affine", "coef": 1e200, "offset": [0.0]});
        v["simulate"]["ou_oracle"] = false.into();
    });
    let o = run("simulate", &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn replay_is_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run("all", &scenario("ou_linear_f"), &out).status.code(), Some(0));
    for w in ["1", "4"] {
        let o = ppde(&["replay", out.to_str().unwrap()], Some(w));
        assert_eq!(o.status.code(), Some(0), "WORKERS={w}: {}", stderr(&o));
    }
    let o = ppde(&["replay", out.to_str().unwrap(), "--workers", "3"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn replay_detects_an_edited_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run("simulate", &scenario("ou_linear_f"), &out).status.code(), Some(0));
    let o = ppde(&["replay", out.to_str().unwrap(), "--seed", "8"], None);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("ensemble.bin"), "{}", stderr(&o));

    let mut r = report(&out);
    r["seed"] = 12345.into();
    std::fs::write(out.join("report.json"), serde_json::to_string(&r).unwrap()).unwrap();
    let o = ppde(&["replay", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn report_embeds_a_self_contained_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = ppde(
        &["stop", "--config", scenario("bernoulli_stop").to_str().unwrap(), "--out", a.to_str().unwrap(), "--seed", "41"],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(&a);
    assert_eq!(r["seed"], 41);
    assert_eq!(r["scenario"]["seed"], 41);
    let embedded = tmp.path().join("embedded.json");
    std::fs::write(&embedded, serde_json::to_string(&r["scenario"]).unwrap()).unwrap();
    assert_eq!(run("stop", &embedded, &b).status.code(), Some(0));
    let r2 = report(&b);
    assert_eq!(r["scenario_digest"], r2["scenario_digest"]);
    assert_eq!(r["checks"], r2["checks"]);
    assert_eq!(std::fs::read(a.join("stop_tree.csv")).unwrap(), std::fs::read(b.join("stop_tree.csv")).unwrap());
    // 1 + 2 + 4 + 8 tree nodes
    assert_eq!(std::fs::read_to_string(a.join("stop_tree.csv")).unwrap().lines().count(), 16);
}

#[test]
fn jets_are_tabulated_when_requested() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = edited("ou_linear_f", tmp.path(), |v| {
        v["verification"]["n_probes"] = 4.into();
        v["verification"]["comparison"] = false.into();
        v["verification"]["jets"] = serde_json::json!({"node": 0, "h": 4, "offsets": [-1.0, 0.0, 1.0], "n_paths": 200});
    });
    let out = tmp.path().join("out");
    let o = run("verify", &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let jets = std::fs::read_to_string(out.join("jets.csv")).unwrap();
    assert_eq!(jets.lines().count(), 1 + 3 * 2);
    assert!(!out.join("ensemble.bin").exists());
}
