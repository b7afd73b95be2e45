use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn pfpp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfpp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn crra_config() -> Value {
    json!({
        "initial": {"kind": "cmim", "atoms": [{"gamma": 2.0, "weight": 1.0}], "gamma_min": 1.0, "gamma_max": 3.0},
        "market": {"thetas": [
            {"type": "bs", "lambda": [0.3]},
            {"type": "bs", "lambda": [0.2]},
            {"type": "bs", "lambda": [0.25, 0.1]}
        ]},
        "seed": 11,
        "simulation": {"n_paths": 64}
    })
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn construct_writes_state_and_small_residuals() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.json", &crra_config());
    let out = pfpp(
        &["construct", "--config", cfg.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let state: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/state.json")).unwrap())
            .unwrap();
    assert_eq!(state["marginals"].as_array().unwrap().len(), 4);
    assert_eq!(state["period"], 3);

    let rows = read_csv(&tmp.path().join("out/residuals.csv"));
    assert!(!rows.is_empty());
    for r in rows {
        let err: f64 = r[4].parse().unwrap();
        assert!(err < 1e-9, "residual {err}");
    }
}

#[test]
fn empty_market_gives_initial_state_only() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = crra_config();
    cfg["market"]["thetas"] = json!([]);
    let cfg = write_config(tmp.path(), "run.json", &cfg);
    let out = pfpp(
        &["construct", "--config", cfg.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let state: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/state.json")).unwrap())
            .unwrap();
    assert_eq!(state["marginals"].as_array().unwrap().len(), 1);
}

#[test]
fn verify_reproduces_construct_residuals_bit_for_bit() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.json", &crra_config());
    let cfg = cfg.to_str().unwrap();
    assert_eq!(
        code(&pfpp(
            &["construct", "--config", cfg, "--out", "a"],
            tmp.path()
        )),
        0
    );
    let out = pfpp(
        &["verify", "--state", "a/state.json", "--out", "b"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let a = fs::read(tmp.path().join("a/residuals.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/residuals.csv")).unwrap();
    assert_eq!(a, b);
    for r in read_csv(&tmp.path().join("b/verification.csv")) {
        assert_eq!(r[4], "true", "{r:?}");
    }
}

#[test]
fn simulate_is_deterministic_in_the_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.json", &crra_config());
    let cfg = cfg.to_str().unwrap();
    for dir in ["s1", "s2"] {
        let out = pfpp(&["simulate", "--config", cfg, "--out", dir], tmp.path());
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(
        code(&pfpp(
            &["simulate", "--config", cfg, "--out", "s3", "--seed", "12"],
            tmp.path()
        )),
        0
    );
    let p1 = fs::read(tmp.path().join("s1/paths.csv")).unwrap();
    let p2 = fs::read(tmp.path().join("s2/paths.csv")).unwrap();
    let p3 = fs::read(tmp.path().join("s3/paths.csv")).unwrap();
    assert_eq!(p1, p2);
    assert_ne!(p1, p3);
    assert_eq!(read_csv(&tmp.path().join("s1/paths.csv")).len(), 64 * 3);
}

#[test]
fn simulate_iid_scenario() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = crra_config();
    cfg["scenario"] = json!({
        "horizon": 4,
        "source": {"type": "iid_bs", "lambda": [{"type": "uniform", "lo": 0.1, "hi": 0.4}]},
        "seed": 0
    });
    let cfg = write_config(tmp.path(), "run.json", &cfg);
    let out = pfpp(&["simulate", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["periods"].as_array().unwrap().len(), 4);
    let mean = summary["deflated_terminal_mean"].as_f64().unwrap();
    let se = summary["deflated_terminal_stderr"].as_f64().unwrap();
    assert!(
        (mean - 1.0).abs() < 5.0 * se + 1e-12,
        "mean {mean} stderr {se}"
    );
}

#[test]
fn deconv_command_writes_diagnostics() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = crra_config();
    cfg["market"]["thetas"] = json!([{"type": "bs", "lambda": [0.3]}]);
    cfg["deconv"] = json!({"gamma1": 1.0, "gamma2": 3.0});
    let cfg = write_config(tmp.path(), "run.json", &cfg);
    let out = pfpp(&["deconv", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "solution.csv",
        "spectrum_1.csv",
        "spectrum_2.csv",
        "deconv.json",
    ] {
        assert!(tmp.path().join("out").join(f).exists(), "{f}");
    }
    let report: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/deconv.json")).unwrap())
            .unwrap();
    assert!(report["residual"].as_f64().unwrap() < 1e-6);
    assert!(report["closed_form_max_rel_error"].as_f64().unwrap() < 1e-6);
    assert_eq!(report["ill_posed"], false);
}

#[test]
fn report_writes_utility_tables() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.json", &crra_config());
    let out = pfpp(&["report", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for k in 0..=3 {
        let rows = read_csv(&tmp.path().join(format!("out/utility_{k}.csv")));
        let values: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
        assert!(
            values.windows(2).all(|w| w[1] > w[0]),
            "utility {k} not increasing"
        );
    }
}

#[test]
fn config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let grid_initial = json!({
        "initial": {"kind": "cmim", "atoms": [{"gamma": 2.0, "weight": 1.0}], "gamma_min": 1.0, "gamma_max": 3.0},
        "market": {"thetas": [{"type": "bs", "lambda": [0.3]}]},
        "route": "deconv",
        "deconv": {"gamma1": 1.0, "gamma2": 3.0}
    });
    let cfg = write_config(tmp.path(), "grid.json", &grid_initial);
    assert_eq!(
        code(&pfpp(
            &["construct", "--config", cfg.to_str().unwrap(), "--out", "g"],
            tmp.path()
        )),
        0
    );

    // A grid-backed marginal cannot take the CMIM route.
    let state: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("g/state.json")).unwrap())
            .unwrap();
    let cfg = write_config(
        tmp.path(),
        "cmim.json",
        &json!({
            "initial": state["marginals"][1],
            "market": {"thetas": [{"type": "bs", "lambda": [0.3]}]},
            "route": "cmim"
        }),
    );
    assert_eq!(
        code(&pfpp(
            &["construct", "--config", cfg.to_str().unwrap()],
            tmp.path()
        )),
        2
    );

    let mut unknown = crra_config();
    unknown["bogus"] = json!(1);
    let cfg = write_config(tmp.path(), "unknown.json", &unknown);
    assert_eq!(
        code(&pfpp(
            &["construct", "--config", cfg.to_str().unwrap()],
            tmp.path()
        )),
        2
    );

    assert_eq!(code(&pfpp(&["construct"], tmp.path())), 2);
    assert_eq!(
        code(&pfpp(
            &["construct", "--config", "missing.json"],
            tmp.path()
        )),
        2
    );
}

#[test]
fn simulation_without_paths_exits_3() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = crra_config();
    cfg["simulation"] = json!({"n_paths": 0});
    let cfg = write_config(tmp.path(), "run.json", &cfg);
    assert_eq!(
        code(&pfpp(
            &["simulate", "--config", cfg.to_str().unwrap()],
            tmp.path()
        )),
        3
    );
}

#[test]
fn residual_gate_exits_4() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.json", &crra_config());
    let out = pfpp(
        &[
            "construct",
            "--config",
            cfg.to_str().unwrap(),
            "--tolerance",
            "1e-30",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 4);
    assert!(!tmp.path().join("out/state.json").exists());
}

#[test]
fn corrupted_state_fails_verification_with_5() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.json", &crra_config());
    assert_eq!(
        code(&pfpp(
            &["construct", "--config", cfg.to_str().unwrap()],
            tmp.path()
        )),
        0
    );
    let mut state: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/state.json")).unwrap())
            .unwrap();
    state["periods"][0]["kernel"]["sigma2"] = json!(0.2);
    fs::write(tmp.path().join("bad.json"), state.to_string()).unwrap();
    let out = pfpp(&["verify", "--state", "bad.json", "--out", "v"], tmp.path());
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("residual"));
}
