use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fairagg"));
    c.env_remove("FAIRAGG_THREADS");
    c
}

fn core_tests() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "stderr should be one line: {text}");
    serde_json::from_str(text.trim()).unwrap()
}

/// Estimate for `term` of `model` in a coefficient table.
fn coefficient(table: &str, model: &str, term: &str) -> f64 {
    table
        .lines()
        .find_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() == 4 && f[0] == model && f[1] == term).then(|| f[2].parse().unwrap())
        })
        .unwrap_or_else(|| panic!("no {model}/{term} in\n{table}"))
}

#[test]
fn simulate_then_fit_recovers_simpsons_paradox() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim-a.cfg");
    std::fs::write(&cfg, "seed = 11\n[simulate]\nscenario = sim-a\nrows_per_bank = 20000\n").unwrap();
    let panel = tmp.path().join("panel.csv");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", panel.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let o = run(&["fit", "--panel", panel.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let table = stdout(&o);
    assert!(coefficient(&table, "feo", "x1").abs() < 0.02);
    assert!((coefficient(&table, "pooled", "x1") - 0.25).abs() < 0.02);
}

#[test]
fn compare_on_the_fixture_frame_matches_golden() {
    let frame = core_tests().join("golden/frame_cc.csv");
    let o = run(&["compare", "--panel", frame.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let golden = std::fs::read_to_string(core_tests().join("golden/compare_cc.txt")).unwrap();
    assert!(stdout(&o) == golden, "compare output differs from golden:\n{}", stdout(&o));
}

#[test]
fn prepare_reproduces_golden_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let fixtures = core_tests().join("fixtures");
    let o = run(&[
        "prepare",
        "--raw",
        fixtures.join("raw_panel.csv").to_str().unwrap(),
        "--macro",
        fixtures.join("macro.csv").to_str().unwrap(),
        "--out-dir",
        tmp.path().to_str().unwrap(),
        "--fit-start",
        "2000-Q1",
        "--fit-end",
        "2019-Q4",
    ]);
    assert!(o.status.success(), "{o:?}");
    for name in ["frame_cc.csv", "frame_fl.csv", "exclusions.json"] {
        let got = std::fs::read(tmp.path().join(name)).unwrap();
        let want = std::fs::read(core_tests().join("golden").join(name)).unwrap();
        assert!(got == want, "{name} differs");
    }
    assert!(tmp.path().join("clean_rates.csv").exists());
    assert!(tmp.path().join("macro_pc1.csv").exists());
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let args = ["simulate", "--scenario", "random", "--n-banks", "3", "--rows-per-bank", "50", "--seed", "4"];
    let a = run(&args);
    let b = bin().args(args).env("FAIRAGG_THREADS", "1").output().unwrap();
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).starts_with("# fairagg "));
    assert!(!stdout(&a).contains('\r'));
}

#[test]
fn missing_panel_is_a_data_error() {
    let o = run(&["fit", "--panel", "missing.csv"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "data");
    assert_eq!(err["path"], "missing.csv");
}

#[test]
fn usage_errors_exit_two() {
    for args in [&["fit", "--bogus"][..], &["frobnicate"][..], &["fit"][..], &["fit", "--panel", "x", "--covariance", "weekly"][..]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&o)["error"], "usage");
    }
    let o = bin().args(["simulate"]).env("FAIRAGG_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_lists_valid_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "[compare]\npanle = x.csv\n").unwrap();
    let o = run(&["compare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr_json(&o)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("panle") && msg.contains("panel"), "{msg}");
}

#[test]
fn flags_override_config_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    std::fs::write(&cfg, "[sensitivity]\nscenario = sim-b\npoints = 1\n").unwrap();
    let o = run(&["sensitivity", "--config", cfg.to_str().unwrap(), "--points", "3"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    // SIM-A would give 1.0 here; SIM-B has mu = 0, so d/dbeta_1 = 0.5 * 3 * 1 / 2
    assert!(text.contains("feo,beta,b00,point,3,0.75,determined,+,"), "{text}");
    assert!(!text.contains(",point,1,"));
}

#[test]
fn test_and_gam_subcommands_run() {
    let tmp = tempfile::tempdir().unwrap();
    let panel = tmp.path().join("p.csv");
    let o = run(&["simulate", "--scenario", "sim-c", "--rows-per-bank", "300", "--out", panel.to_str().unwrap()]);
    assert!(o.status.success());
    let o = run(&["test", "--panel", panel.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(text.contains("bank,slope:x1,") && text.contains("time,intercept,"));
    let o = run(&["gam", "--panel", panel.to_str().unwrap(), "--dof", "3"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    for t in ["# table: gam_models", "# table: f_test", "# table: bank_offsets", "# table: relative_differences"] {
        assert!(text.contains(t), "{t}");
    }
    let o = run(&["fit", "--panel", panel.to_str().unwrap(), "--ar", "one"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("feo,lag_response,"));
}
