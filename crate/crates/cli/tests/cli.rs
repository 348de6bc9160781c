use std::path::Path;
use std::process::{Command, Output};

const PATCH_MEAN: &str = r#"{"d1": 4, "d2": 4, "kappa": 1, "patch_function": {"kind": "patch-mean"}}"#;
const CONSTANT: &str = r#"{"d1": 4, "d2": 4, "kappa": 1, "patch_function": {"kind": "constant", "value": 0.3}}"#;

fn overcnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_overcnn"))
        .args(args)
        .current_dir(dir)
        .env("THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn gen(dir: &Path, dist: &str, n: usize, output: &str) {
    let name = format!("gen_{output}.json");
    write(
        dir,
        &name,
        &format!(r#"{{"distribution": {dist}, "n": {n}, "seed": 17, "output": "{output}", "bayes_samples": 2000}}"#),
    );
    let out = overcnn(dir, &["gen-data", &name]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn gen_data_constant_target() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), CONSTANT, 1000, "data.csv");
    let text = std::fs::read_to_string(dir.path().join("data.csv")).unwrap();
    let labels: Vec<f64> = text.lines().skip(2).map(|l| l[..1].parse().unwrap()).collect();
    assert_eq!(labels.len(), 1000);
    let mean = labels.iter().sum::<f64>() / 1000.0;
    assert!((0.25..=0.35).contains(&mean), "label mean {mean}");
    assert!(text.lines().next().unwrap().contains("config_sha256"));
}

#[test]
fn gen_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), PATCH_MEAN, 50, "a.csv");
    let first = std::fs::read(dir.path().join("a.csv")).unwrap();
    gen(dir.path(), PATCH_MEAN, 50, "a.csv");
    assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), first);
}

#[test]
fn missing_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "bad.json",
        r#"{"distribution": {"d1": 4, "d2": 4, "patch_function": {"kind": "patch-mean"}}, "n": 10, "seed": 1, "output": "x.csv"}"#,
    );
    let out = overcnn(dir.path(), &["gen-data", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("kappa"), "{}", stderr(&out));
}

#[test]
fn unreadable_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = overcnn(dir.path(), &["gen-data", "missing.json"]);
    assert_eq!(out.status.code(), Some(3));
}

fn train_config(dir: &Path, name: &str, dataset: &str, hyper: &str) {
    write(
        dir,
        name,
        &format!(
            r#"{{"dataset": "{dataset}", "kappa": 1, "seed": 5, "hyperparams": {hyper},
                "outputs": {{"weights": "{name}.w.json", "trace": "{name}.trace.csv", "report": "{name}.report.json"}}}}"#
        ),
    );
}

fn final_risk(out: &Output) -> f64 {
    let text = stdout(out);
    let line = text.lines().find(|l| l.starts_with("final F_n")).unwrap();
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

fn initial_risk(out: &Output) -> f64 {
    let text = stdout(out);
    let line = text.lines().find(|l| l.starts_with("initial F_n")).unwrap();
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn train_on_all_zero_labels_stays_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), r#"{"d1": 4, "d2": 4, "kappa": 1, "patch_function": {"kind": "constant", "value": 0.0}}"#, 30, "zeros.csv");
    train_config(dir.path(), "t.json", "zeros.csv", r#"{"mode": "desk", "K_n": 4, "L_n": 10, "t_n": 20}"#);
    let out = overcnn(dir.path(), &["train", "t.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(final_risk(&out), 0.0);
}

#[test]
fn zero_steps_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), PATCH_MEAN, 30, "d.csv");
    train_config(dir.path(), "t.json", "d.csv", r#"{"mode": "desk", "K_n": 3, "L_n": 10, "t_n": 0}"#);
    let out = overcnn(dir.path(), &["train", "t.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("t.json.w.json")).unwrap();
    let w = overcnn::io::weights_from_json(&text).unwrap();
    let hp = overcnn::HyperParams::desk(30, 1, 2, 0.5, 3, 10, 0, Default::default()).unwrap();
    let init = overcnn::training::init_weights(w.topology(), &hp, 5).unwrap();
    assert_eq!(text, overcnn::io::weights_to_json(&init).unwrap());
    assert_eq!(initial_risk(&out), final_risk(&out));
}

#[test]
fn desk_training_lowers_the_risk() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), PATCH_MEAN, 100, "d.csv");
    train_config(dir.path(), "t.json", "d.csv", r#"{"mode": "desk", "K_n": 16}"#);
    let out = overcnn(dir.path(), &["train", "t.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(final_risk(&out) < initial_risk(&out));
    let report = std::fs::read_to_string(dir.path().join("t.json.report.json")).unwrap();
    assert!(report.contains("\"lipschitz_estimated\": true"));
    let trace = std::fs::read_to_string(dir.path().join("t.json.trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "step,risk,grad_norm,displacement,lambda");
}

#[test]
fn divergent_step_size_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), PATCH_MEAN, 40, "d.csv");
    train_config(dir.path(), "t.json", "d.csv", r#"{"mode": "desk", "K_n": 8, "L_n": 1, "t_n": 5000, "constants": {"c2": 1.0, "c3": 1.0, "c4": 5.0, "c5": 5.0}}"#);
    let out = overcnn(dir.path(), &["train", "t.json"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("gradient step"));
}

#[test]
fn theory_mode_overflows_at_desk_sizes() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), PATCH_MEAN, 30, "d.csv");
    train_config(dir.path(), "t.json", "d.csv", r#"{"mode": "theory"}"#);
    let out = overcnn(dir.path(), &["train", "t.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("overflow"));
}

#[test]
fn seed_override_changes_the_weights() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), PATCH_MEAN, 30, "d.csv");
    train_config(dir.path(), "t.json", "d.csv", r#"{"mode": "desk", "K_n": 3, "L_n": 20, "t_n": 3}"#);
    assert!(overcnn(dir.path(), &["train", "t.json"]).status.success());
    let a = std::fs::read(dir.path().join("t.json.w.json")).unwrap();
    assert!(overcnn(dir.path(), &["train", "t.json", "--seed", "6", "--t-n", "4"]).status.success());
    let b = std::fs::read(dir.path().join("t.json.w.json")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn eval_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), PATCH_MEAN, 60, "d.csv");
    write(
        dir.path(),
        "t.json",
        r#"{"dataset": "d.csv", "kappa": 1, "seed": 5, "hyperparams": {"mode": "desk", "K_n": 4, "L_n": 30, "t_n": 30},
            "outputs": {"weights": "w.bin", "trace": "trace.csv"}}"#,
    );
    assert!(overcnn(dir.path(), &["train", "t.json"]).status.success());
    let topology = r#"{"L": 2, "M": [1, 1, 1], "k": [1, 2, 1], "K": 4, "d1": 4, "d2": 4, "kappa": 1}"#;
    write(dir.path(), "topology.json", topology);
    write(
        dir.path(),
        "e.json",
        &format!(r#"{{"weights": "w.bin", "topology": {topology}, "distribution": {PATCH_MEAN}, "seed": 2, "samples": 1000, "output": "eval.out.json"}}"#),
    );
    let out = overcnn(dir.path(), &["eval", "e.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("eval.out.json")).unwrap();
    for key in ["misclassification_risk", "bayes_risk", "l2_risk", "lemma1", "config_sha256"] {
        assert!(report.contains(key), "{key}");
    }

    write(
        dir.path(),
        "e2.json",
        &format!(r#"{{"weights": "w.bin", "distribution": {PATCH_MEAN}, "seed": 2, "output": "x.json"}}"#),
    );
    assert_eq!(overcnn(dir.path(), &["eval", "e2.json"]).status.code(), Some(2));

    let out = overcnn(dir.path(), &["inspect", "w.bin", "--topology", "topology.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("parameters = 32"));
}

#[test]
fn lemma7_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = overcnn(dir.path(), &["check", "lemma7"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["cases"].as_array().unwrap().len(), 51);
}

#[test]
fn gradient_suite_passes_on_default_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = overcnn(dir.path(), &["check", "gradients", "--output", "g.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("PASS"));
}

#[test]
fn lemma2_suite_flags_a_tiny_smoothness_constant() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/lemma2_tiny_l.json");
    let dir = tempfile::tempdir().unwrap();
    let out = overcnn(dir.path(), &["check", "lemma2", "--config", fixture.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stdout(&out).contains("descent inequality failed"));
    assert!(stderr(&out).contains("descent inequality failed"));
}

#[test]
fn fitter_self_test_gives_slope_minus_one() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fitter_self_test.json");
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(&fixture, dir.path().join("c.json")).unwrap();
    let out = overcnn(dir.path(), &["rate-study", "c.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("selftest_summary.json")).unwrap()).unwrap();
    assert!((summary["fit"]["slope"].as_f64().unwrap() + 1.0).abs() < 1e-12);
    assert!(summary["provenance"]["config_sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn short_rate_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "r.json",
        &format!(
            r#"{{"kind": "study", "distribution": {PATCH_MEAN}, "n_grid": [50, 100], "replications": 3, "seed": 1,
                "outputs": {{"csv": "r.csv", "summary": "s.json"}}}}"#
        ),
    );
    assert_eq!(overcnn(dir.path(), &["rate-study", "r.json"]).status.code(), Some(2));
}

#[test]
fn rate_study_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "r.json",
        &format!(
            r#"{{"kind": "study", "distribution": {CONSTANT}, "n_grid": [40, 60, 80], "replications": 3, "eval_samples": 500,
                "rule": {{"k_factor": 0.5, "lipschitz_trials": 4}}, "seed": 1,
                "outputs": {{"csv": "out/r.csv", "summary": "out/s.json"}}}}"#
        ),
    );
    let out = overcnn(dir.path(), &["rate-study", "r.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("out/r.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "n,rep,excess_risk,excess_stderr,l2_risk,l2_stderr,K_n,L_n,t_n,seed");
    assert_eq!(csv.lines().count(), 10);
    let summary = std::fs::read_to_string(dir.path().join("out/s.json")).unwrap();
    for key in ["\"slope\"", "\"intercept\"", "\"r_squared\"", "\"rule\"", "\"seeds\"", "\"build\""] {
        assert!(summary.contains(key), "{key}");
    }
}
