use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lakehopper::experiment::RunReport;

const SPEC: &str = r#"
n_source_types = 5
n_target_types = 5
n_shared_types = 3
columns_per_type = { min = 6, max = 20 }
cells_per_column = { min = 4, max = 10 }
long_tail_skew = 1.0
noise_rate = 0.02
seed = 5
"#;

fn lakehopper(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lakehopper"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = dir.join("run.toml");
    let text = format!(
        "seed = 3\nout = \"{}\"\n{extra}\n[lake_pair]\n{SPEC}\n[adapt]\nbudget = 20\nwarmup_size = 4\nbatch_size = 4\nmax_iterations = 4\n\n[train]\nfeature_dim = 64\nhidden = 8\nmax_epochs = 20\n",
        path(&dir.join("out"))
    );
    fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn missing_config_exits_with_config_code() {
    let out = lakehopper(&["adapt", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nunknown_field = true\n").unwrap();
    let out = lakehopper(&["adapt", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_lake_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = lakehopper(&[
        "eval",
        "--checkpoint",
        path(&dir.path().join("none.json")),
        "--lake",
        path(&dir.path().join("nolake")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    for name in ["a", "b"] {
        let out = lakehopper(&["gen", "--config", path(&spec), "--out", path(&dir.path().join(name))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for side in ["source", "target"] {
        for file in [lakehopper::corpus::LABELS_FILE, lakehopper::corpus::MANIFEST_FILE] {
            let a = fs::read(dir.path().join("a").join(side).join(file)).unwrap();
            let b = fs::read(dir.path().join("b").join(side).join(file)).unwrap();
            assert_eq!(a, b, "{side}/{file}");
        }
    }
}

#[test]
fn adapt_then_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = lakehopper(&["adapt", "--config", path(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("out");
    for f in ["report.json", "audit.jsonl", "curve.csv", "timings.json", "target_annotator.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let report: RunReport = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert!(report.ledger.spent() <= 20);
    assert_eq!(report.test.ood_rate, 0.0);

    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let lakes = dir.path().join("lakes");
    assert!(lakehopper(&["gen", "--config", path(&spec), "--out", path(&lakes)]).status.success());
    let eval_dir = dir.path().join("eval");
    let out = lakehopper(&[
        "eval",
        "--checkpoint",
        path(&run.join("target_annotator.json")),
        "--lake",
        path(&lakes.join("target")),
        "--out",
        path(&eval_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["ood_rate"], 0.0);
    let csv = fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("summary,")));

    let out = lakehopper(&["report", path(&run)]);
    assert!(out.status.success());
    assert!(!out.stdout.is_empty());
}

#[test]
fn baseline_makes_no_verifier_queries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = lakehopper(&["adapt", "--config", path(&cfg), "--baseline"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: RunReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report.verifier_queries, 0);
    assert_eq!(report.ledger.spent(), 20);
}

#[test]
fn budget_sweep_writes_one_run_per_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = lakehopper(&["adapt", "--config", path(&cfg), "--budget-sweep", "8,16"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("out");
    for b in [8, 16] {
        let report: RunReport =
            serde_json::from_str(&fs::read_to_string(run.join(format!("budget_{b}/report.json"))).unwrap()).unwrap();
        assert_eq!(report.budget, b);
        assert!(report.ledger.spent() <= b);
    }
    let curve = fs::read_to_string(run.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
}

#[test]
fn remote_verifier_without_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "verifier = \"remote\"\n[remote]\nendpoint = \"http://127.0.0.1:9/v1/chat/completions\"\nmodel = \"m\"\nkey_env = \"LAKEHOPPER_TEST_UNSET_KEY\"\n",
    );
    let out = Command::new(env!("CARGO_BIN_EXE_lakehopper"))
        .args(["adapt", "--config", path(&cfg)])
        .env_remove("LAKEHOPPER_TEST_UNSET_KEY")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bundled_config_parses_and_validates() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = lakehopper::experiment::RunConfig::load(&p).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.adapt.budget, 120);
}
