use std::path::Path;
use std::process::{Command, Output};

fn flowtune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowtune"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("FLOWTUNE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn split_counts(csv: &Path) -> (usize, usize) {
    let mut rdr = csv::Reader::from_path(csv).unwrap();
    let col = rdr.headers().unwrap().iter().position(|h| h == "split").unwrap();
    let mut counts = (0, 0);
    for rec in rdr.records() {
        match &rec.unwrap()[col] {
            "train" => counts.0 += 1,
            "test" => counts.1 += 1,
            other => panic!("split `{other}`"),
        }
    }
    counts
}

fn tiny_run(dir: &Path) {
    ok(flowtune(dir, &["gen-data", "--points", "50", "--seed", "5"]));
    ok(flowtune(dir, &["train", "--epochs", "30", "--lr", "1e-3", "--seed", "5"]));
}

#[test]
fn gen_data_keeps_the_ninety_ten_split() {
    let dir = tempfile::tempdir().unwrap();
    ok(flowtune(dir.path(), &["gen-data", "--points", "50"]));
    assert_eq!(split_counts(&dir.path().join("data/dataset.csv")), (45, 5));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_object().unwrap();
    assert!(files.contains_key("data/dataset.csv"));
    assert!(files.contains_key("data/dataset.meta.json"));
    assert_eq!(manifest["seed"], 42);
}

#[test]
fn bad_plant_path_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowtune(dir.path(), &["gen-data", "--plant", "/nonexistent/plant.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("plant file"));
    assert!(!dir.path().join("manifest.json").exists());
}

#[test]
fn config_without_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "out = \"run\"\n").unwrap();
    let out = flowtune(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(flowtune(dir.path(), &["train"]).status.code(), Some(3));
    ok(flowtune(dir.path(), &["gen-data", "--points", "50"]));
    assert_eq!(flowtune(dir.path(), &["finetune"]).status.code(), Some(3));
    assert_eq!(flowtune(dir.path(), &["eval"]).status.code(), Some(3));
    assert_eq!(flowtune(dir.path(), &["portrait"]).status.code(), Some(3));
}

#[test]
fn seed_override_from_environment() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    ok(flowtune(a.path(), &["gen-data", "--points", "50", "--seed", "9"]));
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowtune"));
    cmd.args(["gen-data", "--points", "50", "--out"]).arg(b.path()).env("FLOWTUNE_SEED", "9").env("RUST_LOG", "warn");
    ok(cmd.output().unwrap());
    ok(flowtune(c.path(), &["gen-data", "--points", "50", "--seed", "10"]));
    let read = |d: &Path| std::fs::read(d.join("data/dataset.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn same_seed_gives_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_run(a.path());
    tiny_run(b.path());
    // config.toml records the output directory itself
    let read = |d: &Path| {
        let mut m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
        m["files"].as_object_mut().unwrap().remove("config.toml");
        m
    };
    let (ma, mb) = (read(a.path()), read(b.path()));
    assert!(ma["files"].as_object().unwrap().len() > 10);
    assert_eq!(ma, mb);
}

#[test]
fn analytic_units_reproduce_the_data() {
    let dir = tempfile::tempdir().unwrap();
    ok(flowtune(dir.path(), &["gen-data", "--points", "50"]));
    ok(flowtune(dir.path(), &["eval", "--analytic"]));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports/eval_analytic.json")).unwrap()).unwrap();
    let newton = summary.as_array().unwrap().iter().find(|m| m["method"] == "newton").unwrap();
    assert!((newton["r2"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(newton["failures"], 0);
}

#[test]
fn pipeline_commands_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_run(d);
    ok(flowtune(d, &["finetune", "--epochs", "2", "--lr", "1e-4", "--k-set", "0,1,2", "--freeze", "S100", "--jobs", "1"]));
    assert_eq!(
        std::fs::read(d.join("models/step1/S100.bin")).unwrap(),
        std::fs::read(d.join("models/finetuned/S100.bin")).unwrap()
    );
    assert_ne!(
        std::fs::read(d.join("models/step1/C100.bin")).unwrap(),
        std::fs::read(d.join("models/finetuned/C100.bin")).unwrap()
    );
    let log = std::fs::read_to_string(d.join("reports/finetune_log_finetuned.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,K,loss,grad_norm"));
    assert_eq!(log.lines().count(), 1 + 2 * 3);

    ok(flowtune(d, &["eval"]));
    let conv = std::fs::read_to_string(d.join("reports/convergence_finetuned.csv")).unwrap();
    assert_eq!(conv.lines().count(), 1 + 4 * 11);
    for m in ["direct", "wegstein", "newton", "bfgs"] {
        assert!(d.join(format!("reports/parity_finetuned_{m}.csv")).is_file());
    }

    ok(flowtune(d, &["portrait"]));
    for f in ["portrait_before.svg", "portrait_after.svg", "portrait_before.csv", "portrait_after.csv"] {
        assert!(d.join("reports").join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(d.join("reports/portrait_after.csv")).unwrap();
    assert_eq!(csv.lines().count(), 401);
    let align: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("reports/alignment.json")).unwrap()).unwrap();
    assert!(align["after"].as_f64().unwrap().abs() <= 1.0);

    ok(flowtune(d, &["solve-trace", "--method", "newton", "--row", "0", "--max-iterations", "5"]));
    let trace: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(d.join("reports/solve_trace_finetuned_newton_row0.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(trace["tear_labels"].as_array().unwrap().len(), 16);
    assert!(!trace["trace"]["records"].as_array().unwrap().is_empty());

    let manifest = std::fs::read_to_string(d.join("manifest.json")).unwrap();
    for key in ["models/finetuned/S100.bin", "reports/alignment.json", "config.toml"] {
        assert!(manifest.contains(key), "{key}");
    }
}

#[test]
fn bad_arguments_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    ok(flowtune(dir.path(), &["gen-data", "--points", "50"]));
    assert_eq!(flowtune(dir.path(), &["finetune", "--freeze", "NOPE"]).status.code(), Some(2));
    assert_eq!(flowtune(dir.path(), &["solve-trace", "--method", "secant"]).status.code(), Some(2));
    assert_eq!(flowtune(dir.path(), &["gen-data", "--points", "10"]).status.code(), Some(2));
}
