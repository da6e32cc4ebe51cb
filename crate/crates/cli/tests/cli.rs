use std::path::Path;
use std::process::{Command, Output};

fn dpu(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpu"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("failed to spawn dpu")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Overrides that keep a run to a fraction of a second.
const SMALL: &[&str] = &[
    "--set",
    "dataset.samples_per_class_train=20",
    "--set",
    "dataset.samples_per_class_test=10",
    "--set",
    "dataset.num_far_ood_samples=20",
    "--set",
    "epochs=3",
    "--set",
    "batch_size=16",
    "--set",
    r#"scorers=[{"method":"MSP"},{"method":"KNN","knn_k":3}]"#,
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn gen_data_writes_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpu(&with_small(&["gen-data", "--out", "d.json", "--seed", "9"]), dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let ds = dpu_core::datagen::load_dataset(&dir.path().join("d.json")).unwrap();
    assert_eq!(ds.config.seed, 9);
    assert_eq!(ds.id_train.len(), 60);

    let gz = dpu(
        &with_small(&["gen-data", "--out", "d.json.gz", "--seed", "9"]),
        dir.path(),
    );
    assert!(gz.status.success(), "{}", stderr(&gz));
    let again = dpu_core::datagen::load_dataset(&dir.path().join("d.json.gz")).unwrap();
    assert_eq!(again, ds);
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpu(
        &with_small(&["train", "--variant", "fixed-rate(0.3)", "--seed", "2", "--out", "run"]),
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("epoch   2"));
    let run = dir.path().join("run");
    for f in ["checkpoint.json", "run.json", "loss_curves.csv", "config.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    // eval picks up the config saved next to the checkpoint.
    let out = dpu(&["eval", "run"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let report = dpu_core::EvalReport::load(&run.join("report_MSP_synthetic-near.json")).unwrap();
    assert_eq!(report.variant, "fixed-rate(0.3)");
    assert_eq!(report.seed, 2);
    assert_eq!(report.loss_curves.len(), 3);
    assert!(run.join("report_KNN_synthetic-far.json").exists());
    assert!(run.join("scores.csv").exists());
}

#[test]
fn sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let args = with_small(&[
        "sweep",
        "--out",
        "sw",
        "--set",
        r#"variants=["dpu","base-only"]"#,
        "--set",
        "seeds=[0,1]",
    ]);
    let out = dpu(&args, dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("4 of 4 runs completed"));
    let rows = dpu_core::evalkit::read_aggregate_csv(&dir.path().join("sw/aggregate.csv")).unwrap();
    assert_eq!(rows.len(), 4 * 2 * 2);

    let out = dpu(&["report", "sw", "--out", "summary.json"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("base-only"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2 * 2 * 2);

    // A sweep run directory can be re-evaluated on its own.
    let out = dpu(&["eval", "sw/runs/dpu_seed1", "--out", "re"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let a = dpu_core::EvalReport::load(&dir.path().join("sw/runs/dpu_seed1/report_MSP_synthetic-far.json")).unwrap();
    let b = dpu_core::EvalReport::load(&dir.path().join("re/report_MSP_synthetic-far.json")).unwrap();
    assert_eq!((a.auroc, a.fpr95, a.id_acc), (b.auroc, b.fpr95, b.id_acc));
}

#[test]
fn failed_runs_give_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let args = with_small(&["sweep", "--out", "sw", "--seed", "0", "--set", "optimizer.lr=1e300"]);
    let out = dpu(&args, dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("failed"), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sw/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs_completed"], 0);
    assert_eq!(summary["failures"].as_array().unwrap().len(), 1);
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpu(&["train", "--set", "epochs"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("key.path=value"), "{}", stderr(&out));

    let out = dpu(&["train", "--set", "epochs=0"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("epochs"), "{}", stderr(&out));

    let out = dpu(&["eval", "missing"], dir.path());
    assert!(!out.status.success());
}
