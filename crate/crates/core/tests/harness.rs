//! End-to-end tests of the command-line harness: config handling, metrics
//! files, reproducibility and exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use samkit_core::harness::{self, FlatConfig, CSV_HEADER};

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.conf");
    fs::write(&path, body).unwrap();
    path
}

fn blob_config(out: &Path) -> String {
    format!(
        "task.kind = blobs\n\
         task.classes = 2\n\
         task.per_class = 150\n\
         task.separation = 6.0\n\
         model.hidden = 16\n\
         optim.lr = 0.3\n\
         optim.momentum = 0.9\n\
         optim.k1 = 8\n\
         optim.k2 = 16\n\
         run.method = ksam\n\
         run.epochs = 4\n\
         run.batch = 32\n\
         run.seed = 1\n\
         run.out = {}\n",
        out.display()
    )
}

fn setup_from(dir: &Path, body: &str, overrides: &[&str]) -> harness::RunSetup {
    let path = write_config(dir, body);
    let mut config = FlatConfig::from_file(&path).unwrap();
    config
        .apply_overrides(&overrides.iter().map(|s| s.to_string()).collect::<Vec<_>>())
        .unwrap();
    harness::resolve(config).unwrap()
}

#[test]
fn smoke_run_converges_on_blobs() {
    // A few hundred K-SAM steps on separable blobs reach >= 99% accuracy.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let setup = setup_from(dir.path(), &blob_config(&out), &["run.id=smoke"]);
    let summary = harness::cmd_train(&setup).unwrap();
    assert!(summary.final_test_accuracy.unwrap() >= 0.99);
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("summary-smoke.json").exists());
    assert!(out.join("checkpoint-smoke.ckpt").exists());
}

#[test]
fn metrics_values_are_reproducible() {
    // Same (config, seed) twice: every computed metrics value matches
    // bitwise. Only the run id column and wall-clock timing rows (which
    // measure the machine, not the computation) may differ.
    let dir = tempfile::tempdir().unwrap();
    let read_values = |out: &Path, id: &str| -> Vec<String> {
        fs::read_to_string(out.join("metrics.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .filter(|l| !l.contains(",time,"))
            .map(|l| l.strip_prefix(&format!("{id},")).unwrap().to_string())
            .collect()
    };
    let out_a = dir.path().join("a");
    let setup = setup_from(dir.path(), &blob_config(&out_a), &["run.id=ra"]);
    harness::cmd_train(&setup).unwrap();
    let out_b = dir.path().join("b");
    let setup = setup_from(dir.path(), &blob_config(&out_b), &["run.id=rb"]);
    harness::cmd_train(&setup).unwrap();
    assert_eq!(read_values(&out_a, "ra"), read_values(&out_b, "rb"));
}

#[test]
fn ksam_full_subsets_match_sam_checkpoints() {
    // method=ksam with K1=K2=B and method=sam produce the same final
    // checkpoint to within 1e-12 per parameter.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let base = blob_config(&out);
    let run = |method: &str, id: &str| {
        let setup = setup_from(
            dir.path(),
            &base,
            &[
                &format!("run.method={method}"),
                "optim.k1=32",
                "optim.k2=32",
                "optim.rho=0.05",
                &format!("run.id={id}"),
            ],
        );
        harness::cmd_train(&setup).unwrap();
        samkit_core::model::Model::load_checkpoint(&out.join(format!("checkpoint-{id}.ckpt"))).unwrap()
    };
    let ksam = run("ksam", "k");
    let sam = run("sam", "s");
    let diff = ksam
        .params_flat()
        .max_abs_diff(&sam.params_flat())
        .unwrap();
    assert!(diff <= 1e-12, "max diff {diff}");
}

#[test]
fn distsim_one_worker_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let base = blob_config(&out);
    let train_setup = setup_from(dir.path(), &base, &["run.id=t"]);
    harness::cmd_train(&train_setup).unwrap();
    let dist_setup = setup_from(dir.path(), &base, &["run.id=d", "run.workers=1"]);
    harness::cmd_distsim(&dist_setup).unwrap();
    let a = samkit_core::model::Model::load_checkpoint(&out.join("checkpoint-t.ckpt")).unwrap();
    let b = samkit_core::model::Model::load_checkpoint(&out.join("checkpoint-d.ckpt")).unwrap();
    assert!(a.params_flat().bitwise_eq(&b.params_flat()));
}

#[test]
fn ablate_includes_sam_anchor_and_consistent_costs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let setup = setup_from(
        dir.path(),
        &blob_config(&out),
        &[
            "run.id=ab",
            "ablate.k1_grid=8",
            "ablate.k2_grid=16",
            "ablate.selections=topk,random",
            "ablate.seeds=1",
            "ablate.epochs=2",
        ],
    );
    let rows = harness::cmd_ablate(&setup).unwrap();
    // 2 grid cells + SAM anchor.
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().any(|r| r.k1 == 32 && r.k2 == 32));
    // Cost column must match the analytic estimate.
    for row in &rows {
        let est = setup.cost_model.estimate(
            setup.batch,
            row.k1,
            row.k2,
            samkit_core::instrument::CostMethod::Ksam,
        );
        assert_eq!(row.cost_units_per_step, est.units);
    }
    assert!(out.join("ablate-ab.csv").exists());
}

#[test]
fn align_emits_one_record_per_probe_combination() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let setup = setup_from(
        dir.path(),
        &blob_config(&out),
        &[
            "run.id=al",
            "run.method=sgd",
            "run.epochs=1",
            "run.probe_every=4",
            "probe.ks=8,16",
            "probe.repeats=3",
        ],
    );
    harness::cmd_align(&setup).unwrap();
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let probe_steps: Vec<&str> = metrics
        .lines()
        .filter(|l| l.contains(",align,") && l.contains("cos_full_ascent_topk_k8,"))
        .collect();
    assert!(!probe_steps.is_empty());
    // At each probed step: one record per (k, mode) for the ascent probe and
    // the two descent references.
    for name in [
        "cos_full_ascent_topk_k8",
        "cos_full_ascent_topk_k16",
        "cos_full_ascent_random_k8",
        "cos_full_ascent_random_k16",
        "cos_sam_descent_topk_k16",
        "cos_sgd_descent_full_k32",
    ] {
        let count = metrics.lines().filter(|l| l.contains(&format!(",{name},"))).count();
        assert_eq!(count, probe_steps.len(), "{name}");
    }
}

#[test]
fn validation_happens_before_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never-created");
    let base = blob_config(&out);
    let path = write_config(dir.path(), &base);
    let mut config = FlatConfig::from_file(&path).unwrap();
    config.apply_overrides(&["optim.k1=999".to_string()]).unwrap(); // > batch
    assert!(harness::resolve(config).is_err());
    assert!(!out.exists());
}

// --- CLI binary behavior ---

fn samkit_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_samkit"))
}

#[test]
fn cli_print_config_echoes_resolved_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "run.method = sam\noptim.lr = 0.25\n");
    let output = samkit_bin()
        .args(["train", "--config"])
        .arg(&path)
        .args(["--override", "optim.lr=0.5", "--print-config"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("optim.lr = 0.5"));
    assert!(stdout.contains("run.method = sam"));
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Config error: unknown key.
    let bad = write_config(dir.path(), "run.metod = sam\n");
    let status = samkit_bin()
        .args(["train", "--config"])
        .arg(&bad)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    // Config error: missing file.
    let status = samkit_bin()
        .args(["train", "--config", "/nonexistent/run.conf"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn cli_numerical_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut body = blob_config(&out);
    body.push_str("optim.lr = 1e150\nrun.epochs = 2\n");
    // Later assignments win; the diverging lr drives the loss non-finite.
    let path = write_config(dir.path(), &body);
    let output = samkit_bin()
        .args(["train", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(String::from_utf8_lossy(&output.stderr).contains("non-finite"));
}

#[test]
fn cli_io_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = Path::new("/dev/null/out");
    let path = write_config(dir.path(), &blob_config(out));
    let status = samkit_bin()
        .args(["train", "--config"])
        .arg(&path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn cli_train_writes_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let path = write_config(dir.path(), &blob_config(&out));
    let status = samkit_bin()
        .args(["train", "--config"])
        .arg(&path)
        .args(["--override", "run.id=cli"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(CSV_HEADER));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary-cli.json")).unwrap()).unwrap();
    for key in [
        "run_id",
        "method",
        "final_test_accuracy",
        "total_wall_clock_ns",
        "total_cost_units",
        "config_hash",
    ] {
        assert!(summary.get(key).is_some(), "summary missing {key}");
    }
}

#[test]
fn distinct_run_ids_when_unset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let base = blob_config(&out);
    let setup_a = setup_from(dir.path(), &base, &[]);
    let setup_b = setup_from(dir.path(), &base, &[]);
    assert_ne!(setup_a.run_id, setup_b.run_id);
}
