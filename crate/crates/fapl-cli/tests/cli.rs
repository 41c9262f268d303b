//! Command-level behavior: artifact layout, error classes, reduced-set and
//! comparison plumbing, and the binary's exit-code contract.

use std::path::Path;
use std::process::Command;

use fapl_cli::commands::{self, RunScheme};
use fapl_cli::config::ExperimentConfig;
use fapl_core::Error;

fn small_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        "",
        &[
            "data.per_class=8".into(),
            "data.holdout_per_class=3".into(),
            "unlabeled.count=50".into(),
            "train.epochs=4".into(),
            "train.batch_size=16".into(),
            "train.learning_rate=0.001".into(),
            "eval.queries_per_class=1".into(),
        ],
        Some(42),
    )
    .unwrap()
}

#[test]
fn gen_data_writes_expected_artifacts() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let arts = commands::cmd_gen_data(&cfg, dir.path()).unwrap();
    assert!(arts.labeled_csv.exists());
    assert!(arts.unlabeled_csv.exists());
    assert!(arts.manifest.exists());
    assert!(arts.resolved_config.exists());

    // labeled pool holds training plus hold-out rows
    let labeled = fapl_core::data::load_csv(&arts.labeled_csv).unwrap();
    assert_eq!(labeled.samples.len(), 8 * (8 + 3));
    let unlabeled = fapl_core::data::load_csv(&arts.unlabeled_csv).unwrap();
    assert_eq!(unlabeled.samples.len(), 50);
    assert!(unlabeled.samples.iter().all(|s| s.provenance.is_some()));

    // manifests differ only in their timestamp across reruns
    let again = tempfile::tempdir().unwrap();
    let arts2 = commands::cmd_gen_data(&cfg, again.path()).unwrap();
    let strip = |p: &Path| {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("created_at_unix");
        v
    };
    assert_eq!(strip(&arts.manifest), strip(&arts2.manifest));
    assert_eq!(
        std::fs::read(&arts.labeled_csv).unwrap(),
        std::fs::read(&arts2.labeled_csv).unwrap()
    );
}

#[test]
fn gen_data_rejects_invalid_class_count() {
    let cfg = ExperimentConfig::from_toml("", &["data.num_classes=1".into()], None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    match commands::cmd_gen_data(&cfg, dir.path()) {
        Err(e @ Error::Config(_)) => assert_eq!(e.class(), "config"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn resolved_config_reparses_to_equivalent_config() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let arts = commands::cmd_gen_data(&cfg, dir.path()).unwrap();
    let reparsed = ExperimentConfig::load(&arts.resolved_config).unwrap();
    assert_eq!(reparsed, cfg);
}

#[test]
fn train_then_eval_produces_report() {
    let cfg = small_config();
    let data = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    let evald = tempfile::tempdir().unwrap();
    commands::cmd_gen_data(&cfg, data.path()).unwrap();
    let train = commands::cmd_train(&cfg, data.path(), run.path()).unwrap();

    // log record count: one line per iteration plus one summary per epoch
    let log = std::fs::read_to_string(&train.train_log).unwrap();
    let iter_lines = log
        .lines()
        .filter(|l| l.contains("\"kind\":\"iteration\""))
        .count();
    let epoch_lines = log
        .lines()
        .filter(|l| l.contains("\"kind\":\"epoch\""))
        .count();
    assert_eq!(iter_lines, train.outcome.history.iterations.len());
    assert_eq!(epoch_lines, 4);

    let eval = commands::cmd_eval(&cfg, &train.checkpoint, data.path(), evald.path()).unwrap();
    let r = &eval.report_data;
    assert!(r.rank1 >= 0.0 && r.rank1 <= 1.0);
    assert!(r.rank5 >= r.rank1);
    assert!(r.rank10 >= r.rank5);
    assert!(r.map >= 0.0 && r.map <= 1.0);
    assert_eq!(r.query_count, 8);
    assert_eq!(r.gallery_size, 16);
    assert!(r.pseudo_label_accuracy.is_some());
    assert_eq!(r.scheme, "fapl-d");
}

#[test]
fn train_rejects_head_mismatch_with_config_class() {
    let cfg = ExperimentConfig::from_toml(
        "",
        &[
            "data.per_class=8".into(),
            "data.holdout_per_class=3".into(),
            "train.scheme=all-in-one".into(),
            "train.head_outputs=8".into(),
            "train.epochs=2".into(),
        ],
        Some(3),
    )
    .unwrap();
    let data = tempfile::tempdir().unwrap();
    commands::cmd_gen_data(&cfg, data.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    match commands::cmd_train(&cfg, data.path(), out.path()) {
        Err(e @ Error::Config(_)) => assert!(e.to_string().contains("head")),
        other => panic!("expected head-mismatch config error, got {other:?}"),
    }
}

#[test]
fn all_in_one_scheme_trains_with_derived_head() {
    let cfg = ExperimentConfig::from_toml(
        "",
        &[
            "data.per_class=8".into(),
            "data.holdout_per_class=3".into(),
            "unlabeled.count=30".into(),
            "train.scheme=all-in-one".into(),
            "train.epochs=3".into(),
            "train.batch_size=16".into(),
            "train.learning_rate=0.001".into(),
        ],
        Some(3),
    )
    .unwrap();
    let data = tempfile::tempdir().unwrap();
    commands::cmd_gen_data(&cfg, data.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let train = commands::cmd_train(&cfg, data.path(), out.path()).unwrap();
    // extra class on top of the 8 identities
    assert_eq!(train.outcome.params.head_dim(), 9);
    // centers belong to the real classes only
    assert_eq!(train.outcome.centers.num_classes(), 8);
}

#[test]
fn eval_rejects_corrupt_checkpoint() {
    let cfg = small_config();
    let data = tempfile::tempdir().unwrap();
    commands::cmd_gen_data(&cfg, data.path()).unwrap();
    let broken = data.path().join("broken_checkpoint.json");
    std::fs::write(&broken, "{ definitely not a checkpoint").unwrap();
    let out = tempfile::tempdir().unwrap();
    match commands::cmd_eval(&cfg, &broken, data.path(), out.path()) {
        Err(e @ Error::Parse { .. }) => assert_eq!(e.class(), "parse"),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn labeled_fraction_reduces_training_side_only() {
    // 7 labeled per class sits under the reducible threshold of 8, so the
    // half run sees exactly the same data as the full run
    let mut full = small_config();
    full.data.per_class = 7;
    let mut half = full.clone();
    half.data.labeled_fraction = fapl_core::Fraction::Half;
    let data = tempfile::tempdir().unwrap();
    commands::cmd_gen_data(&full, data.path()).unwrap();

    let out_full = tempfile::tempdir().unwrap();
    let out_half = tempfile::tempdir().unwrap();
    let t_full = commands::cmd_train(&full, data.path(), out_full.path()).unwrap();
    let t_half = commands::cmd_train(&half, data.path(), out_half.path()).unwrap();
    assert_eq!(
        t_full.outcome.history.iterations.len(),
        t_half.outcome.history.iterations.len()
    );

    let mut big = full.clone();
    big.data.per_class = 12;
    let mut big_half = big.clone();
    big_half.data.labeled_fraction = fapl_core::Fraction::Half;
    let data2 = tempfile::tempdir().unwrap();
    commands::cmd_gen_data(&big, data2.path()).unwrap();
    let o1 = tempfile::tempdir().unwrap();
    let o2 = tempfile::tempdir().unwrap();
    let t_big = commands::cmd_train(&big, data2.path(), o1.path()).unwrap();
    let t_big_half = commands::cmd_train(&big_half, data2.path(), o2.path()).unwrap();
    // 12 per class reduce to 6: fewer samples, fewer batches per epoch
    let per_epoch = |t: &commands::TrainArtifacts| {
        t.outcome
            .history
            .iterations
            .iter()
            .filter(|r| r.epoch == 0)
            .count()
    };
    assert!(per_epoch(&t_big_half) < per_epoch(&t_big));
}

#[test]
fn compare_emits_rows_and_summaries() {
    let cfg = small_config();
    let out = tempfile::tempdir().unwrap();
    let schemes = [
        RunScheme::Baseline,
        RunScheme::Labeling(fapl_core::Scheme::FaplOneHot),
        RunScheme::Labeling(fapl_core::Scheme::FaplDistributed),
    ];
    let outcome = commands::cmd_compare(&cfg, &schemes, &[1, 2], None, out.path()).unwrap();
    assert!(outcome.failures.is_empty());
    assert_eq!(outcome.rows.len(), 6);
    let text = std::fs::read_to_string(&outcome.csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // header + 6 rows + (mean, std) per scheme
    assert_eq!(lines.len(), 1 + 6 + 6);
    assert!(lines[0].starts_with("scheme,seed,n_unlabeled,lambda,rank1"));
    assert_eq!(text.matches(",mean,").count(), 3);
    assert_eq!(text.matches(",std,").count(), 3);
    // baseline rows carry no unlabeled samples and no pseudo accuracy
    let baseline_rows: Vec<&&str> = lines
        .iter()
        .filter(|l| l.starts_with("baseline,1") || l.starts_with("baseline,2"))
        .collect();
    assert_eq!(baseline_rows.len(), 2);
    assert!(baseline_rows
        .iter()
        .all(|l| l.split(',').nth(2) == Some("0")));
}

#[test]
fn compare_sweeps_unlabeled_counts() {
    let cfg = small_config();
    let out = tempfile::tempdir().unwrap();
    let schemes = [RunScheme::Labeling(fapl_core::Scheme::FaplDistributed)];
    let outcome =
        commands::cmd_compare(&cfg, &schemes, &[1], Some(&[0, 25, 50]), out.path()).unwrap();
    assert_eq!(outcome.rows.len(), 3);
    let counts: Vec<usize> = outcome.rows.iter().map(|r| r.n_unlabeled).collect();
    assert_eq!(counts, vec![0, 25, 50]);
}

#[test]
fn sweep_lambda_orders_rows() {
    let cfg = small_config();
    let out = tempfile::tempdir().unwrap();
    let outcome =
        commands::cmd_sweep_lambda(&cfg, &[1e-3, 1e-4, 1e-5], &[1, 2], out.path()).unwrap();
    assert!(outcome.failures.is_empty());
    assert_eq!(outcome.rows.len(), 6);
    // rows ordered by (scheme, seed, lambda)
    let keys: Vec<(u64, f64)> = outcome.rows.iter().map(|r| (r.seed, r.lambda)).collect();
    assert_eq!(
        keys,
        vec![
            (1, 1e-5),
            (1, 1e-4),
            (1, 1e-3),
            (2, 1e-5),
            (2, 1e-4),
            (2, 1e-3)
        ]
    );
    assert!(outcome.csv.ends_with("sweep_lambda_results.csv"));

    // rerunning produces identical bytes
    let out2 = tempfile::tempdir().unwrap();
    let again =
        commands::cmd_sweep_lambda(&cfg, &[1e-3, 1e-4, 1e-5], &[1, 2], out2.path()).unwrap();
    assert_eq!(
        std::fs::read(&outcome.csv).unwrap(),
        std::fs::read(&again.csv).unwrap()
    );
}

#[test]
fn sweep_lambda_zero_still_runs() {
    let cfg = small_config();
    let out = tempfile::tempdir().unwrap();
    let outcome = commands::cmd_sweep_lambda(&cfg, &[0.0], &[1], out.path()).unwrap();
    assert_eq!(outcome.rows.len(), 1);
    assert_eq!(outcome.rows[0].lambda, 0.0);
}

// ---------------------------------------------------------------------------
// binary exit codes and diagnostics
// ---------------------------------------------------------------------------

fn fapl_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fapl"))
}

#[test]
fn binary_reports_error_class_and_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let output = fapl_bin()
        .args([
            "gen-data",
            "--out",
            dir.path().to_str().unwrap(),
            "--override",
            "data.num_classes=1",
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.lines().any(|l| l.starts_with("error[config]:")),
        "stderr was: {stderr}"
    );
}

#[test]
fn binary_runs_the_full_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    let evald = root.path().join("eval");
    let overrides = [
        "data.per_class=8",
        "data.holdout_per_class=3",
        "unlabeled.count=40",
        "train.epochs=3",
        "train.batch_size=16",
        "train.learning_rate=0.001",
    ];
    let with_overrides = |mut cmd: Command| {
        for o in overrides {
            cmd.args(["--override", o]);
        }
        cmd
    };

    let mut cmd = fapl_bin();
    cmd.args(["gen-data", "--seed", "5", "--out", data.to_str().unwrap()]);
    let status = with_overrides(cmd).status().unwrap();
    assert!(status.success());

    let mut cmd = fapl_bin();
    cmd.args([
        "train",
        "--seed",
        "5",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let status = with_overrides(cmd).status().unwrap();
    assert!(status.success());

    let mut cmd = fapl_bin();
    cmd.args([
        "eval",
        "--seed",
        "5",
        "--checkpoint",
        run.join("checkpoint.json").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        evald.to_str().unwrap(),
    ]);
    let output = with_overrides(cmd).output().unwrap();
    assert!(output.status.success());
    assert!(evald.join("report.json").exists());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("rank1"), "stdout was: {stdout}");
}

#[test]
fn binary_missing_config_file_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let output = fapl_bin()
        .args([
            "gen-data",
            "--config",
            dir.path().join("nope.toml").to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error["), "stderr was: {stderr}");
}

#[test]
fn compare_collects_sub_run_failures_without_aborting() {
    // head_outputs=8 satisfies fapl-d but contradicts all-in-one's K+1 head,
    // so every all-in-one run fails while the fapl-d runs complete
    let mut cfg = small_config();
    cfg.train.head_outputs = Some(8);
    let out = tempfile::tempdir().unwrap();
    let schemes = [
        RunScheme::Labeling(fapl_core::Scheme::FaplDistributed),
        RunScheme::Labeling(fapl_core::Scheme::AllInOne),
    ];
    let outcome = commands::cmd_compare(&cfg, &schemes, &[1, 2], None, out.path()).unwrap();
    assert_eq!(outcome.rows.len(), 2);
    assert!(outcome.rows.iter().all(|r| r.scheme == "fapl-d"));
    assert_eq!(outcome.failures.len(), 2);
    assert!(outcome
        .failures
        .iter()
        .all(|f| f.scheme == "all-in-one" && f.error.class() == "config"));
    assert!(outcome.csv.exists());
}
