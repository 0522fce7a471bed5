//! End-to-end tests of the `crosspert` binary: every subcommand is exercised
//! through a real process, checking artifacts on disk, stdout contracts, the
//! stable exit-code scheme, and that commands never mutate their inputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crosspert"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn crosspert");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str], expected_code: i32) -> String {
    let out = bin().args(args).output().expect("spawn crosspert");
    assert_eq!(
        out.status.code(),
        Some(expected_code),
        "command {:?} exit code\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Generates a small dataset (6 perturbations x 2 lines x 5 cells, 30 genes)
/// into `dir` and returns the dataset path.
fn gen_small(dir: &Path, seed: u64) -> PathBuf {
    run_ok(&[
        "gen-synth",
        "--genes",
        "30",
        "--latent",
        "4",
        "--perts",
        "6",
        "--cell-lines",
        "2",
        "--cells",
        "5",
        "--noise",
        "0.05",
        "--seed",
        &seed.to_string(),
        "-o",
        dir.to_str().unwrap(),
    ]);
    dir.join("dataset.tsv")
}

/// Writes a training run config over the small dataset: holdout split keeping
/// pert004/pert005 for test, no validation split, and a deliberately tiny
/// model so the whole run takes well under a second.
fn write_run_config(path: &Path, dataset: &Path, checkpoint_dir: &Path, seed: u64) {
    let config = serde_json::json!({
        "model": {
            "encoder_hidden": [32, 16],
            "latent_dim": 8,
            "epochs": 2,
            "batch_size": 16
        },
        "data": {
            "dataset_path": dataset.to_str().unwrap(),
            "split": {
                "mode": "holdout",
                "test_perturbations": ["pert004", "pert005"],
                "val_fraction": 0.0
            }
        },
        "train": {
            "seed": seed,
            "checkpoint_dir": checkpoint_dir.to_str().unwrap()
        }
    });
    std::fs::write(path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&read(path)).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()))
}

#[test]
fn gen_synth_writes_counted_rows_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_small(&a, 7);
    gen_small(&b, 7);

    // 6 perts x 2 lines x 5 cells + 2 lines x 5 control cells = 70 rows.
    let text = String::from_utf8(read(&a.join("dataset.tsv"))).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 71, "header + 70 data rows");
    let header: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(&header[..4], &["cell_id", "cell_line", "perturbation", "dose"]);
    assert_eq!(header.len(), 4 + 30, "30 gene columns");
    let controls = lines[1..]
        .iter()
        .filter(|l| l.split('\t').nth(2) == Some("control"))
        .count();
    assert_eq!(controls, 10);

    for artifact in ["dataset.tsv", "ground_truth.json", "resolved_config.json"] {
        assert_eq!(
            read(&a.join(artifact)),
            read(&b.join(artifact)),
            "{artifact} differs between identical-seed runs"
        );
    }

    // A different seed must change the data.
    let c = tmp.path().join("c");
    gen_small(&c, 8);
    assert_ne!(read(&a.join("dataset.tsv")), read(&c.join("dataset.tsv")));

    let out = run_ok(&["gen-synth", "-o", tmp.path().join("d").to_str().unwrap(), "--cells", "2"]);
    assert!(
        stdout(&out).contains("wrote 100 rows x 200 genes"),
        "default config row count (24 perts x 2 lines x 2 cells + 4 controls): {}",
        stdout(&out)
    );
}

#[test]
fn gen_synth_rejects_degenerate_configs_with_exit_2() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("x");
    let stderr = run_err(
        &["gen-synth", "--perts", "3", "-o", dir.to_str().unwrap()],
        2,
    );
    assert!(stderr.contains("at least 4 perturbations"), "stderr: {stderr}");
    // Latent wider than the gene panel is equally malformed.
    run_err(
        &[
            "gen-synth",
            "--genes",
            "4",
            "--latent",
            "8",
            "-o",
            dir.to_str().unwrap(),
        ],
        2,
    );
}

#[test]
fn train_writes_checkpoints_manifest_and_config_echo() {
    let tmp = TempDir::new().unwrap();
    let data_dir = tmp.path().join("data");
    let dataset = gen_small(&data_dir, 7);
    let ckpt = tmp.path().join("run");
    let config_path = tmp.path().join("run.json");
    write_run_config(&config_path, &dataset, &ckpt, 5);

    let before = read(&dataset);
    let out = run_ok(&["train", "--config", config_path.to_str().unwrap()]);
    assert_eq!(read(&dataset), before, "training must not touch its input");

    let text = stdout(&out);
    assert!(text.contains("epoch 1/2 train "), "progress lines: {text}");
    assert!(text.contains("epoch 2/2 train "), "progress lines: {text}");
    assert!(text.contains("best epoch "), "summary line: {text}");

    for sub in ["best", "last"] {
        for file in ["manifest.json", "params.bin"] {
            let p = ckpt.join(sub).join(file);
            assert!(p.is_file(), "missing checkpoint artifact {}", p.display());
        }
    }
    let manifest = read_json(&ckpt.join("run_manifest.json"));
    assert_eq!(manifest["completed"], serde_json::json!(true));
    assert_eq!(manifest["history"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["config"]["ablated"], serde_json::json!([]));
    assert!(manifest["dataset_digest"].as_str().unwrap().len() == 16);

    let resolved = read_json(&ckpt.join("resolved_config.json"));
    assert_eq!(resolved["model"]["gene_dim"], serde_json::json!(30));
    assert_eq!(resolved["model"]["latent_dim"], serde_json::json!(8));
    // Without a val split, epoch records carry no val losses.
    assert!(manifest["history"][0]["val"].is_null());
}

#[test]
fn train_ablation_zeroes_weight_and_reruns_reproduce_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let data_dir = tmp.path().join("data");
    let dataset = gen_small(&data_dir, 7);

    let mut params: Vec<Vec<u8>> = Vec::new();
    for run in ["r1", "r2"] {
        let ckpt = tmp.path().join(run);
        let config_path = tmp.path().join(format!("{run}.json"));
        write_run_config(&config_path, &dataset, &ckpt, 5);
        run_ok(&[
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--ablate",
            "cross",
        ]);
        let resolved = read_json(&ckpt.join("resolved_config.json"));
        let weights = &resolved["model"]["loss_weights"];
        assert_eq!(weights["w_cross"], serde_json::json!(0.0));
        assert_eq!(weights["w_reco1"], serde_json::json!(1.0));
        assert_eq!(resolved["ablated"], serde_json::json!(["cross"]));
        params.push(read(&ckpt.join("best").join("params.bin")));
        params.push(read(&ckpt.join("best").join("manifest.json")));
    }
    assert_eq!(params[0], params[2], "identical config+seed => identical params");
    assert_eq!(params[1], params[3], "identical config+seed => identical manifest");

    let config_path = tmp.path().join("bad.json");
    write_run_config(&config_path, &dataset, &tmp.path().join("r3"), 5);
    let stderr = run_err(
        &[
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--ablate",
            "reco1",
        ],
        2,
    );
    assert!(stderr.contains("reco1"), "names the bad ablation: {stderr}");
}

#[test]
fn predict_filters_sources_and_rejects_unknown_conditions() {
    let tmp = TempDir::new().unwrap();
    let data_dir = tmp.path().join("data");
    let dataset = gen_small(&data_dir, 7);
    let ckpt = tmp.path().join("run");
    let config_path = tmp.path().join("run.json");
    write_run_config(&config_path, &dataset, &ckpt, 5);
    run_ok(&["train", "--config", config_path.to_str().unwrap()]);

    let best = ckpt.join("best");
    let pred_path = tmp.path().join("pred.tsv");
    let out = run_ok(&[
        "predict",
        "--checkpoint",
        best.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--source-pert",
        "pert004",
        "--source-cell-line",
        "line01",
        "--target-cell-line",
        "line00",
        "-o",
        pred_path.to_str().unwrap(),
    ]);
    assert!(stdout(&out).contains("predicted 5 cells"), "{}", stdout(&out));

    let text = String::from_utf8(read(&pred_path)).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 5, "one prediction per source cell");
    for row in &rows {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[1], "line00", "predictions live on the target line");
        assert_eq!(cols[2], "pert004");
    }
    assert!(
        tmp.path().join("pred.tsv.config.json").is_file(),
        "config echo sits next to the output"
    );

    // Unknown source perturbation -> data error (exit 5).
    let stderr = run_err(
        &[
            "predict",
            "--checkpoint",
            best.to_str().unwrap(),
            "--dataset",
            dataset.to_str().unwrap(),
            "--source-pert",
            "pert999",
            "--target-cell-line",
            "line00",
            "-o",
            tmp.path().join("nope.tsv").to_str().unwrap(),
        ],
        5,
    );
    assert!(stderr.contains("pert999"), "stderr names the condition: {stderr}");
}

#[test]
fn predict_combo_needs_two_distinct_singletons() {
    let tmp = TempDir::new().unwrap();
    let data_dir = tmp.path().join("data");
    let dataset = gen_small(&data_dir, 7);
    let ckpt = tmp.path().join("run");
    let config_path = tmp.path().join("run.json");
    write_run_config(&config_path, &dataset, &ckpt, 5);
    run_ok(&["train", "--config", config_path.to_str().unwrap()]);
    let best = ckpt.join("best");

    run_err(
        &[
            "predict-combo",
            "--checkpoint",
            best.to_str().unwrap(),
            "--dataset",
            dataset.to_str().unwrap(),
            "--pert-a",
            "pert000",
            "--pert-b",
            "pert000",
            "--cell-line",
            "line00",
            "-o",
            tmp.path().join("dual.tsv").to_str().unwrap(),
        ],
        2,
    );

    let dual_path = tmp.path().join("dual.tsv");
    run_ok(&[
        "predict-combo",
        "--checkpoint",
        best.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--pert-a",
        "pert001",
        "--pert-b",
        "pert000",
        "--cell-line",
        "line00",
        "-o",
        dual_path.to_str().unwrap(),
    ]);
    let text = String::from_utf8(read(&dual_path)).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 1, "one mean profile per combo");
    let cols: Vec<&str> = rows[0].split('\t').collect();
    assert_eq!(cols[1], "line00");
    assert_eq!(cols[2], "pert000+pert001", "label is order-independent");
}

#[test]
fn evaluate_scores_self_as_perfect_and_checks_headers() {
    let tmp = TempDir::new().unwrap();
    let data_dir = tmp.path().join("data");
    let dataset = gen_small(&data_dir, 7);

    let report_dir = tmp.path().join("eval");
    let out = run_ok(&[
        "evaluate",
        "--predictions",
        dataset.to_str().unwrap(),
        "--actual",
        dataset.to_str().unwrap(),
        "-o",
        report_dir.to_str().unwrap(),
    ]);
    let text = stdout(&out);
    assert!(
        text.contains("mean R2 (all genes): 1.000000"),
        "self-evaluation is exact: {text}"
    );

    let report = read_json(&report_dir.join("report.json"));
    let conditions = report["conditions"].as_array().unwrap();
    assert_eq!(conditions.len(), 12, "6 perts x 2 lines");
    for c in conditions {
        let r2 = c["r2_all"].as_f64().unwrap();
        assert!((r2 - 1.0).abs() < 1e-12, "r2_all {r2}");
    }
    assert!(report_dir.join("report.csv").is_file());
    assert!(report_dir.join("resolved_config.json").is_file());

    // A reference with a different gene header is a data error.
    let other_dir = tmp.path().join("other");
    run_ok(&[
        "gen-synth",
        "--genes",
        "20",
        "--latent",
        "4",
        "--perts",
        "6",
        "--cell-lines",
        "2",
        "--cells",
        "5",
        "-o",
        other_dir.to_str().unwrap(),
    ]);
    run_err(
        &[
            "evaluate",
            "--predictions",
            dataset.to_str().unwrap(),
            "--actual",
            other_dir.join("dataset.tsv").to_str().unwrap(),
            "-o",
            tmp.path().join("eval2").to_str().unwrap(),
        ],
        5,
    );
}

#[test]
fn evaluate_takes_controls_from_a_separate_dataset() {
    let tmp = TempDir::new().unwrap();
    let data_dir = tmp.path().join("data");
    let dataset = gen_small(&data_dir, 7);

    // Split the dataset into perturbed-only and control-only files.
    let text = String::from_utf8(read(&dataset)).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let (mut perturbed, mut controls) = (vec![header], vec![header]);
    for line in lines {
        if line.split('\t').nth(2) == Some("control") {
            controls.push(line);
        } else {
            perturbed.push(line);
        }
    }
    let perturbed_path = tmp.path().join("perturbed.tsv");
    let controls_path = tmp.path().join("controls.tsv");
    std::fs::write(&perturbed_path, perturbed.join("\n")).unwrap();
    std::fs::write(&controls_path, controls.join("\n")).unwrap();

    // Without controls the reference cannot anchor baselines or DEGs.
    run_err(
        &[
            "evaluate",
            "--predictions",
            perturbed_path.to_str().unwrap(),
            "--actual",
            perturbed_path.to_str().unwrap(),
            "-o",
            tmp.path().join("e1").to_str().unwrap(),
        ],
        5,
    );

    let out = run_ok(&[
        "evaluate",
        "--predictions",
        perturbed_path.to_str().unwrap(),
        "--actual",
        perturbed_path.to_str().unwrap(),
        "--controls",
        controls_path.to_str().unwrap(),
        "-o",
        tmp.path().join("e2").to_str().unwrap(),
    ]);
    assert!(stdout(&out).contains("mean R2 (all genes): 1.000000"));
}

#[test]
fn train_rejects_malformed_configs_with_exit_2() {
    let tmp = TempDir::new().unwrap();
    let data_dir = tmp.path().join("data");
    let dataset = gen_small(&data_dir, 7);

    // Unknown key anywhere in the config is a config error.
    let bad = tmp.path().join("bad.json");
    std::fs::write(
        &bad,
        serde_json::to_vec(&serde_json::json!({
            "model": { "latent_dimension": 8 },
            "data": {
                "dataset_path": dataset.to_str().unwrap(),
                "split": { "mode": "ratio" }
            },
            "train": { "checkpoint_dir": tmp.path().join("r").to_str().unwrap() }
        }))
        .unwrap(),
    )
    .unwrap();
    run_err(&["train", "--config", bad.to_str().unwrap()], 2);

    // Cross-field misuse: ratio mode with holdout-only fields.
    let mixed = tmp.path().join("mixed.json");
    std::fs::write(
        &mixed,
        serde_json::to_vec(&serde_json::json!({
            "data": {
                "dataset_path": dataset.to_str().unwrap(),
                "split": { "mode": "ratio", "test_perturbations": ["pert000"] }
            },
            "train": { "checkpoint_dir": tmp.path().join("r").to_str().unwrap() }
        }))
        .unwrap(),
    )
    .unwrap();
    let stderr = run_err(&["train", "--config", mixed.to_str().unwrap()], 2);
    assert!(stderr.contains("test_perturbations"), "stderr: {stderr}");

    // Missing dataset file is an I/O error.
    let gone = tmp.path().join("gone.json");
    std::fs::write(
        &gone,
        serde_json::to_vec(&serde_json::json!({
            "data": {
                "dataset_path": tmp.path().join("no-such.tsv").to_str().unwrap(),
                "split": { "mode": "ratio" }
            },
            "train": { "checkpoint_dir": tmp.path().join("r").to_str().unwrap() }
        }))
        .unwrap(),
    )
    .unwrap();
    run_err(&["train", "--config", gone.to_str().unwrap()], 3);
}
