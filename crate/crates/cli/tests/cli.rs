//! Command-line behavior: exit codes, file flows, and output determinism.

use std::path::{Path, PathBuf};

use fedts_cli::run_cli;

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["fedts".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run_cli(&argv)
}

fn write_config(dir: &Path, fedavg: bool) -> PathBuf {
    let clients: Vec<serde_json::Value> = (0..3usize)
        .map(|i| {
            let resolution = [30u64, 300, 3600][i];
            serde_json::json!({
                "resolution_seconds": resolution,
                "trend_slope": 0.004,
                "seasonal_amplitudes": [
                    {"amplitude": 1.0, "period_steps": 12 + 4 * i}
                ],
                "noise_std": 0.1,
                "length": 600,
                "channels": 1,
                "seed": 500 + i as u64,
                "domain_tag": format!("c{i}")
            })
        })
        .collect();
    let cfg = serde_json::json!({
        "model": {
            "d_model": 16, "num_layers": 1, "num_heads": 2,
            "patch": {"patch_length": 8, "stride": 4},
            "ffn_hidden": 32, "decomposition_kernel": 5, "max_patches": 32
        },
        "fed": {
            "num_clients": 3, "rounds": 3, "local_epochs": 1,
            "learning_rate": 0.01, "batch_size": 4, "window_length": 48,
            "mask_spec": {"mean_masked_length": 4, "mask_ratio": 0.35},
            "fedavg_baseline": fedavg
        },
        "clients": {"synthetic": clients},
        "master_seed": 17
    });
    let path = dir.join(if fedavg { "cfg_avg.json" } else { "cfg.json" });
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn unknown_flags_and_missing_files_are_user_errors() {
    assert_eq!(cli(&["--definitely-not-a-flag"]), 1);
    assert_eq!(cli(&["pretrain"]), 1); // missing --config
    assert_eq!(cli(&["pretrain", "--config", "/no/such/file.json"]), 1);
    assert_eq!(cli(&["--help"]), 0);
}

#[test]
fn rounds_zero_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), false);
    let out = dir.path().join("out");
    assert_eq!(
        cli(&[
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--rounds",
            "0",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    assert!(out.join("checkpoint_final.ckpt").exists());
    assert!(!out.join("rounds.jsonl").exists());
}

#[test]
fn pipeline_runs_from_exported_files_and_evaluates_all_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), false);
    let data_dir = dir.path().join("data");
    assert_eq!(
        cli(&[
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            data_dir.to_str().unwrap()
        ]),
        0
    );

    // Re-point the config at the exported files.
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    let files: Vec<String> = (0..3)
        .map(|i| data_dir.join(format!("client_{i:03}.fts")).display().to_string())
        .collect();
    cfg["clients"] = serde_json::json!({"files": files});
    let cfg_files = dir.path().join("cfg_files.json");
    std::fs::write(&cfg_files, serde_json::to_string(&cfg).unwrap()).unwrap();

    let out = dir.path().join("run");
    assert_eq!(
        cli(&[
            "pretrain",
            "--config",
            cfg_files.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let ckpt = out.join("checkpoint_final.ckpt");
    assert!(ckpt.exists());
    let reports = std::fs::read_to_string(out.join("rounds.jsonl")).unwrap();
    assert_eq!(reports.lines().count(), 3);

    let client0 = data_dir.join("client_000.fts");
    let client1 = data_dir.join("client_001.fts");

    // Forecast.
    assert_eq!(
        cli(&[
            "finetune",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            client0.to_str().unwrap(),
            "--task",
            "forecast",
            "--horizon",
            "12",
            "--lookback",
            "48",
            "--freeze-encoder",
            "--epochs",
            "3",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(
        cli(&[
            "evaluate",
            "--checkpoint",
            out.join("finetuned_forecast.ckpt").to_str().unwrap(),
            "--data",
            client1.to_str().unwrap(),
            "--stride",
            "6",
            "--short-term",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("eval_forecast.json")).unwrap(),
    )
    .unwrap();
    assert!(report["metrics"]["mse"].as_f64().unwrap().is_finite());
    assert!(report["metrics"]["smape"].as_f64().unwrap().is_finite());
    assert!(!report["config_hash"].as_str().unwrap().is_empty());

    // Imputation.
    assert_eq!(
        cli(&[
            "finetune",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            client0.to_str().unwrap(),
            "--task",
            "impute",
            "--mask-ratio",
            "0.25",
            "--lookback",
            "48",
            "--freeze-encoder",
            "--epochs",
            "2",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(
        cli(&[
            "evaluate",
            "--checkpoint",
            out.join("finetuned_impute.ckpt").to_str().unwrap(),
            "--data",
            client1.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    assert!(out.join("eval_impute.json").exists());

    // Anomaly detection: labels mark a few points in the test file.
    assert_eq!(
        cli(&[
            "finetune",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            client0.to_str().unwrap(),
            "--task",
            "detect",
            "--quantile",
            "0.99",
            "--lookback",
            "48",
            "--freeze-encoder",
            "--epochs",
            "2",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let mut labels = vec![0u8; 600];
    labels[100] = 1;
    labels[400] = 1;
    let labels_path = dir.path().join("labels.json");
    std::fs::write(&labels_path, serde_json::to_string(&labels).unwrap()).unwrap();
    assert_eq!(
        cli(&[
            "evaluate",
            "--checkpoint",
            out.join("finetuned_detect.ckpt").to_str().unwrap(),
            "--data",
            client1.to_str().unwrap(),
            "--train-data",
            client0.to_str().unwrap(),
            "--labels",
            labels_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("eval_detect.json")).unwrap(),
    )
    .unwrap();
    for key in ["precision", "recall", "f1", "recall_adjusted"] {
        assert!(report["metrics"][key].as_f64().unwrap().is_finite(), "{key}");
    }
}

#[test]
fn identical_invocations_produce_identical_outputs_modulo_walltime() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), false);
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        assert_eq!(
            cli(&[
                "pretrain",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap()
            ]),
            0
        );
    }
    assert_eq!(
        std::fs::read(out1.join("checkpoint_final.ckpt")).unwrap(),
        std::fs::read(out2.join("checkpoint_final.ckpt")).unwrap()
    );
    let strip = |p: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_ms");
                v
            })
            .collect()
    };
    assert_eq!(strip(&out1.join("rounds.jsonl")), strip(&out2.join("rounds.jsonl")));
}

#[test]
fn plain_averaging_checkpoint_loads_into_the_evaluation_path() {
    // Checkpoints are independent of the training mode that produced them.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), true); // fedavg baseline
    let out = dir.path().join("avg");
    assert_eq!(
        cli(&[
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let data_dir = dir.path().join("data");
    assert_eq!(
        cli(&[
            "gen-data",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            data_dir.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(
        cli(&[
            "finetune",
            "--checkpoint",
            out.join("checkpoint_final.ckpt").to_str().unwrap(),
            "--data",
            data_dir.join("client_000.fts").to_str().unwrap(),
            "--task",
            "forecast",
            "--horizon",
            "12",
            "--lookback",
            "48",
            "--freeze-encoder",
            "--epochs",
            "0",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(
        cli(&[
            "evaluate",
            "--checkpoint",
            out.join("finetuned_forecast.ckpt").to_str().unwrap(),
            "--data",
            data_dir.join("client_001.fts").to_str().unwrap(),
            "--stride",
            "12",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
}

#[test]
fn evaluating_a_pretraining_checkpoint_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), false);
    let out = dir.path().join("out");
    assert_eq!(
        cli(&[
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--rounds",
            "0",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let data_dir = dir.path().join("data");
    assert_eq!(
        cli(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data_dir.to_str().unwrap()]),
        0
    );
    assert_eq!(
        cli(&[
            "evaluate",
            "--checkpoint",
            out.join("checkpoint_final.ckpt").to_str().unwrap(),
            "--data",
            data_dir.join("client_000.fts").to_str().unwrap(),
        ]),
        1
    );
}

#[test]
fn environment_variable_overrides_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), false);
    let env_out = dir.path().join("env_out");
    std::env::set_var(fedts_cli::ENV_OUTPUT_DIR, &env_out);
    let code = cli(&["gen-data", "--config", cfg.to_str().unwrap()]);
    std::env::remove_var(fedts_cli::ENV_OUTPUT_DIR);
    assert_eq!(code, 0);
    assert!(env_out.join("client_000.fts").exists());
}
