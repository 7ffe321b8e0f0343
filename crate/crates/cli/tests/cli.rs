//! End-to-end checks of the `avca` binary: generation, training,
//! evaluation, export, exit codes, and idempotence.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn avca() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_avca"));
    cmd.env_remove("AVCA_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    avca().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_tiny_synth_config(dir: &Path) -> PathBuf {
    let path = dir.join("synth.json");
    std::fs::write(
        &path,
        r#"{
            "seen_classes": 4,
            "val_unseen_classes": 2,
            "test_unseen_classes": 2,
            "samples_per_class": 12,
            "sigma": 0.1,
            "embed_dim": 12,
            "latent_rank": 4,
            "audio_dim": 16,
            "visual_dim": 16
        }"#,
    )
    .unwrap();
    path
}

fn write_tiny_train_config(dir: &Path) -> PathBuf {
    let path = dir.join("train.json");
    std::fs::write(
        &path,
        r#"{
            "model": {
                "k_input": 16,
                "k_w2v": 12,
                "k_f": 6,
                "k_fhidd": 8,
                "k_attnhidd": 4,
                "k_proj": 4,
                "heads": 2,
                "r_enc": 0.1,
                "r_proj": 0.1,
                "r_dec": 0.1
            },
            "stage1_epochs": 2,
            "batch_size": 16
        }"#,
    )
    .unwrap();
    path
}

fn gen_tiny_bundle(dir: &Path) -> PathBuf {
    let config = write_tiny_synth_config(dir);
    let data_dir = dir.join("data");
    let out = run(&[
        "gen-synth",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    data_dir.join("manifest.json")
}

#[test]
fn gen_synth_writes_manifest_with_five_feature_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = gen_tiny_bundle(dir.path());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    let files = manifest["files"].as_object().unwrap();
    let feature_files: Vec<&str> = ["tr", "val_seen", "val_unseen", "test_seen", "test_unseen"]
        .iter()
        .map(|k| files[*k].as_str().unwrap())
        .collect();
    assert_eq!(feature_files.len(), 5);
    for rel in feature_files {
        assert!(rel.ends_with(".avzf"));
        assert!(manifest_path.parent().unwrap().join(rel).exists());
    }
    assert!(manifest_path.parent().unwrap().join("oracle.json").exists());
}

#[test]
fn gen_synth_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_synth_config(dir.path());
    for name in ["a", "b"] {
        let out = run(&[
            "gen-synth",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.path().join(name).to_str().unwrap(),
            "--seed",
            "9",
        ]);
        assert_ok(&out);
    }
    for entry in std::fs::read_dir(dir.path().join("a")).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name();
        let left = std::fs::read(entry.path()).unwrap();
        let right = std::fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(left, right, "{name:?} differs between identical seeds");
    }
}

#[test]
fn gen_synth_env_seed_matches_flag_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_synth_config(dir.path());
    let flag_dir = dir.path().join("flag");
    assert_ok(&run(&[
        "gen-synth",
        "--config",
        config.to_str().unwrap(),
        "--out",
        flag_dir.to_str().unwrap(),
        "--seed",
        "7",
    ]));
    let env_dir = dir.path().join("env");
    let out = avca()
        .env("AVCA_SEED", "7")
        .args([
            "gen-synth",
            "--config",
            config.to_str().unwrap(),
            "--out",
            env_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_ok(&out);
    assert_eq!(
        std::fs::read(flag_dir.join("tr.avzf")).unwrap(),
        std::fs::read(env_dir.join("tr.avzf")).unwrap()
    );
}

#[test]
fn default_generation_yields_two_thousand_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-synth",
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("2000 records"), "stdout: {stdout}");
    assert!(stdout.contains("40 classes"), "stdout: {stdout}");
}

#[test]
fn invalid_synth_config_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{ "sigma": -1.0 }"#).unwrap();
    let out_dir = dir.path().join("never");
    let out = run(&[
        "gen-synth",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists(), "output dir must not be created");
}

#[test]
fn full_training_pipeline_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny_bundle(dir.path());
    let config = write_tiny_train_config(dir.path());
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);

    // Exactly two checkpoints.
    let checkpoints: Vec<_> = std::fs::read_dir(&run_dir)
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().map(|x| x == "avck") == Some(true)
        })
        .collect();
    assert_eq!(checkpoints.len(), 2);

    // Stage-1 trace rows = stage1_epochs (plus header).
    let trace = std::fs::read_to_string(run_dir.join("stage1_trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "epoch,loss,val_S,val_U,val_HM,gamma");
    assert_eq!(lines.len(), 1 + 2);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap())
            .unwrap();
    for key in ["S", "U", "HM", "ZSL", "gamma", "per_class"] {
        assert!(report.get(key).is_some(), "report misses {key}");
    }

    // Evaluate with the stored calibration constant, then explicit flags.
    let ckpt = run_dir.join("stage2.avck");
    let out = run(&[
        "evaluate",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let eval: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert_eq!(eval["gamma"], report["gamma"]);
    assert_eq!(eval["HM"], report["HM"]);

    let out = run(&[
        "evaluate",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--gamma",
        "0",
        "--zsl-only",
    ]);
    assert_ok(&out);
    let zsl: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert!(zsl.get("ZSL").is_some());
    assert!(zsl.get("S").is_none() && zsl.get("HM").is_none());

    // Export: 2 rows per sample plus one per class, after the header.
    let csv = dir.path().join("emb.csv");
    let out = run(&[
        "export-embeddings",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--subset",
        "test_unseen",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows = text.lines().count() - 1;
    let samples = 2 * 12; // two test-unseen classes at 12 samples each
    assert_eq!(rows, 2 * samples + 8);

    // Re-export is byte-identical.
    let first = std::fs::read(&csv).unwrap();
    assert_ok(&run(&[
        "export-embeddings",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--subset",
        "test_unseen",
        "--out",
        csv.to_str().unwrap(),
    ]));
    assert_eq!(std::fs::read(&csv).unwrap(), first);
}

#[test]
fn staged_training_matches_combined_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny_bundle(dir.path());
    let config = write_tiny_train_config(dir.path());
    let both_dir = dir.path().join("both");
    let split_dir = dir.path().join("split");
    assert_ok(&run(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        both_dir.to_str().unwrap(),
    ]));
    assert_ok(&run(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        split_dir.to_str().unwrap(),
        "--stage",
        "1",
    ]));
    assert_ok(&run(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        split_dir.to_str().unwrap(),
        "--stage",
        "2",
    ]));
    assert_eq!(
        std::fs::read(both_dir.join("stage2.avck")).unwrap(),
        std::fs::read(split_dir.join("stage2.avck")).unwrap(),
        "staged runs must reproduce the combined run"
    );
    assert_eq!(
        std::fs::read(both_dir.join("report.json")).unwrap(),
        std::fs::read(split_dir.join("report.json")).unwrap()
    );
}

#[test]
fn param_count_prints_paper_scale_total() {
    let out = run(&["param-count"]);
    assert_ok(&out);
    let count: u64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert_eq!(count, 1_693_408);
}

#[test]
fn corrupt_feature_file_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny_bundle(dir.path());
    let tr = manifest.parent().unwrap().join("tr.avzf");
    let mut bytes = std::fs::read(&tr).unwrap();
    bytes[0..4].copy_from_slice(b"XXXX");
    std::fs::write(&tr, bytes).unwrap();
    let out = run(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad magic"), "stderr: {stderr}");
}

#[test]
fn invalid_train_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny_bundle(dir.path());
    let config = dir.path().join("bad_train.json");
    std::fs::write(&config, r#"{ "batch_size": 0 }"#).unwrap();
    let out = run(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_bundle_dim_mismatch_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny_bundle(dir.path());
    let config = write_tiny_train_config(dir.path());
    let run_dir = dir.path().join("run");
    assert_ok(&run(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--stage",
        "1",
    ]));
    // A second bundle with different feature dims.
    let other_cfg = dir.path().join("other.json");
    std::fs::write(
        &other_cfg,
        r#"{
            "seen_classes": 4, "val_unseen_classes": 2, "test_unseen_classes": 2,
            "samples_per_class": 12, "sigma": 0.1, "embed_dim": 12,
            "latent_rank": 4, "audio_dim": 20, "visual_dim": 20
        }"#,
    )
    .unwrap();
    let other_dir = dir.path().join("other");
    assert_ok(&run(&[
        "gen-synth",
        "--config",
        other_cfg.to_str().unwrap(),
        "--out",
        other_dir.to_str().unwrap(),
    ]));
    let out = run(&[
        "evaluate",
        "--manifest",
        other_dir.join("manifest.json").to_str().unwrap(),
        "--checkpoint",
        run_dir.join("stage1.avck").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension mismatch"));
}

#[test]
fn help_documents_every_subcommand() {
    let out = run(&["--help"]);
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "gen-synth",
        "train",
        "evaluate",
        "param-count",
        "export-embeddings",
    ] {
        assert!(text.contains(sub), "--help misses {sub}");
    }
    for (sub, flags) in [
        ("gen-synth", vec!["--config", "--out", "--seed"]),
        ("train", vec!["--manifest", "--config", "--out", "--stage", "--seed"]),
        ("evaluate", vec!["--manifest", "--checkpoint", "--gamma", "--output", "--zsl-only"]),
        ("param-count", vec!["--config"]),
        ("export-embeddings", vec!["--manifest", "--checkpoint", "--subset", "--out"]),
    ] {
        let out = run(&[sub, "--help"]);
        assert_ok(&out);
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in flags {
            assert!(text.contains(flag), "{sub} --help misses {flag}");
        }
    }
}
