//! End-to-end checks of the `vlaforge` binary: exit codes, file outputs,
//! idempotency under a fixed seed.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vlaforge"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "backbone": {
            "image_size": 32, "patch_size": 8, "num_blocks": 2, "embed_dim": 32,
            "num_heads": 4, "text_vocab": 64, "text_len_max": 16,
            "text_token_dim": 32, "text_out_dim": 32, "frozen": true
        },
        "perceiver": {
            "num_queries": 4, "width": 24, "depth": 1,
            "heads_internal": 3, "backbone_heads": 4
        },
        "variant": "T4",
        "profile": "toy",
        "q": 4,
        "alpha": 0.5,
        "seed": 1024,
        "use_orth": true,
        "data": {
            "num_identities": 4, "videos_per_identity": 2, "frames_per_video": 2,
            "image_size": 32, "strength_min": 0.6, "strength_max": 1.0
        },
        "dataset": dir.join("bench"),
        "out": dir.join("out")
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn gen_data_is_idempotent_and_prints_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());

    let out = run_ok(bin().args(["gen-data", "--config"]).arg(&config));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("effective-config:"));
    assert!(stdout.contains("generated"));
    let manifest = dir.path().join("bench").join("manifest.jsonl");
    let first = std::fs::read(&manifest).unwrap();

    run_ok(bin().args(["gen-data", "--config"]).arg(&config));
    let second = std::fs::read(&manifest).unwrap();
    assert_eq!(first, second);
}

#[test]
fn invalid_config_exits_with_code_two_and_names_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        serde_json::json!({"alpha": 7.5, "q": 0, "profile": "hyperspeed"}).to_string(),
    )
    .unwrap();
    let out = bin().args(["gen-data", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    for field in ["alpha", "q", "profile"] {
        assert!(stderr.contains(field), "stderr lacks {field}: {stderr}");
    }
}

#[test]
fn unknown_dataset_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--dataset"])
        .arg(dir.path().join("nowhere"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn full_cli_workflow_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());

    run_ok(bin().args(["gen-data", "--config"]).arg(&config));
    let out = run_ok(bin().args(["train", "--config"]).arg(&config));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("trainable scalars"));

    let ckpt = dir.path().join("out").join("checkpoint.vlfg");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.path().join("out").join("loss_log.jsonl")).unwrap();
    // One record per epoch; the toy profile runs 30.
    assert_eq!(log.lines().count(), 30);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "L_loc", "L_VLA", "L_G", "L_L", "L_orth"] {
            assert!(v.get(key).is_some(), "loss log line lacks {key}");
        }
    }

    // Evaluation writes a report and prints the headline metrics.
    let out = run_ok(
        bin().args(["eval", "--config"]).arg(&config).args(["--checkpoint"]).arg(&ckpt),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("frame AUROC"));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out").join("report.json")).unwrap(),
    )
    .unwrap();
    // Counts match the manifest: 2 test videos at 2 frames each.
    assert_eq!(report["n_videos"], 4);
    assert_eq!(report["n_frames"], 8);

    // Alpha overrides change the fused score affinely; the report records it.
    let out = run_ok(
        bin()
            .args(["eval", "--config"])
            .arg(&config)
            .args(["--checkpoint"])
            .arg(&ckpt)
            .args(["--alpha", "1.0"]),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("alpha 1"));

    // Heatmap export: q + 3 PNGs plus the raw arrays.
    let out = run_ok(
        bin()
            .args(["viz", "--config"])
            .arg(&config)
            .args(["--checkpoint"])
            .arg(&ckpt)
            .args(["--frame-id", "id000_v1/0"]),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 7 heatmaps"));
    let heat_dir = dir.path().join("out").join("heatmaps").join("id000_v1_0");
    for name in ["mask_q0.png", "mask_q3.png", "locmap.png", "vlamap.png", "fusedmap.png", "maps.json"]
    {
        assert!(heat_dir.join(name).exists(), "missing {name}");
    }

    // Resume from the final checkpoint is a no-op that still succeeds.
    run_ok(
        bin().args(["train", "--config"]).arg(&config).args(["--resume"]).arg(&ckpt),
    );
}

#[test]
fn show_prompts_prints_the_templates_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    run_ok(bin().args(["gen-data", "--config"]).arg(&config));
    let out = run_ok(
        bin().args(["gen-data", "--show-prompts", "--config"]).arg(&config),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("This is a real photo of <id> person."));
    assert!(stdout.contains("This is a fake photo of <id> person."));
}

#[test]
fn ablate_renders_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    run_ok(bin().args(["gen-data", "--config"]).arg(&config));
    let out = run_ok(
        bin()
            .args(["ablate", "--config"])
            .arg(&config)
            .args(["--variants", "Base,T1", "--seeds", "7"]),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Base"));
    assert!(stdout.contains("T1"));
    let table: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out").join("ablation.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
}
