use std::path::Path;
use std::process::{Command, Output};

use mmvt_core::synthetic::{make_synthetic, write_manifest, SyntheticConfig};
use mmvt_core::Modality;

fn mmvt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmvt"))
        .args(args)
        .env_remove("MMVT_THREADS")
        .output()
        .expect("run mmvt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn shapes_prints_the_token_table() {
    let o = mmvt(&["shapes", "--model", "B/2:R+S/4:S+Ti/8:F", "--frames", "64", "--res", "224"]);
    assert!(o.status.success());
    let rows: Vec<Vec<String>> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect();
    let got: Vec<(&str, &str)> = rows.iter().map(|r| (r[2].as_str(), r[3].as_str())).collect();
    assert_eq!(got, [("32", "196"), ("16", "24"), ("8", "196")]);
}

#[test]
fn usage_errors_exit_2_with_usage_text() {
    let o = mmvt(&["shapes", "--model", "B/2:R", "--frames", "64", "--res", "224", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage:"));
    assert_eq!(mmvt(&["shapes", "--model", "Q/2:R", "--frames", "4", "--res", "32"]).status.code(), Some(2));
    assert_eq!(mmvt(&[]).status.code(), Some(2));
    assert_eq!(mmvt(&["--threads", "0", "gradcheck"]).status.code(), Some(2));
}

#[test]
fn help_documents_every_subcommand() {
    for sub in ["extract-spec", "train", "infer", "dump-logits", "eval", "gradcheck", "shapes"] {
        let o = mmvt(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        assert!(stdout(&o).contains("--threads"), "{sub}");
    }
}

#[test]
fn runtime_errors_exit_1_with_a_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("spec.mmt");
    let o = mmvt(&["extract-spec", "--wav", "/nonexistent.wav", "--frames", "4", "--out", &out.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(1));
    let line: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(line["error"], "missing_file");
    assert!(line["message"].as_str().unwrap().contains("nonexistent.wav"));

    let o = mmvt(&["shapes", "--model", "B/2:R", "--frames", "63", "--res", "224"]);
    assert_eq!(o.status.code(), Some(1));
    let line: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(line["error"], "geometry");
}

#[test]
fn threads_fall_back_to_the_environment() {
    let run = |env: &str| {
        Command::new(env!("CARGO_BIN_EXE_mmvt"))
            .args(["shapes", "--model", "Ti/2:R", "--frames", "2", "--res", "32"])
            .env("MMVT_THREADS", env)
            .output()
            .unwrap()
    };
    assert!(run("3").status.success());
    assert_eq!(run("zero").status.code(), Some(2));
}

fn manifest(dir: &Path) -> String {
    let clips = make_synthetic(&SyntheticConfig {
        n_clips: 4,
        n_verbs: 2,
        n_nouns: 2,
        frames: 4,
        height: 32,
        width: 32,
        modalities: vec![Modality::Rgb],
        seed: 1,
    })
    .unwrap();
    write_manifest(dir, &clips).unwrap().to_string_lossy().into_owned()
}

#[test]
fn train_echoes_the_resolved_config_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(&dir.path().join("data"));
    let cfg = dir.path().join("train.json");
    std::fs::write(
        &cfg,
        r#"{"epochs": 3, "batch_size": 2, "seed": 4, "resolution": 32, "frames": 4, "n_verbs": 2, "n_nouns": 2,
            "view_dims": "1:2:16:32", "global_dims": "1:2:16:32"}"#,
    )
    .unwrap();
    let out = dir.path().join("ckpt");
    let o = mmvt(&[
        "train", "--model", "Ti/2:R", "--manifest", &m, "--config", &cfg.to_string_lossy(), "--out",
        &out.to_string_lossy(), "--epochs", "1", "--base-lr", "0.01",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(run["epochs"], 1);
    assert_eq!(run["base_lr"], 0.01);
    assert_eq!(run["seed"], 4);
    assert_eq!(run["warmup_frac"], 0.05);
    assert_eq!(run["model"], "Ti/2:R");
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 5);
        for k in ["step", "lr", "loss", "verb_acc", "noun_acc"] {
            assert!(keys.contains(&k), "{k}");
        }
    }

    let ckpt = out.join("model.ckpt");
    let o = mmvt(&["infer", "--checkpoint", &ckpt.to_string_lossy(), "--manifest", &m]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 4);

    std::fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let o = mmvt(&["train", "--model", "Ti/2:R", "--manifest", &m, "--config", &cfg.to_string_lossy(), "--out", &out.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_for_seed_zero() {
    let o = mmvt(&["gradcheck", "--seed", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let err: f64 = text.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{text}");
}
