use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use inpaint_core::dsp::load_wav;

fn inpaint(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_inpaint")).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("stdout: {}", String::from_utf8_lossy(&out.stdout));
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> String {
    let out = inpaint(args);
    assert!(out.status.success(), "inpaint {args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// First utterance file of the synthetic corpus, without extension.
fn first_utterance(root: &Path) -> std::path::PathBuf {
    let mut wavs: Vec<_> = walk(root).into_iter().filter(|p| p.extension().is_some_and(|e| e == "wav")).collect();
    wavs.sort();
    wavs[0].with_extension("")
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn synth_validate_train_correct_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let synth_cfg = dir.path().join("synth.json");
    fs::write(&synth_cfg, r#"{"min_frames": 8, "max_frames": 12, "silence_frames": 4, "n_speakers": 4}"#).unwrap();
    ok(&["corpus", "synth", "--seed", "3", "--n", "24", "--out", s(&corpus), "--config", s(&synth_cfg)]);
    assert!(corpus.join("inventory.json").exists());

    let summary = ok(&["corpus", "validate", s(&corpus)]);
    assert!(summary.contains("24 items"), "{summary}");

    let ckpt = dir.path().join("ckpt");
    let siamese_cfg = dir.path().join("siamese.json");
    fs::write(
        &siamese_cfg,
        r#"{"hidden": 8, "embed_dim": 4, "train": {"epochs": 2, "pairs_per_epoch": 40, "validation_pairs": 20, "learning_rate": 0.003}}"#,
    )
    .unwrap();
    let siamese_dir = ckpt.join("siamese");
    ok(&["train", "siamese", "--corpus", s(&corpus), "--config", s(&siamese_cfg), "--out", s(&siamese_dir)]);
    let log = fs::read_to_string(siamese_dir.join("train_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 2);
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }

    let gen_cfg = dir.path().join("generator.json");
    fs::write(
        &gen_cfg,
        r#"{"channels": [8, 8, 8, 8, 8], "phoneme_embed_dim": 4, "targets": ["A", "B"],
            "train": {"epochs": 1, "batch_size": 8, "learning_rate": 0.001}}"#,
    )
    .unwrap();
    let gen_dir = ckpt.join("generator");
    ok(&[
        "train", "generator", "--corpus", s(&corpus), "--config", s(&gen_cfg), "--siamese", s(&siamese_dir), "--out",
        s(&gen_dir),
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(gen_dir.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 1);

    let utt = first_utterance(&corpus);
    let wav = utt.with_extension("wav");
    let align = format!("{}.align.csv", utt.display());
    let corrected = dir.path().join("corrected.wav");
    ok(&[
        "correct", "--in", s(&wav), "--align", &align, "--k", "1", "--target", "B", "--ckpt", s(&ckpt), "--gl-iters",
        "4", "--out", s(&corrected),
    ]);
    let (before, after) = (load_wav(&wav).unwrap(), load_wav(&corrected).unwrap());
    assert_eq!(before.len(), after.len());
    assert_eq!(after.sample_rate, before.sample_rate);

    let speaker = utt.parent().unwrap().file_name().unwrap().to_str().unwrap();
    let speakers = fs::read_to_string(corpus.join("speakers.csv")).unwrap();
    let gender = speakers
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{speaker},")))
        .unwrap()
        .to_string();
    let spliced = dir.path().join("spliced.wav");
    ok(&[
        "baseline-concat", "--in", s(&wav), "--align", &align, "--k", "1", "--target", "C", "--corpus", s(&corpus),
        "--seed", "1", "--gender", &gender, "--speaker", speaker, "--out", s(&spliced),
    ]);
    assert!(!load_wav(&spliced).unwrap().is_empty());

    let eval = dir.path().join("eval");
    ok(&[
        "evaluate", "--corpus", s(&corpus), "--ckpt", s(&ckpt), "--pairs", "A:B", "--gl-iters", "4", "--seed", "2",
        "--out", s(&eval),
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert!(report["conditions"].is_object());
    assert!(fs::read_to_string(eval.join("report.md")).unwrap().contains('|'));

    let finetune = dir.path().join("finetune");
    ok(&["export", "finetune", "--corpus", s(&corpus), "--ckpt", s(&ckpt), "--targets", "A", "--out", s(&finetune)]);
    assert!(finetune.join("manifest.json").exists());

    let listening = dir.path().join("listening");
    ok(&[
        "export", "listening", "--corpus", s(&corpus), "--ckpt", s(&ckpt), "--pairs", "A:B", "--n", "2", "--gl-iters",
        "4", "--out", s(&listening),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(listening.join("listening_manifest.json")).unwrap()).unwrap();
    assert!(!manifest["abx_tasks"].as_array().unwrap().is_empty());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = inpaint(&["corpus", "validate", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("inventory"));

    let out = inpaint(&["evaluate", "--corpus", s(dir.path()), "--ckpt", s(dir.path()), "--out", s(dir.path())]);
    assert!(!out.status.success(), "--pairs is required");

    let out = inpaint(&["correct", "--k", "1"]);
    assert!(!out.status.success());
}
