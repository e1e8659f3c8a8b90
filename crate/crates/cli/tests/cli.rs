mod common;

use common::{code, stderr, Workspace};
use serde_json::Value;

const IMAGE: &str = "image:id=lake;palette=warm;texture=glossy;motion=bustling;brightness=0.5000";
const CAPTION: &str = "A fast major-chord piece with a bright tone, rooted near 440.00 Hz.";

#[test]
fn gen_before_align_is_a_dependency_error() {
    let ws = Workspace::new();
    let out = ws.run(&["train", "--stage", "gen"]);
    assert_eq!(code(&out), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("align"), "{}", stderr(&out));
    assert!(!ws.path("checkpoints/gen.ckpt").exists());
}

#[test]
fn joint_names_the_first_missing_stage() {
    let ws = Workspace::new();
    ws.ok(&["synth-data"]);
    ws.ok(&["train", "--stage", "autoencoder"]);
    let out = ws.run(&["train", "--stage", "joint"]);
    assert_eq!(code(&out), Some(3));
    assert!(stderr(&out).contains("align"), "{}", stderr(&out));
}

#[test]
fn commands_without_a_corpus_ask_for_synth_data() {
    let ws = Workspace::new();
    for args in [&["train", "--stage", "autoencoder"][..], &["evaluate", "--ground-truth"], &["annotate"]] {
        let out = ws.run(args);
        assert_eq!(code(&out), Some(3), "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).contains("synth-data"), "{}", stderr(&out));
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let ws = Workspace::with_config(|c| c["unknown_key"] = 1.into());
    assert_eq!(code(&ws.run(&["synth-data"])), Some(2));

    let ws = Workspace::with_config(|c| c["generation"]["epochs"] = 0.into());
    assert_eq!(code(&ws.run(&["synth-data"])), Some(2));

    let ws = Workspace::new();
    let out = ws.run_env(&["synth-data"], &[("MMFLOW_SEED", "not-a-number")]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("MMFLOW_SEED"));
}

#[test]
fn generation_needs_at_least_one_condition() {
    let ws = Workspace::new();
    let out = ws.run(&["generate"]);
    assert_eq!(code(&out), Some(1));
    assert!(stderr(&out).contains("at least one"), "{}", stderr(&out));
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let ws = Workspace::new();
    let manifest = |ws: &Workspace| std::fs::read_to_string(ws.path("corpus/train/manifest.jsonl")).unwrap();
    ws.ok(&["synth-data", "--n-train", "4", "--n-val", "2"]);
    let from_file = manifest(&ws);
    let out = ws.run_env(&["synth-data", "--n-train", "4", "--n-val", "2"], &[("MMFLOW_SEED", "11")]);
    assert!(out.status.success());
    let from_env = manifest(&ws);
    assert_ne!(from_env, from_file);
    let out = ws.run_env(&["--seed", "3", "synth-data", "--n-train", "4", "--n-val", "2"], &[("MMFLOW_SEED", "11")]);
    assert!(out.status.success());
    assert_eq!(manifest(&ws), from_file);
}

#[test]
fn full_pipeline_on_a_tiny_corpus() {
    let ws = Workspace::new();
    ws.train_all();
    for stage in ["autoencoder", "align", "gen", "joint"] {
        assert!(ws.path(&format!("checkpoints/{stage}.ckpt")).is_file());
        let csv = std::fs::read_to_string(ws.path(&format!("checkpoints/{stage}_loss.csv"))).unwrap();
        assert!(csv.starts_with("epoch,"));
    }
    let joint = std::fs::read_to_string(ws.path("checkpoints/joint_loss.csv")).unwrap();
    assert_eq!(joint.lines().next(), Some("epoch,l_g,l_a,l_j"));
    assert_eq!(joint.lines().count(), 3);

    // Caption-only and all-three-condition generation.
    let story = ws.path("story.txt");
    std::fs::write(&story, "A still scene rendered in earthy colours, its surfaces smooth, brightness 0.2500.\n").unwrap();
    ws.ok(&["generate", "--caption", CAPTION, "--out", ws.path("gen_c").to_str().unwrap()]);
    ws.ok(&[
        "generate",
        "--image",
        IMAGE,
        "--story",
        &format!("@{}", story.display()),
        "--caption",
        CAPTION,
        "--n",
        "2",
        "--out",
        ws.path("gen_all").to_str().unwrap(),
    ]);
    assert!(ws.path("gen_c/gen_000.wav").is_file());
    assert!(ws.path("gen_all/gen_001.wav").is_file());
    let rows = std::fs::read_to_string(ws.path("gen_all/manifest.jsonl")).unwrap();
    assert!(rows.contains("earthy colours"));

    ws.ok(&["evaluate", "--ground-truth"]);
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("reports/eval_val_ground_truth.json")).unwrap()).unwrap();
    assert!(report["frechet"].as_f64().unwrap().abs() < 1e-9);

    ws.ok(&["evaluate"]);
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("reports/eval_val_generated.json")).unwrap()).unwrap();
    assert_eq!(report["subsets"].as_array().unwrap().len(), 7);

    let out = ws.ok(&["annotate"]);
    assert!(out.contains("accepted 48/48"), "{out}");
    let quads = std::fs::read_to_string(ws.path("reports/quadruples.jsonl")).unwrap();
    assert_eq!(quads.lines().count(), 48);
    let table = std::fs::read_to_string(ws.path("reports/dataset_stats.txt")).unwrap();
    assert!(table.contains("Num (k)") && table.contains("Total"));

    ws.ok(&["ablate"]);
    let csv = std::fs::read_to_string(ws.path("reports/ablation_seed3.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("arm,epoch,frechet,kl,condition_score"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let a = Workspace::new();
    let b = Workspace::new();
    for ws in [&a, &b] {
        ws.ok(&["synth-data"]);
    }
    a.ok(&["train", "--stage", "autoencoder"]);
    b.ok(&["--sequential", "train", "--stage", "autoencoder"]);
    let read = |ws: &Workspace, p: &str| std::fs::read(ws.path(p)).unwrap();
    assert_eq!(read(&a, "checkpoints/autoencoder_loss.csv"), read(&b, "checkpoints/autoencoder_loss.csv"));
    assert_eq!(read(&a, "checkpoints/autoencoder.ckpt"), read(&b, "checkpoints/autoencoder.ckpt"));
}
