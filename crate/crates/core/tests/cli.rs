use std::path::Path;
use std::process::Command;

use davanet::config::AppConfig;
use davanet::eval::{AblationReport, EvalReport, Variant};
use davanet::network::{ContextKind, ModelConfig};
use davanet::synth::SynthConfig;
use davanet::training::{AugmentConfig, StageBudgets, TrainConfig};

mod common;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_davanet"))
}

fn run(args: &[&str]) -> i32 {
    let out = bin().args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap()
}

fn tiny_config() -> AppConfig {
    AppConfig {
        synth: SynthConfig {
            count: 4,
            width: 32,
            height: 32,
            focal_length_px: 30.0,
            subframe_choices: vec![3],
            supersample: 1,
            ..SynthConfig::default()
        },
        model: ModelConfig::with_width(4),
        train: TrainConfig {
            batch_size: 1,
            iterations: StageBudgets {
                deblur: 2,
                disp: 2,
                joint: 2,
            },
            augment: AugmentConfig {
                crop_size: 16,
                ..AugmentConfig::default()
            },
            smoothing_window: 1,
            ..TrainConfig::default()
        },
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg_path = root.join("config.json");
    tiny_config().write(&cfg_path).unwrap();
    let data = root.join("data");
    let ck = root.join("ck");

    assert_eq!(run(&["synth", "--config", s(&cfg_path), "--out", s(&data), "--seed", "3"]), 0);
    for stage in ["deblur", "disp", "joint"] {
        assert_eq!(
            run(&["train", "--stage", stage, "--data", s(&data), "--config", s(&cfg_path), "--out", s(&ck)]),
            0,
            "{stage}"
        );
        assert!(ck.join(format!("{stage}.ckpt")).is_file());
        assert!(ck.join(format!("{stage}_loss.csv")).is_file());
    }

    let report = root.join("report.json");
    let eval = |variant: &str| {
        run(&[
            "eval", "--ckpt", s(&ck.join("joint.ckpt")), "--data", s(&data), "--split", "test", "--variant", variant,
            "--report", s(&report),
        ])
    };
    assert_eq!(eval("full"), 0);
    let first: EvalReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(first.variant, Variant::Full);
    assert_eq!(first.samples.len(), 1);
    assert_eq!(eval("full"), 0);
    let second: EvalReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(first.without_timing(), second.without_timing());
    assert_eq!(eval("no_context"), 2);
    assert_eq!(eval("everything"), 2);

    let out = root.join("restored");
    let test_dir = data.join("test").join("00003");
    assert_eq!(
        run(&[
            "deblur", "--ckpt", s(&ck.join("joint.ckpt")), "--left", s(&test_dir.join("blurry_L.png")),
            "--right", s(&test_dir.join("blurry_R.png")), "--out", s(&out),
        ]),
        0
    );
    for f in ["restored_left.png", "restored_right.png", "disp_left.pfm", "disp_right.pfm", "gate_left.png", "gate_right.png"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let ablation = root.join("ablation.json");
    assert_eq!(run(&["ablate", "--ckpt-dir", s(&ck), "--data", s(&data), "--report", s(&ablation)]), 0);
    let a: AblationReport = serde_json::from_slice(&std::fs::read(&ablation).unwrap()).unwrap();
    assert_eq!(a.rows.len(), 5);
    for row in &a.rows {
        assert_eq!(row.report.is_some(), row.variant != Variant::NoContext, "{:?}", row.variant);
    }
}

#[test]
fn single_rate_checkpoint_serves_the_context_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = tiny_config();
    cfg.model.context = ContextKind::SingleRate;
    let cfg_path = root.join("config.json");
    cfg.write(&cfg_path).unwrap();
    let data = root.join("data");
    assert_eq!(run(&["synth", "--config", s(&cfg_path), "--out", s(&data), "--count", "2"]), 0);
    let ck = root.join("ck").join("no_context");
    assert_eq!(
        run(&["train", "--stage", "deblur", "--data", s(&data), "--config", s(&cfg_path), "--out", s(&ck)]),
        0
    );
    let report = root.join("r.json");
    assert_eq!(
        run(&[
            "eval", "--ckpt", s(&ck.join("deblur.ckpt")), "--data", s(&data), "--variant", "no_context", "--report",
            s(&report),
        ]),
        0
    );
    let ablation = root.join("ablation.json");
    assert_eq!(run(&["ablate", "--ckpt-dir", s(&root.join("ck")), "--data", s(&data), "--report", s(&ablation)]), 0);
    let a: AblationReport = serde_json::from_slice(&std::fs::read(&ablation).unwrap()).unwrap();
    assert!(a.rows.iter().filter(|r| r.report.is_some()).all(|r| r.variant == Variant::NoContext));
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg_path = root.join("config.json");
    std::fs::write(&cfg_path, r#"{"model": {"base_width": 0}}"#).unwrap();
    assert_eq!(run(&["synth", "--config", s(&cfg_path), "--out", s(&root.join("d"))]), 2);

    tiny_config().write(&cfg_path).unwrap();
    let missing = root.join("missing");
    assert_eq!(
        run(&["train", "--stage", "deblur", "--data", s(&missing), "--config", s(&cfg_path), "--out", s(&root.join("ck"))]),
        3
    );
    assert_eq!(
        run(&["train", "--stage", "joint", "--data", s(&missing), "--config", s(&cfg_path), "--out", s(&root.join("ck"))]),
        2
    );

    let data = root.join("data");
    assert_eq!(run(&["synth", "--config", s(&cfg_path), "--out", s(&data), "--count", "2"]), 0);
    let ck = root.join("blowup");
    assert_eq!(
        run(&[
            "train", "--stage", "deblur", "--data", s(&data), "--config", s(&cfg_path), "--out", s(&ck), "--set",
            "train.base_lr=1e200", "--set", "train.iterations.deblur=5",
        ]),
        4
    );
    assert!(std::fs::read_dir(&ck).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("nonfinite_")));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg_path = root.join("config.json");
    tiny_config().write(&cfg_path).unwrap();
    let (a, b) = (root.join("a"), root.join("b"));
    assert_eq!(run(&["synth", "--config", s(&cfg_path), "--out", s(&a), "--seed", "9"]), 0);
    assert_eq!(run(&["--sequential", "synth", "--config", s(&cfg_path), "--out", s(&b), "--seed", "9"]), 0);
    assert_eq!(common::tree_bytes(&a), common::tree_bytes(&b));
}
