use std::path::Path;
use std::process::{Command, Output};

use motility3d::data::fixture::{write_fixture, FixtureSpec};
use motility3d::models::{ArchId, ArchSpec, ModelParams};
use motility3d::train::{save_checkpoint, CheckpointInfo, Seeds};
use motility3d::data::{FrameSpec, SPLIT_SIZES};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motility3d"))
        .args(args)
        .output()
        .expect("spawn motility3d")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_checkpoint(path: &Path, arch: ArchId) {
    let model = ModelParams::<f32>::build(ArchSpec::new(arch), 5).unwrap();
    let info = CheckpointInfo {
        arch,
        seeds: Seeds::default(),
        epoch: 0,
        tabular_stats: None,
        class_weights: vec![1.0; 3],
        split_sizes: SPLIT_SIZES,
        frames: FrameSpec {
            count: 16,
            size: Some([64, 80]),
            ..FrameSpec::default()
        },
        best_val_loss: 1.0,
        best_val_acc: 0.0,
    };
    save_checkpoint(path, &model, &info).unwrap();
}

#[test]
fn shapes_prints_canonical_chain() {
    let o = run(&["shapes", "--arch", "resnet18_3d_tab"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("layer4    [512, 4, 15, 20]"), "{s}");
    assert!(s.contains("kernel [4, 15, 20] -> 512"), "{s}");
    assert!(s.contains("fusion    531 -> 84"), "{s}");
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["gradcheck", "--arch", "resnet50_3d"]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"arch":"resnet18_3d","manifest":"m.csv","max_lr":0.5}"#).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("junk.m3dc");
    std::fs::write(&ckpt, b"junk").unwrap();
    let o = run(&["predict", "--ckpt", ckpt.to_str().unwrap(), "--frames", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("M3DC"));
}

#[test]
fn fixture_then_predict_prints_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let fx_dir = dir.path().join("fx");
    let o = run(&["fixture", "--kind", "overfit", "--out", fx_dir.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(fx_dir.join("manifest.csv").exists());

    let ckpt = dir.path().join("m.m3dc");
    tiny_checkpoint(&ckpt, ArchId::Resnet18);
    let frames = fx_dir.join("clips/s001");
    let o = run(&["predict", "--ckpt", ckpt.to_str().unwrap(), "--frames", frames.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    let probs: Vec<f64> = v["probabilities"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p.as_f64().unwrap())
        .collect();
    assert_eq!(probs.len(), 3);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 2e-6);
    let idx = v["index"].as_u64().unwrap() as usize;
    assert_eq!(v["class"], ["progressive", "non_progressive", "immotile"][idx]);
    assert!(line.contains(&format!("{:.6}", probs[0])));

    let o = run(&[
        "predict", "--ckpt", ckpt.to_str().unwrap(), "--frames", frames.to_str().unwrap(),
        "--tabular", "t.csv", "--id", "s001",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tabular_model_requires_row() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_fixture(
        &dir.path().join("fx"),
        &FixtureSpec {
            tabular: true,
            ..FixtureSpec::overfit()
        },
    )
    .unwrap();
    let ckpt = dir.path().join("t.m3dc");
    tiny_checkpoint(&ckpt, ArchId::Resnet18Tab);
    let frames = fx.manifest.parent().unwrap().join("clips/s001");
    let o = run(&["predict", "--ckpt", ckpt.to_str().unwrap(), "--frames", frames.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--tabular"));
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_fixture(&dir.path().join("fx"), &FixtureSpec::overfit()).unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "arch": "resnet18_3d",
            "manifest": fx.manifest,
            "max_epochs": 1,
            "split_sizes": [5, 2, 1],
            "frame_count": 16,
            "frame_size": [64, 80],
        })
        .to_string(),
    )
    .unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch   1"));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_loss,val_loss,val_acc,lr\n1,"));

    let o = run(&[
        "eval", "--ckpt", out.join("best.m3dc").to_str().unwrap(),
        "--manifest", fx.manifest.to_str().unwrap(), "--part", "val",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["total"], 2);
    let logged: f64 = metrics.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(v["accuracy"].as_f64().unwrap(), logged);
    assert!(out.join("eval_val.json").exists());
}
