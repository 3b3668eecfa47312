use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hedunet::experiment::{ExperimentConfig, Manifest};
use hedunet::io::{read_mask, read_raster, write_raster};
use hedunet::raster::Raster;
use hedunet::training::Augmentation;

fn hedunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hedunet")).args(args).env_remove("HEDUNET_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hedunet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    hedunet(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.generator.size = 32;
    cfg.data.train_scenes = 3;
    cfg.data.val_scenes = 2;
    cfg.data.tile_size = 32;
    cfg.model.levels = 3;
    cfg.model.base_channels = 2;
    cfg.train.epochs = 2;
    cfg.train.augmentation = Augmentation::Off;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic_and_seedable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["generate", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["generate", "--config", p(&cfg), "--out", p(&b), "--jobs", "3"]);
    assert_eq!(tree(&a), tree(&b));
    ok(&["generate", "--config", p(&cfg), "--out", p(&c), "--seed", "7"]);
    assert_ne!(tree(&a), tree(&c));

    let d = tmp.path().join("d");
    let out = Command::new(env!("CARGO_BIN_EXE_hedunet"))
        .args(["generate", "--config", p(&cfg), "--out", p(&d)])
        .env("HEDUNET_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(tree(&c), tree(&d));
    assert_eq!(Manifest::read(&a).unwrap().scenes.len(), 5);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(code(&["generate", "--out", p(&out)]), 2);
    assert_eq!(code(&["generate", "--config", p(&tmp.path().join("missing.json")), "--out", p(&out)]), 2);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"model": {"levles": 3}}"#).unwrap();
    assert_eq!(code(&["generate", "--config", p(&bad), "--out", p(&out)]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["eval", "--data", p(&out)]), 2);
}

#[test]
fn train_eval_predict_erf_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["generate", "--config", p(&cfg), "--out", p(&data)]);
    let ckpt = tmp.path().join("model.hedu");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]);

    let log = fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert!(lines[0].starts_with("epoch,split,loss_total"));
    assert_eq!(lines.len(), 1 + 2 * 2);

    // Re-running without --force is refused; with it the bytes repeat.
    let first = fs::read(&ckpt).unwrap();
    assert_eq!(code(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]), 2);
    assert_eq!(fs::read(&ckpt).unwrap(), first);
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt), "--force"]);
    assert_eq!(fs::read(&ckpt).unwrap(), first);
    assert_eq!(fs::read_to_string(ckpt.with_extension("csv")).unwrap(), log);

    let csv = tmp.path().join("eval.csv");
    let table = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--csv", p(&csv)]);
    assert!(table.contains("mIoU"));
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 2);
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--config", p(&cfg), "--csv", p(&tmp.path().join("e2.csv"))]);
    assert_eq!(fs::read_to_string(tmp.path().join("e2.csv")).unwrap(), rows);

    let pred = tmp.path().join("pred");
    ok(&["predict", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&pred)]);
    assert!(pred.join("val_000_seg.ras").exists() && pred.join("val_001_attn_seg.ras").exists());
    assert!(!pred.join("val_000_side_seg_0.ras").exists());
    assert_eq!(read_raster(&pred.join("val_000_attn_seg.ras")).unwrap().channels(), 3);
    // Saved predictions score exactly like the checkpoint.
    let from_pred = tmp.path().join("e3.csv");
    ok(&["eval", "--predictions", p(&pred), "--data", p(&data), "--csv", p(&from_pred)]);
    assert_eq!(fs::read_to_string(&from_pred).unwrap(), rows);

    let sides = tmp.path().join("sides");
    ok(&["predict", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&sides), "--sides"]);
    for k in 0..3 {
        for head in ["seg", "edge"] {
            let r = read_raster(&sides.join(format!("val_000_side_{head}_{k}.ras"))).unwrap();
            assert_eq!(r.width(), 32 >> k);
        }
    }
    assert!(!sides.join("val_000_side_seg_3.ras").exists());

    let erf = tmp.path().join("erf");
    ok(&["erf", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&erf), "--samples", "3", "--center", "10,20"]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(erf.join("erf.json")).unwrap()).unwrap();
    assert_eq!(summary["nonzero_outside_rf"], 0);
    assert_eq!(summary["center"], serde_json::json!([10, 20]));
    assert!(erf.join("erf.pgm").exists() && erf.join("attention.json").exists());
    assert_eq!(read_raster(&erf.join("erf.ras")).unwrap().height(), 32);
    assert_eq!(code(&["erf", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&erf), "--center", "40,1"]), 2);
}

#[test]
fn perfect_prediction_stub_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["generate", "--config", p(&cfg), "--out", p(&data)]);
    let stub = tmp.path().join("stub");
    fs::create_dir_all(&stub).unwrap();
    let manifest = Manifest::read(&data).unwrap();
    for e in manifest.scenes.iter().filter(|e| e.id.starts_with("val")) {
        for (role, src) in [("seg", &e.mask), ("edge", &e.edge)] {
            let m = read_mask(&data.join(src)).unwrap();
            let r = Raster::new(1, m.height(), m.width(), m.to_f32()).unwrap();
            write_raster(&stub.join(format!("{}_{role}.ras", e.id)), &r).unwrap();
        }
    }
    let csv = tmp.path().join("perfect.csv");
    ok(&["eval", "--predictions", p(&stub), "--data", p(&data), "--csv", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..6], ["100.0000", "100.0000", "0.0000", "0.0000", "100.0000", "100.0000"]);
}

#[test]
fn diverging_training_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["generate", "--config", p(&cfg_path), "--out", p(&data)]);

    let mut cfg = ExperimentConfig::load(&cfg_path).unwrap();
    cfg.train.lr = 1e30;
    let wild = tmp.path().join("wild.json");
    fs::write(&wild, cfg.to_json()).unwrap();
    let ckpt = tmp.path().join("nan.hedu");
    let out = hedunet(&["train", "--config", p(&wild), "--data", p(&data), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(!ckpt.exists());

    let sar_path = data.join("train/train_001_sar.ras");
    let mut sar = read_raster(&sar_path).unwrap();
    sar.data_mut()[5] = f32::NAN;
    write_raster(&sar_path, &sar).unwrap();
    let out = hedunet(&["train", "--config", p(&cfg_path), "--data", p(&data), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("training tile 1 contains non-finite values"));
}

#[test]
fn baselines_and_single_cell_ablation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["generate", "--config", p(&cfg), "--out", p(&data)]);
    for kind in ["gmm", "sobel"] {
        let csv = tmp.path().join(format!("{kind}.csv"));
        ok(&["baseline", kind, "--data", p(&data), "--csv", p(&csv), "--jobs", "2"]);
        assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 2);
    }

    let matrix = tmp.path().join("matrix.json");
    fs::write(&matrix, r#"{"deep_supervision": [true], "levels": [3], "merging": ["Attention"], "dem": [false]}"#).unwrap();
    let out = tmp.path().join("ablate");
    ok(&["ablate", "--config", p(&cfg), "--matrix", p(&matrix), "--out", p(&out)]);
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "Data,Deep Sup.,Levels,Merging,Accuracy,mIoU,Deviation,F1 ODS,F1 OIS");
    assert_eq!(table.lines().count(), 2);

    // One cell is the same run as train followed by eval.
    let ckpt = tmp.path().join("m.hedu");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]);
    let csv = tmp.path().join("eval.csv");
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--config", p(&cfg), "--csv", p(&csv)]);
    let eval_row = fs::read_to_string(&csv).unwrap().lines().nth(1).unwrap().to_string();
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert!(runs.lines().nth(1).unwrap().ends_with(&eval_row), "{runs}\n{eval_row}");

    fs::write(&matrix, r#"{"levels": []}"#).unwrap();
    assert_eq!(code(&["ablate", "--config", p(&cfg), "--matrix", p(&matrix), "--out", p(&out)]), 2);
}
