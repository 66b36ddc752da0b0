//! End-to-end runs of the `unmix-ldvae` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ldvae_t::data::{load_bundles, load_cube, save_cube, HsiCube, SceneConfig};
use ldvae_t::model::{Ldvae, ModelConfig};
use ldvae_t::train::{AdamState, TrainState};

const CONFIG: &str = r#"{
  "scene": {"height": 12, "width": 12, "seg_len": 8},
  "train": {
    "batch_size": 32,
    "ppi_skewers": 500,
    "model": {"patch": 3, "d_model": 8, "layers": 1, "heads": 2, "ff_dim": 8, "decoder_hidden": 8}
  }
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unmix-ldvae"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    serde_json::from_str::<serde_json::Value>(&stdout).expect("effective config echoed as JSON");
    out
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    serde_json::from_str(err.trim_end()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, CONFIG).unwrap();
    p
}

fn read_f32_bsq(stem: &Path) -> (serde_json::Value, Vec<f32>) {
    let header: serde_json::Value = serde_json::from_str(&fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
    let bytes = fs::read(stem.with_extension("bsq")).unwrap();
    let vals = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    (header, vals)
}

/// Pixel-major rows from a band-sequential payload.
fn pixel_rows(vals: &[f32], px: usize, k: usize) -> Vec<Vec<f64>> {
    (0..px).map(|p| (0..k).map(|b| vals[b * px + p] as f64).collect()).collect()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["synth", "--config", s(&cfg), "--seed", "3", "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--seed", "3", "--out", s(&b)]);
    ok(&["synth", "--config", s(&cfg), "--seed", "4", "--out", s(&c)]);
    for f in ["scene.bsq", "scene_abundances.bsq", "scene_bundles.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("scene.bsq")).unwrap(), fs::read(c.join("scene.bsq")).unwrap());
    let cube = load_cube(&a.join("scene.bsq")).unwrap();
    assert_eq!((cube.height, cube.width, cube.bands), (12, 12, 48));
    assert!(cube.gt_abundances.is_some() && cube.gt_bundles.is_some());
}

#[test]
fn invalid_scene_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"scene": {"noise_sigma": -0.1}}"#).unwrap();
    let v = error_json(&run(&["synth", "--config", s(&cfg), "--out", s(dir.path())]));
    assert!(v["message"].as_str().unwrap().contains("noise_sigma"), "{v}");
}

#[test]
fn usage_errors_are_json() {
    let v = error_json(&run(&["train", "--bogus"]));
    assert_eq!(v["error"], "usage");
}

#[test]
fn training_needs_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("d");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    fs::remove_file(data.join("scene_abundances.json")).unwrap();
    fs::remove_file(data.join("scene_abundances.bsq")).unwrap();
    let out = run(&["train", "--config", s(&cfg), "--data", s(&data.join("scene")), "--out", s(&dir.path().join("r")), "--epochs", "1"]);
    let v = error_json(&out);
    assert!(v["message"].as_str().unwrap().contains("ground-truth"), "{v}");
}

#[test]
fn synth_train_eval_unmix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let scene = data.join("scene.bsq");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&scene), "--out", s(&run_dir), "--epochs", "5"]);
    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let ckpt = run_dir.join("model.ckpt");
    ok(&["train", "--config", s(&cfg), "--data", s(&scene), "--out", s(&run_dir), "--epochs", "7", "--resume", s(&ckpt)]);
    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    let epochs: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["0", "1", "2", "3", "4", "5", "6"]);

    let ev = dir.path().join("eval");
    ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&scene), "--out", s(&ev)]);
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3][0], "average");
    for c in 1..=2 {
        let v: Vec<f64> = rows.iter().map(|r| r[c].parse().unwrap()).collect();
        assert!((v[3] - (v[0] + v[1] + v[2]) / 3.0).abs() < 1e-12);
    }
    let (header, vals) = read_f32_bsq(&ev.join("abundances"));
    assert_eq!((header["height"].as_u64(), header["bands"].as_u64()), (Some(12), Some(3)));
    assert_eq!(vals.len(), 12 * 12 * 3);
    assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    let eval_rows = pixel_rows(&vals, 144, 3);
    assert!(eval_rows.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-6));
    let spectra = fs::read_to_string(ev.join("spectra.csv")).unwrap();
    assert_eq!(spectra.lines().count(), 49);
    assert_eq!(spectra.lines().next().unwrap().split(',').count(), 7);

    let um = dir.path().join("unmix");
    ok(&["unmix", "--checkpoint", s(&ckpt), "--data", s(&scene), "--out", s(&um)]);
    let (_, vals) = read_f32_bsq(&um.join("abundances"));
    let unmix_rows = pixel_rows(&vals, 144, 3);
    assert!(unmix_rows.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-6));
    // same predictions as eval, up to the ground-truth reordering
    let mut eval_sorted: Vec<f64> = eval_rows.concat();
    let mut unmix_sorted: Vec<f64> = unmix_rows.concat();
    eval_sorted.sort_by(f64::total_cmp);
    unmix_sorted.sort_by(f64::total_cmp);
    assert_eq!(eval_sorted, unmix_sorted);
    let bundles = load_bundles(&um.join("bundles.json")).unwrap();
    assert_eq!((bundles.len(), bundles.bands(), bundles.seg_len), (3, 48, 8));
}

/// A scene whose pixels all share one abundance vector, and a checkpoint
/// that outputs exactly that vector and the true means.
#[test]
fn oracle_checkpoint_scores_zero() {
    let scene = SceneConfig {
        height: 6,
        width: 6,
        ..SceneConfig::default()
    };
    let gt = scene.bundles().unwrap();
    let z0 = [0.2, 0.3, 0.5];
    let px = 36;
    let spectrum: Vec<f64> = (0..48).map(|b| (0..3).map(|k| z0[k] * gt.endmembers[k].mean[b]).sum()).collect();
    let cube = HsiCube::new(6, 6, 48, spectrum.repeat(px))
        .unwrap()
        .with_abundances(z0.repeat(px))
        .unwrap()
        .with_bundles(gt.clone())
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_cube(&dir.path().join("flat"), &cube).unwrap();

    let cfg = ModelConfig {
        patch: 1,
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_dim: 8,
        decoder_hidden: 8,
        ..ModelConfig::default()
    };
    let mut model = Ldvae::new(cfg, 0).unwrap();
    model.init_from_bundles(&gt).unwrap();
    model.params.get_mut("dec.mlp1.w2").unwrap().data_mut().fill(0.0);
    model.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
    let softplus_inv = |y: f64| y + (-(-y).exp_m1()).ln();
    let head_b: Vec<f64> = z0.iter().map(|z| softplus_inv(1000.0 * z)).collect();
    model.params.get_mut("head.b").unwrap().data_mut().copy_from_slice(&head_b);
    let ckpt = dir.path().join("oracle.ckpt");
    TrainState {
        model,
        adam: AdamState::default(),
        epoch: 0,
        seed: 0,
    }
    .save(&ckpt)
    .unwrap();

    let ev = dir.path().join("eval");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&dir.path().join("flat")), "--out", s(&ev)]);
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        for v in line.split(',').skip(1) {
            assert!(v.parse::<f64>().unwrap() < 1e-6, "{line}");
        }
    }
}
