use std::path::Path;
use std::process::{Command, Output};

use mmgs_core::rasterizer::read_float_image;

fn mmgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmgs"))
        .args(args)
        .env_remove("MMGS_SEED")
        .output()
        .expect("failed to start mmgs")
}

fn ok(args: &[&str]) -> Output {
    let out = mmgs(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_scene(dir: &Path) -> String {
    let scene = dir.join("scene");
    let s = scene.to_str().unwrap().to_string();
    ok(&["generate", "--out", &s, "--cameras", "2", "--frames", "1", "--humans", "1", "--res", "32", "32", "--seed", "3"]);
    s
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn untrained_model_renders_gray() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let ckpt = p(dir.path(), "init.ckpt");
    ok(&["train", "--scene", &scene, "--out", &ckpt, "--iters", "0"]);
    let (png, dump) = (p(dir.path(), "r.png"), p(dir.path(), "r.f32"));
    ok(&["render", "--scene", &scene, "--ckpt", &ckpt, "--camera", "1", "--out", &png, "--float-dump", &dump]);
    let (w, h, pixels) = read_float_image(Path::new(&dump)).unwrap();
    assert_eq!((w, h), (32, 32));
    assert!(pixels.iter().any(|&v| v > 0.0));
    for px in pixels.chunks(3) {
        assert!(px[0] == px[1] && px[1] == px[2], "{px:?}");
    }
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(format!("{png}.json")).unwrap()).unwrap();
    assert_eq!(meta["args"]["camera"], 1);
    assert!(std::fs::metadata(&png).unwrap().len() > 0);
}

#[test]
fn evaluation_is_repeatable_and_reads_do_not_touch_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let before = std::fs::read(Path::new(&scene).join("scene.json")).unwrap();
    let ckpt = p(dir.path(), "run.ckpt");
    let out = p(dir.path(), "metrics.json");
    let mut runs = Vec::new();
    for _ in 0..2 {
        ok(&["train", "--scene", &scene, "--out", &ckpt, "--iters", "5", "--seed", "4"]);
        ok(&["eval", "--scene", &scene, "--ckpt", &ckpt, "--cameras", "0,1", "--out", &out]);
        runs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
    let metrics: serde_json::Value = serde_json::from_slice(&runs[0]).unwrap();
    assert_eq!(metrics["per_view"].as_array().unwrap().len(), 2);
    assert_eq!(metrics["args"]["cameras"], serde_json::json!([0, 1]));
    assert_eq!(std::fs::read(Path::new(&scene).join("scene.json")).unwrap(), before);
    assert!(Path::new(&format!("{ckpt}.loss.csv")).exists());
}

#[test]
fn ablation_table_has_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let out = p(dir.path(), "table.json");
    ok(&["ablate", "--scene", &scene, "--out", &out, "--iters", "2", "--seed", "1"]);
    let table: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let names: Vec<&str> = table["entries"].as_array().unwrap().iter().map(|e| e["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "no_fusion", "no_interaction", "none"]);
    assert_eq!(table["eval_cameras"], serde_json::json!([1]));
    assert_eq!(table["args"]["iters"], 2);
}

#[test]
fn seed_comes_from_the_environment_when_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "s");
    let status = Command::new(env!("CARGO_BIN_EXE_mmgs"))
        .args(["generate", "--out", &out, "--cameras", "1", "--frames", "1", "--res", "32", "32", "--seed", "3"])
        .env("MMGS_SEED", "11")
        .output()
        .unwrap();
    assert!(status.status.success());
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("s/generate.json")).unwrap()).unwrap();
    assert_eq!(meta["args"]["seed"], 11);
}

#[test]
fn usage_errors_and_runtime_errors_exit_differently() {
    let out = mmgs(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    let missing = p(dir.path(), "nowhere");
    let out = mmgs(&["train", "--scene", &missing, "--out", &p(dir.path(), "x.ckpt")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn help_lists_defaults() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["--iters", "[default: 2000]", "--lambda-l1", "[default: 0.8]", "--threads", "--variant"] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
    for sub in ["generate", "render", "eval", "ablate"] {
        let out = ok(&[sub, "--help"]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("--out"));
    }
}
