use std::path::Path;
use std::process::{Command, Output};

use facevis::annotation::Annotation;
use facevis::model::load_model;
use facevis::render::read_pgm;

fn facevis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facevis"))
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = facevis(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_model_is_loadable_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    ok(&["gen-model", "--seed", "3", "--out", s(&a)]);
    ok(&["gen-model", "--seed", "3", "--out", s(&b)]);
    let model = load_model(&a).unwrap();
    model.validate().unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let out = facevis(&["gen-model", "--vertices", "10", "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn frontal_render_is_symmetric_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    ok(&["gen-model", "--out", s(&model)]);
    let img = dir.path().join("v.pgm");
    ok(&["render", "--model", s(&model), "--size", "48", "--out", s(&img)]);
    let (w, h, bytes) = read_pgm(&img).unwrap();
    assert_eq!((w, h), (48, 48));
    assert!(dir.path().join("v.range.txt").exists());
    for v in 0..h {
        for u in 0..w / 2 {
            let (a, b) = (bytes[v * w + u] as f64, bytes[v * w + w - 1 - u] as f64);
            assert!((a - b).abs() <= 0.02 * 255.0, "row {v} col {u}: {a} vs {b}");
        }
    }

    let plain = dir.path().join("plain.pgm");
    ok(&["render", "--model", s(&model), "--size", "48", "--mask", "none", "--out", s(&plain)]);
    assert_ne!(std::fs::read(&img).unwrap(), std::fs::read(&plain).unwrap());

    let png = dir.path().join("v.png");
    ok(&["render", "--model", s(&model), "--random", "--seed", "2", "--size", "40", "--out", s(&png)]);
    assert!(png.exists());
}

#[test]
fn gradcheck_reports_worst_index() {
    let out = ok(&["gradcheck", "--trials", "2", "--network-weights", "5"]);
    assert_eq!(out.lines().filter(|l| l.contains("PASS")).count(), 4);
    assert!(out.contains("index"));
    assert!(out.contains("over 2 trials"));
}

#[test]
fn fit_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--count", "6", "--size", "64", "--seed", "1", "--out-dir", s(&data)]);

    let out = ok(&["eval", "--data", s(&data)]);
    assert!(out.contains("nme: 0.000000"), "{out}");

    let fitted = dir.path().join("fitted");
    let csv = dir.path().join("fit.csv");
    ok(&[
        "fit", "--input", s(&data), "--out-dir", s(&fitted), "--csv", s(&csv), "--jitter", "3",
    ]);
    let rows: Vec<String> = std::fs::read_to_string(&csv).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        let nme: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(nme < 1.0, "{row}");
    }
    assert_eq!(std::fs::read_dir(&fitted).unwrap().count(), 6 * 4);
    let ann = Annotation::load(fitted.join("face_0000.json")).unwrap();
    assert!(ann.params.is_some());
    let out = ok(&["eval", "--data", s(&fitted)]);
    let nme: f64 = out.lines().find_map(|l| l.strip_prefix("nme: ")).unwrap().parse().unwrap();
    assert!(nme < 1.0);
}

#[test]
fn train_smoke_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        "validation_count = 4\n[dataset]\ncount = 8\n[network]\nvis_size = 8\nhidden = 16\n[training]\nbatch_size = 4\n",
    )
    .unwrap();
    let run = |name: &str| {
        let ckpt = dir.path().join(name);
        let metrics = dir.path().join(format!("{name}.csv"));
        ok(&[
            "train", "--config", s(&config), "--epochs", "1", "--seed", "7", "--out", s(&ckpt),
            "--metrics", s(&metrics),
        ]);
        (std::fs::read(&ckpt).unwrap(), std::fs::read_to_string(&metrics).unwrap())
    };
    let (a, ma) = run("a.json");
    let (b, mb) = run("b.json");
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    assert_eq!(ma.lines().count(), 1 + 3);

    let out = ok(&[
        "eval", "--checkpoint", s(&dir.path().join("a.json")), "--count", "4", "--seed", "9",
    ]);
    assert_eq!(out.lines().filter(|l| l.starts_with("block")).count(), 3);
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("c.json");
    let cases = [
        ("[training]\nlearnig_rate = 0.1\n", "learnig_rate"),
        ("[training]\nbatch_size = 0\n", "batch_size"),
        ("[network]\nn_blocks = 2\nloss_weights = [1.0]\n", "network.loss_weights"),
        ("[network]\nvis_size = 1\n", "vis_size"),
    ];
    for (text, key) in cases {
        let config = dir.path().join("bad.toml");
        std::fs::write(&config, text).unwrap();
        let out = facevis(&["train", "--config", s(&config), "--out", s(&out_path)]);
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(key), "expected {key} in {err}");
    }
    assert!(!out_path.exists());
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = facevis(&["fit", "--input", "/nonexistent/x.json", "--out-dir", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/x.json"));
    let out = facevis(&["eval"]);
    assert_eq!(out.status.code(), Some(2));
}
