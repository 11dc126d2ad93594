use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nerveseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerveseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nerveseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap_or_default()))
        .collect();
    files.sort();
    files
}

const SMALL: [&str; 10] = [
    "--override",
    "base_width=8",
    "--override",
    "image_size=48",
    "--override",
    "epochs=1",
    "--override",
    "augment=false",
    "--override",
    "folds=2",
];

#[test]
fn synth_is_deterministic_and_rejects_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = ok(&["synth", "--n", "5", "--size", "64", "--seed", "3", "--out", p(d)]);
        assert!(out.contains("5 samples"), "{out}");
    }
    for sub in ["jet", "rgb", "masks"] {
        assert_eq!(dir_bytes(&a.join(sub)).len(), 5);
        assert_eq!(dir_bytes(&a.join(sub)), dir_bytes(&b.join(sub)));
    }
    assert_eq!(fs::read(a.join("labels.csv")).unwrap(), fs::read(b.join("labels.csv")).unwrap());
    let zero = nerveseg(&["synth", "--n", "0", "--out", p(&tmp.path().join("z"))]);
    assert!(!zero.status.success());
    assert!(!tmp.path().join("z").exists());
}

#[test]
fn config_errors_are_listed_together() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nerveseg(&[
        "train",
        "--data",
        p(tmp.path()),
        "--override",
        "bogus=1",
        "--override",
        "lr_factor=7",
        "--output-dir",
        p(&tmp.path().join("o")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus") && err.contains("lr_factor"), "{err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn missing_dataset_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = nerveseg(&["train", "--data", p(&missing), "--output-dir", p(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&missing)));
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    ok(&["synth", "--n", "6", "--size", "64", "--seed", "4", "--out", p(&data)]);
    let before = dir_bytes(&data.join("jet"));

    let mut args = vec!["train", "--data", p(&data), "--output-dir", p(&out)];
    args.extend(SMALL);
    let table = ok(&args);
    for col in ["Accuracy", "Sensitivity", "Specificity", "Precision", "Balanced Accuracy", "F2", "Dice"] {
        assert!(table.contains(col), "missing column {col}: {table}");
    }
    let ckpt = out.join("runs/fold_0/best.safetensors");
    assert!(ckpt.is_file());

    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--output-dir", p(&out)]);
    let per_image = fs::read_to_string(out.join("reports/per_image.csv")).unwrap();
    assert_eq!(per_image.lines().count(), 7, "{per_image}");
    assert!(out.join("reports/summary.json").is_file());

    let mismatch = nerveseg(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--output-dir",
        p(&out),
        "--override",
        "architecture=DXM_TRANSFUSE",
    ]);
    assert!(!mismatch.status.success());
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("architecture"));

    ok(&["predict", "--checkpoint", p(&ckpt), "--data", p(&data), "--output-dir", p(&out)]);
    let masks = dir_bytes(&out.join("predictions/masks"));
    assert_eq!(masks.len(), 6);
    assert_eq!(dir_bytes(&out.join("predictions/overlays")).len(), 6);
    for (name, _) in &masks {
        let mask = image::open(out.join("predictions/masks").join(name)).unwrap().to_luma8();
        assert_eq!(mask.dimensions(), (48, 48));
        assert!(mask.pixels().all(|v| v.0[0] == 0 || v.0[0] == 255));
        let id = name.trim_end_matches(".png");
        let sidecar: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("predictions").join(format!("{id}.json"))).unwrap())
                .unwrap();
        let dice = sidecar["dice"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&dice));
        if sidecar["predicted_pixels"] == 0 && sidecar["truth_pixels"] == 0 {
            assert_eq!(dice, 1.0);
        }
        assert!(["TP", "TN", "FP", "FN"].contains(&sidecar["outcome"].as_str().unwrap()));
    }
    assert_eq!(before, dir_bytes(&data.join("jet")), "input dataset was modified");
}

#[test]
fn crossval_writes_every_fold_and_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    ok(&["synth", "--n", "6", "--size", "64", "--out", p(&data)]);
    let mut args = vec!["crossval", "--data", p(&data), "--output-dir", p(&out)];
    args.extend(SMALL);
    args.extend(["--override", "architecture=DUAL_UNET"]);
    let table = ok(&args);
    assert!(table.contains("Dual U-Net") || table.contains("DUAL"), "{table}");
    for k in 0..2 {
        assert!(out.join(format!("runs/fold_{k}/record.json")).is_file());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("reports/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["folds"], 2);
    assert_eq!(summary["architecture"], "DUAL_UNET");
}

#[test]
fn benchmark_reports_every_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&[
        "benchmark",
        "--warmup",
        "1",
        "--runs",
        "2",
        "--override",
        "base_width=8",
        "--override",
        "image_size=48",
        "--output-dir",
        p(tmp.path()),
    ]);
    assert_eq!(out.lines().count(), 7, "{out}");
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("reports/benchmark.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 6);
    assert!(rows.as_array().unwrap().iter().all(|r| r["parameters"].as_u64().unwrap() > 0));
}
