use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pap_core::checkpoint::Checkpoint;
use pap_core::classifier::{ClassifierArch, ClassifierModel};
use pap_core::dataset::Manifest;
use pap_core::imaging::read_image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn pap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pap"))
        .args(args)
        .env_remove("PAP_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path → contents for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn synth(n: usize, seed: u64) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = pap(&[
        "synth",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&pap(&["--help"])), 0);
    assert_eq!(code(&pap(&["frobnicate"])), 2);
    assert_eq!(code(&pap(&["synth"])), 2);
    assert_eq!(
        code(&pap(&[
            "cam",
            "--checkpoint",
            "x",
            "--image",
            "y",
            "--class",
            "weird",
            "--out",
            "z"
        ])),
        2
    );
}

#[test]
fn ingest_rejects_empty_tree() {
    let empty = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&pap(&[
            "ingest",
            "--data-root",
            s(empty.path()),
            "--out",
            s(out.path())
        ])),
        2
    );
    assert_eq!(
        code(&pap(&[
            "ingest",
            "--data-root",
            "/nonexistent/tree",
            "--out",
            s(out.path())
        ])),
        2
    );
}

#[test]
fn synth_is_reproducible_and_ingest_is_idempotent() {
    let a = synth(12, 7);
    let b = synth(12, 7);
    let c = synth(12, 8);
    let (sa, sb, sc) = (snapshot(a.path()), snapshot(b.path()), snapshot(c.path()));
    assert_eq!(sa, sb);
    assert_ne!(sa, sc);
    let manifest = Manifest::read(&a.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.counts.total, 12);
    assert_eq!(manifest.counts.normal + manifest.counts.abnormal, 12);
    assert_eq!(manifest.entries.len(), 12);

    let out1 = tempfile::tempdir().unwrap();
    let out2 = tempfile::tempdir().unwrap();
    for out in [&out1, &out1, &out2] {
        assert_eq!(
            code(&pap(&["ingest", "--data-root", s(a.path()), "--out", s(out.path())])),
            0
        );
    }
    assert_eq!(snapshot(out1.path()), snapshot(out2.path()));
    assert_eq!(snapshot(a.path()), sa, "ingest modified its input");
}

fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let arch = ClassifierArch {
        in_channels: 3,
        input_size: 32,
        filters: [4, 4, 8],
        dense_units: 8,
    };
    let model = ClassifierModel::<f32>::new(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let path = dir.join("classifier.ckpt");
    model.to_checkpoint().save(&path).unwrap();
    path
}

#[test]
fn cam_writes_heatmap_and_coarse_map() {
    let data = synth(2, 1);
    let work = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(work.path());
    let manifest = Manifest::read(&data.path().join("manifest.json")).unwrap();
    let image = data.path().join(&manifest.entries[0].relative_path);
    let out = work.path().join("cam");
    let before = snapshot(data.path());

    let missing = work.path().join("missing.ckpt");
    assert_eq!(
        code(&pap(&[
            "cam",
            "--checkpoint",
            s(&missing),
            "--image",
            s(&image),
            "--class",
            "normal",
            "--out",
            s(&out)
        ])),
        2
    );
    assert_eq!(
        code(&pap(&[
            "cam",
            "--checkpoint",
            s(&image),
            "--image",
            s(&image),
            "--class",
            "normal",
            "--out",
            s(&out)
        ])),
        2
    );

    let r = pap(&[
        "cam",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&image),
        "--class",
        "abnormal",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let stem = image.file_stem().unwrap().to_str().unwrap();
    let png = read_image(&out.join(format!("{stem}_abnormal.png"))).unwrap();
    assert_eq!((png.width(), png.height(), png.channels()), (32, 32, 1));
    let csv = std::fs::read_to_string(out.join(format!("{stem}_abnormal.csv"))).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(snapshot(data.path()), before);
    assert!(Checkpoint::load(&ckpt).is_ok());
}

const SMALL_RUN: &str = r#"{
    "k": 2,
    "epochs": 1,
    "batch_size": 8,
    "workers": 1,
    "cam_samples": 1,
    "unet": {"base_width": 2, "epochs": 1, "batch_size": 2, "max_train_samples": 4}
}"#;

#[test]
fn crossval_rejects_bad_config_before_training() {
    let data = synth(8, 2);
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("out");
    for (name, text) in [
        ("k1.json", r#"{"k": 1}"#),
        ("unknown.json", r#"{"kk": 3}"#),
        ("lr.json", r#"{"learning_rate": -1}"#),
        ("broken.json", "{"),
    ] {
        let cfg = work.path().join(name);
        std::fs::write(&cfg, text).unwrap();
        let r = pap(&[
            "crossval",
            "--config",
            s(&cfg),
            "--data-root",
            s(data.path()),
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&r), 2, "{name}");
        assert!(!out.exists(), "{name} created output");
    }
    let cfg = work.path().join("ok.json");
    std::fs::write(&cfg, SMALL_RUN).unwrap();
    assert_eq!(
        code(&pap(&["crossval", "--config", s(&cfg), "--out", s(&out)])),
        2,
        "no data root"
    );
    assert_eq!(code(&pap(&["report", "--input", s(work.path())])), 2);
}

#[test]
fn crossval_both_modes_then_report() {
    let data = synth(20, 3);
    let before = snapshot(data.path());
    let work = tempfile::tempdir().unwrap();
    let cfg = work.path().join("run.json");
    std::fs::write(&cfg, SMALL_RUN).unwrap();
    let out = work.path().join("out");
    let r = pap(&[
        "crossval",
        "--config",
        s(&cfg),
        "--data-root",
        s(data.path()),
        "--out",
        s(&out),
        "--mode",
        "both",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(snapshot(data.path()), before, "crossval modified its input");

    let comparison = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = comparison.lines().collect();
    assert_eq!(lines[0], "metric,pooled_delta_pp,averaged_delta_pp");
    let metrics: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(metrics, ["accuracy", "precision", "recall", "f1"]);
    for mode in ["raw", "segmented"] {
        for file in ["report.json", "confusion_pooled.csv", "epochs.csv", "metrics.csv"] {
            assert!(out.join(mode).join(file).is_file(), "{mode}/{file}");
        }
    }
    assert!(out.join("segmented/fold_0/masks").is_dir());
    let status = std::fs::read_to_string(out.join("status.json")).unwrap();
    assert!(status.contains("complete"), "{status}");

    // deleting the CSVs and re-rendering reproduces them exactly
    let rendered = snapshot(&out);
    for mode in ["raw", "segmented"] {
        for file in ["confusion_pooled.csv", "epochs.csv", "metrics.csv"] {
            std::fs::remove_file(out.join(mode).join(file)).unwrap();
        }
    }
    std::fs::remove_file(out.join("comparison.csv")).unwrap();
    assert_eq!(code(&pap(&["report", "--input", s(&out)])), 0);
    assert_eq!(snapshot(&out), rendered);
}
