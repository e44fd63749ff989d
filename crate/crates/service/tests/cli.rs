use std::path::Path;
use std::process::Command;

use cxr_core::bundle::{load_bundle, save_bundle};
use cxr_core::dataset::{load_manifest, resolve_paths};
use cxr_core::evaluation::{strict_system_accuracy, LabeledTriple};
use cxr_core::imaging::{encode_pgm, GrayImage};
use cxr_core::pipeline::predict_pipeline;
use cxr_core::{Abnormality, MasterText};
use cxr_service::cli::run;
use cxr_service::fixture::{fixture_bundle, fixture_image};

fn cxr(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("cxr").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_errors_reference_values() {
    let (code, out, _) = cxr(&["analyze-errors", "--acc", "0.52,0.80,0.40"]);
    assert_eq!(code, 0);
    assert!(out.contains("0.1664"), "{out}");
    assert!(out.contains("0.8336"), "{out}");

    let (code, out, _) = cxr(&["analyze-errors", "--acc", "0.52,0.80,0.40", "--simulate", "200000", "--json"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let sim = v["simulation"]["p_joint_correct"].as_f64().unwrap();
    assert!((sim - 0.1664).abs() < 0.01);
}

#[test]
fn usage_and_domain_errors() {
    let (code, _, err) = cxr(&["frobnicate"]);
    assert_eq!(code, 2);
    assert!(err.contains("Usage"));
    assert!(err.contains("analyze-errors"));
    let (code, _, err) = cxr(&["predict", "--bundle", "x", "--imagee", "y"]);
    assert_eq!(code, 2);
    assert!(err.contains("--image"), "{err}");
    let (code, _, _) = cxr(&["analyze-errors", "--acc", "0.5,0.5,1.5"]);
    assert_eq!(code, 1);
    let (code, out, _) = cxr(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("serve"));
}

#[test]
fn binary_exit_codes_and_bundle_env() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("fixture.cxrm");
    let image = dir.path().join("fixture.pgm");
    save_bundle(&fixture_bundle(), &bundle).unwrap();
    std::fs::write(&image, fixture_image()).unwrap();

    let bin = env!("CARGO_BIN_EXE_cxr");
    let out = Command::new(bin).args(["predict", "--image", s(&image)]).env("CXR_BUNDLE", &bundle).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let expected = format!(
        "Result code: 100\n{}\n",
        cxr_core::reportgen::generate_report("100".parse().unwrap(), &MasterText::default()).text()
    );
    assert_eq!(String::from_utf8(out.stdout).unwrap(), expected);

    let out = Command::new(bin).arg("nonsense").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(bin).args(["predict", "--bundle", "/nonexistent", "--image", s(&image)]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn predict_json_matches_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b.cxrm");
    let image = dir.path().join("i.pgm");
    save_bundle(&fixture_bundle(), &bundle).unwrap();
    std::fs::write(&image, fixture_image()).unwrap();
    let (code, out, _) = cxr(&["predict", "--bundle", s(&bundle), "--image", s(&image), "--json"]);
    assert_eq!(code, 0);
    let got: serde_json::Value = serde_json::from_str(&out).unwrap();
    let want = serde_json::to_value(predict_pipeline(&fixture_bundle(), &fixture_image()).unwrap()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn preprocess_dumps_segments() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("i.pgm");
    std::fs::write(&image, fixture_image()).unwrap();
    let dump = dir.path().join("dump");
    let (code, out, _) = cxr(&["preprocess", "--image", s(&image), "--dump-segments", s(&dump)]);
    assert_eq!(code, 0);
    assert!(out.contains("full 128x128"));
    assert!(out.contains("segment III 128x64 rows 32..96"));
    for f in ["full.pgm", "seg1.pgm", "seg2.pgm", "seg3.pgm"] {
        assert!(dump.join(f).is_file(), "{f}");
    }
}

/// Writes `n` small radiographs and an NIH-style label file.
fn write_corpus(root: &Path, n: usize) {
    let images = root.join("images");
    std::fs::create_dir_all(&images).unwrap();
    let mut labels = String::from("Image Index,Finding Labels,Follow-up #\n");
    for i in 0..n {
        let name = format!("{i:05}.pgm");
        let bright = i % 2 == 0;
        let img = GrayImage::from_fn(96, 96, |x, y| {
            let base = ((x * 7 + y * 3 + i) % 23) as f64 / 46.0;
            if bright && y > 48 && (30..66).contains(&x) {
                0.95
            } else {
                base
            }
        });
        std::fs::write(images.join(&name), encode_pgm(&img)).unwrap();
        let findings = match i % 4 {
            0 => "Cardiomegaly|Effusion",
            1 => "No Finding",
            2 => "Cardiomegaly|Consolidation",
            _ => "Infiltration|Effusion|Consolidation",
        };
        labels.push_str(&format!("{name},{findings},0\n"));
    }
    std::fs::write(root.join("labels.csv"), labels).unwrap();
}

#[test]
fn dataset_train_evaluate_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_corpus(root, 24);
    std::fs::write(root.join("exclude.txt"), "# rejected on review\n00023.pgm\nmissing.pgm\n").unwrap();
    let bundle = root.join("models.cxrm");
    let (labels, images, exclude) = (root.join("labels.csv"), root.join("images"), root.join("exclude.txt"));

    for abn in Abnormality::ALL {
        let out_dir = root.join(abn.as_str());
        let args = [
            "dataset", "build", "--nih-csv", s(&labels), "--image-root", s(&images),
            "--exclude", s(&exclude), "--abnormality", abn.as_str(), "--n-pos", "8", "--n-neg", "8",
            "--seed", "5", "--split", "0.75", "--out", s(&out_dir),
        ];
        let (code, out, err) = cxr(&args);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("train 12, test 4"), "{out}");
        assert!(err.contains("missing.pgm"), "{err}");
        let first = std::fs::read(out_dir.join("train.csv")).unwrap();
        assert_eq!(cxr(&args).0, 0);
        assert_eq!(std::fs::read(out_dir.join("train.csv")).unwrap(), first, "dataset build is reproducible");

        let (code, out, err) = cxr(&[
            "train", "--train", s(&out_dir.join("train.csv")), "--test", s(&out_dir.join("test.csv")),
            "--abnormality", abn.as_str(), "--bundle", s(&bundle), "--epochs", "2", "--batch-size", "4",
        ]);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("epoch   2"), "{out}");
    }
    let loaded = load_bundle(&bundle).unwrap();
    assert!(loaded.is_complete());
    assert!(loaded.models().iter().all(|m| m.config.map(|c| c.epochs) == Some(2)));

    // System evaluation over a native manifest with relative paths.
    let mut manifest = String::from("image_id,path,cardiomegaly,effusion,consolidation\n");
    for i in 0..12 {
        manifest.push_str(&format!("{i:05}.pgm,images/{i:05}.pgm,{},{},{}\n", u8::from(i % 4 != 1 && i % 4 != 3), u8::from(i % 4 == 0 || i % 4 == 3), u8::from(i % 4 >= 2)));
    }
    std::fs::write(root.join("system.csv"), &manifest).unwrap();
    let (code, out, err) = cxr(&["evaluate", "--bundle", s(&bundle), "--manifest", s(&root.join("system.csv")), "--system"]);
    assert_eq!(code, 0, "{err}");

    let mut records = load_manifest(&manifest).unwrap();
    resolve_paths(&mut records, root);
    let preds: Vec<LabeledTriple> = records
        .iter()
        .map(|r| predict_pipeline(&loaded, &std::fs::read(&r.path).unwrap()).unwrap().labels())
        .collect();
    let truths: Vec<LabeledTriple> = records.iter().map(|r| r.labels).collect();
    let strict = strict_system_accuracy(&preds, &truths).unwrap();
    assert!(out.contains(&format!("strict          {strict}")), "{out}\nexpected {strict}");
    assert!(out.contains("P(all correct)"));

    let (code, out, _) = cxr(&[
        "evaluate", "--bundle", s(&bundle), "--manifest", s(&root.join("system.csv")), "--abnormality", "effusion",
    ]);
    assert_eq!(code, 0);
    assert!(out.starts_with("effusion accuracy "));
}

#[test]
fn tune_writes_ofat_csv() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_corpus(root, 16);
    let out_dir = root.join("ds");
    let (code, _, err) = cxr(&[
        "dataset", "build", "--nih-csv", s(&root.join("labels.csv")), "--image-root", s(&root.join("images")),
        "--abnormality", "cardiomegaly", "--n-pos", "4", "--n-neg", "4", "--out", s(&out_dir),
    ]);
    assert_eq!(code, 0, "{err}");
    let csv_path = root.join("tune.csv");
    let (code, _, err) = cxr(&[
        "tune", "--train", s(&out_dir.join("train.csv")), "--test", s(&out_dir.join("test.csv")),
        "--abnormality", "cardiomegaly", "--epochs", "1", "--batch-size", "4", "--out", s(&csv_path),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(err.starts_with("selected: "));
    let csv = std::fs::read_to_string(csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "factor,candidate,train_acc,test_acc,winner");
    assert_eq!(lines.len(), 1 + 4 + 2 + 2);
    for factor in ["learning_rate", "optimizer", "width"] {
        let winners = lines.iter().filter(|l| l.starts_with(factor) && l.ends_with(",1")).count();
        assert_eq!(winners, 1, "{factor}");
    }
}
