use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scalodeck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalodeck"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = scalodeck(args);
    assert!(
        out.status.success(),
        "{:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

const SMALL: [&str; 6] = ["--synth", "--subjects", "3", "--sensors", "8", "--window"];

#[test]
fn unknown_model_is_a_usage_error() {
    let out = scalodeck(&[
        "run", "--task", "isp-vs-silence", "--window", "full", "--protocol", "sap", "--model", "vgg16", "--synth",
        "--out", "x",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vgg16"));
}

#[test]
fn run_is_deterministic_and_report_tolerates_junk() {
    let dir = tempfile::tempdir().unwrap();
    let mut digests = Vec::new();
    for rep in ["a", "b"] {
        let out = dir.path().join(rep);
        let mut args = vec!["run", "--task", "isp-vs-silence", "--protocol", "sap", "--model", "lda"];
        args.extend(SMALL);
        args.extend(["pre-cue", "--n-perm", "100", "--n-boot", "100", "--out", out.to_str().unwrap()]);
        let stdout = ok(&args);
        assert!(stdout.contains(" ± "));
        let cell = out.join("isp-vs-silence_pre-cue_sap_lda_s0");
        for f in ["result.json", "manifest.json", "run.log"] {
            assert!(cell.join(f).exists(), "{} missing", f);
        }
        digests.push(json(&cell.join("manifest.json"))["metrics_digest"].clone());
    }
    assert_eq!(digests[0], digests[1]);

    fs::write(dir.path().join("a").join("result_junk.json"), b"[1, 2").unwrap();
    let reports = dir.path().join("report");
    let stdout = ok(&[
        "report",
        "--results",
        dir.path().join("a").to_str().unwrap(),
        "--out",
        reports.to_str().unwrap(),
    ]);
    assert!(stdout.contains("Task isp-vs-silence"));
    for f in ["report.txt", "report.csv", "folds.csv", "report.json"] {
        assert!(reports.join(f).exists(), "{} missing", f);
    }
    assert_eq!(json(&reports.join("report.json"))["warnings"].as_array().unwrap().len(), 0);
}

#[test]
fn report_without_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = scalodeck(&["report", "--results", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn staged_pipeline_writes_archives() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let epochs = dir.path().join("epochs");
    ok(&["synth", "--subjects", "2", "--sensors", "4", "--seed", "3", "--out", raw.to_str().unwrap()]);
    assert!(raw.join("subject_00.fta").exists());
    assert_eq!(json(&raw.join("dataset.json"))["recordings"].as_array().unwrap().len(), 2);

    let stdout = ok(&[
        "preprocess",
        "--data",
        raw.to_str().unwrap(),
        "--window",
        "pre-cue",
        "--out",
        epochs.to_str().unwrap(),
    ]);
    assert!(stdout.starts_with("pre-cue:"));
    let manifest = json(&epochs.join("epochs_pre-cue.json"));
    let n = manifest["epochs"].as_array().unwrap().len();
    assert!(n > 0);

    let tfr = dir.path().join("tfr").join("pre-cue.fta");
    let stdout = ok(&[
        "tfr",
        "--epochs",
        epochs.join("epochs_pre-cue.fta").to_str().unwrap(),
        "--out",
        tfr.to_str().unwrap(),
    ]);
    assert!(stdout.contains(&format!("wrote {} scalograms", n)));
    let side = json(&tfr.with_extension("json"));
    assert_eq!(side["frequencies"].as_array().unwrap().len(), 96);

    // A run over the written dataset sees the same raw digest.
    let out = dir.path().join("runs");
    ok(&[
        "run", "--task", "isp-vs-sr", "--window", "pre-cue", "--protocol", "loso", "--model", "riemannian", "--data",
        raw.to_str().unwrap(), "--n-perm", "100", "--n-boot", "100", "--out", out.to_str().unwrap(),
    ]);
    let result = json(&out.join("isp-vs-sr_pre-cue_loso_riemannian_s0").join("result.json"));
    assert_eq!(result["dataset_digest"], json(&raw.join("dataset.json"))["dataset_digest"]);
}

#[test]
fn missing_weight_archive_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.fta");
    let mut args = vec!["ablate", "--task", "isp-vs-silence", "--weights", missing.to_str().unwrap()];
    args.extend(&SMALL[..5]);
    args.extend(["--out", dir.path().to_str().unwrap()]);
    let out = scalodeck(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.fta"));
}

#[test]
fn resnet_smoke_run_writes_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "run", "--task", "isp-vs-silence", "--protocol", "sap", "--model", "resnet18", "--init", "random-init",
        "--subjects", "2", "--sensors", "4", "--synth", "--window", "pre-cue", "--epochs", "1", "--sap-folds", "2",
        "--image-size", "16", "--n-perm", "100", "--n-boot", "100",
    ];
    args.extend(["--out", dir.path().to_str().unwrap()]);
    let stdout = ok(&args);
    assert!(stdout.contains("resnet18 (conv, random, partial)"));
    let cell = dir.path().join("isp-vs-silence_pre-cue_sap_resnet18_conv_random-init_partial-ft_s0");
    for f in ["fold_00.fta", "fold_01.fta", "fold_00.json", "result.json"] {
        assert!(cell.join(f).exists(), "{} missing", f);
    }
    let result = json(&cell.join("result.json"));
    assert_eq!(result["archive_reads"], 0);
    assert_eq!(result["schema"], 1);
}
