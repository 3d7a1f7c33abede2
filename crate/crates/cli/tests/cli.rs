use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mdir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdir"))
        .args(args)
        .env("MDIR_THREADS", "1")
        .output()
        .expect("spawn mdir")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn forge(dir: &Path, level: &str, seed: u64) -> (PathBuf, PathBuf) {
    let out = mdir(&[
        "forge",
        "--arch",
        "small",
        "--level",
        level,
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (dir.join("base.safetensors"), dir.join("derived.safetensors"))
}

fn compare(a: &Path, b: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["compare", "--model-a", a.to_str().unwrap(), "--model-b", b.to_str().unwrap()];
    args.extend_from_slice(extra);
    mdir(&args)
}

#[test]
fn self_compare_is_related() {
    let dir = tempfile::tempdir().unwrap();
    let (base, _) = forge(dir.path(), "l1", 3);
    let report = dir.path().join("report.json");
    let out = compare(&base, &base, &["--out", report.to_str().unwrap()]);
    assert_eq!(code(&out), 10);
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(report).unwrap()).unwrap();
    assert_eq!(doc["related"], true);
    assert_eq!(doc["schemaVersion"], 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("related: true"));
}

#[test]
fn independent_models_are_unrelated() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (a, _) = forge(d1.path(), "l1", 1);
    let (b, _) = forge(d2.path(), "l1", 2);
    let out = compare(&a, &b, &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["related"], false);
}

#[test]
fn missing_model_b_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (base, _) = forge(dir.path(), "l1", 3);
    let out = mdir(&["compare", "--model-a", base.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--model-b"));
}

#[test]
fn unreadable_model_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.safetensors");
    let out = compare(&missing, &missing, &[]);
    assert_eq!(code(&out), 1);
}

#[test]
fn bad_threshold_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (base, _) = forge(dir.path(), "l1", 3);
    assert_eq!(code(&compare(&base, &base, &["--threshold", "1.5"])), 2);
}

#[test]
fn mc_validate_reports_rate_ratio() {
    let out = mdir(&["mc-validate", "--m", "8", "--r", "0.15", "--samples", "100000", "--seed", "7"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["rate_ratio"].as_f64().unwrap() > 0.0);
    assert_eq!(v["m"], 8);
    assert_eq!(v["sample_count"], 100000);
    assert!(v["ks_p_value"].as_f64().is_some());
}

#[test]
fn mc_validate_density_check() {
    let out = mdir(&["mc-validate", "--m", "4", "--r", "0.1", "--samples", "1000", "--seed", "1", "--density-check"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["density"]["sup_deviation"].as_f64().unwrap().is_finite());
}

#[test]
fn mc_validate_rejects_out_of_range_arguments() {
    assert_eq!(code(&mdir(&["mc-validate", "--m", "8", "--r", "0.6", "--samples", "1000", "--seed", "1"])), 2);
    assert_eq!(code(&mdir(&["mc-validate", "--m", "8", "--r", "0.15", "--samples", "10", "--seed", "1"])), 2);
    assert_eq!(code(&mdir(&["mc-validate", "--m", "0", "--r", "0.15", "--samples", "1000", "--seed", "1"])), 2);
}

#[test]
fn forge_is_deterministic() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    forge(d1.path(), "l2", 1);
    forge(d2.path(), "l2", 1);
    for name in ["base.safetensors", "derived.safetensors", "plan.json"] {
        let a = std::fs::read(d1.path().join(name)).unwrap();
        let b = std::fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn forge_rejects_oversized_pruning_target() {
    let dir = tempfile::tempdir().unwrap();
    let out = mdir(&["forge", "--arch", "small", "--level", "pruning", "--target", "65", "--seed", "1", "--out"]
        .into_iter()
        .chain([dir.path().to_str().unwrap()])
        .collect::<Vec<_>>());
    assert_eq!(code(&out), 2);
    assert_eq!(code(&mdir(&["forge", "--arch", "small", "--level", "l9", "--out", dir.path().to_str().unwrap()])), 2);
}

#[test]
fn level_ladder_is_detected() {
    for level in ["l1", "l2", "l3", "l4", "l5", "pruning:32"] {
        let dir = tempfile::tempdir().unwrap();
        let (base, derived) = forge(dir.path(), level, 5);
        let out = compare(&base, &derived, &[]);
        assert_eq!(code(&out), 10, "{level}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn heatmaps_and_vocabularies() {
    let dir = tempfile::tempdir().unwrap();
    let (base, derived) = forge(dir.path(), "l2", 9);
    let tokens: serde_json::Map<String, serde_json::Value> =
        (0..512).map(|i| (format!("tok{i}"), serde_json::json!(i))).collect();
    let vocab = dir.path().join("vocab.json");
    std::fs::write(&vocab, serde_json::Value::Object(tokens).to_string()).unwrap();
    let maps = dir.path().join("maps");
    let v = vocab.to_str().unwrap();
    let out = compare(
        &base,
        &derived,
        &["--vocab-a", v, "--vocab-b", v, "--heatmaps", maps.to_str().unwrap(), "--layers", "0"],
    );
    assert_eq!(code(&out), 10, "{}", String::from_utf8_lossy(&out.stderr));
    let ppm = std::fs::read(maps.join("embedding.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
    let red = ppm[13..].chunks(3).filter(|p| p == &[255, 0, 0]).count();
    assert_eq!(red, 64);
    assert!(maps.join("layer0_mlp.ppm").exists());
    assert!(!maps.join("layer1_mlp.ppm").exists());
}
