use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn jexpand(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jexpand"))
        .args(args)
        .env("JEXPAND_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = jexpand(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    jexpand(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Desk config shrunk to 16x16 slices and tiny networks.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    ok(&["init-config", "--preset", "desk", "--model", "ours_drs", "--out", s(&path)]);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["model"]["generator"]["depth"] = 3.into();
    v["model"]["generator"]["base_channels"] = 4.into();
    v["model"]["generator"]["slice_size"] = 16.into();
    v["model"]["discriminator"]["num_layers"] = 1.into();
    v["model"]["discriminator"]["base_channels"] = 4.into();
    v["phantom"]["size"] = serde_json::json!([16, 16]);
    v["phantom"]["count"] = 20.into();
    v["phantom"]["test_count"] = 6.into();
    v["train"]["batch_size"] = 4.into();
    v["train"]["epochs"] = 2.into();
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[test]
fn usage_and_io_exit_codes() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["train", "--config", "/nonexistent/config.json"]), 3);
    assert_eq!(code(&["init-config", "--preset", "huge", "--out", "/tmp/x.json"]), 2);
}

#[test]
fn config_errors_report_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    ok(&["init-config", "--preset", "paper", "--out", s(&path)]);
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"lambda_recon\": 200.0"));
    fs::write(&path, text.replacen("\"scale\": \"paper\",", "\"scale\": \"paper\",\n  \"typo\": 1,", 1)).unwrap();
    let out = jexpand(&["train", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("typo") && err.contains("line 3"), "{err}");
}

#[test]
fn phantom_gen_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    ok(&["phantom-gen", "--out", s(&empty), "--count", "0", "--size", "16", "16"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(empty.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["entries"].as_array().unwrap().len(), 0);

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["phantom-gen", "--out", s(d), "--count", "20", "--size", "16", "16", "--seed", "5", "--severity-mix", "low:0-0.3,high:0.7-1"]);
    }
    let ma = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.json")).unwrap());
    for entry in fs::read_dir(a.join("pairs")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join("pairs").join(&name)).unwrap(), fs::read(b.join("pairs").join(&name)).unwrap());
    }
    let m: serde_json::Value = serde_json::from_slice(&ma).unwrap();
    let test = m["entries"].as_array().unwrap().iter().filter(|e| e["split"] == "test").count();
    assert_eq!(test, 6);
    assert_eq!(code(&["phantom-gen", "--out", s(&a), "--severity-mix", "bad"]), 2);
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    ok(&["phantom-gen", "--config", s(&cfg), "--out", s(&d.join("raw"))]);
    ok(&["preprocess", "--manifest", s(&d.join("raw/manifest.json")), "--out", s(&d.join("proc")), "--target-size", "16", "16"]);
    let manifest = d.join("proc/manifest.json");
    let log = ok(&["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&d.join("run"))]);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let ckpt = d.join("run/final");
    assert!(ckpt.join("checkpoint.json").is_file());
    assert_eq!(fs::read_to_string(d.join("run/train_log.csv")).unwrap().lines().count(), 3);

    ok(&["infer", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&d.join("pred"))]);
    let preds: Vec<_> = fs::read_dir(d.join("pred")).unwrap().collect();
    assert_eq!(preds.len(), 6);

    let report = d.join("ours.json");
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&report)]);
    let csv = fs::read_to_string(d.join("ours.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("id,severity,psnr,ssim,dsc_high,rs,mae,mean_j,sd_j"));
    assert_eq!(csv.lines().count(), 7);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["version"], 1);
    assert_eq!(rep["config_hash"].as_str().unwrap().len(), 64);

    let base = d.join("const.json");
    ok(&["evaluate", "--constant-mean", "--manifest", s(&manifest), "--out", s(&base)]);
    let table = ok(&["compare", "--report", s(&report), "--report", s(&report)]);
    let same: Vec<&str> = table.lines().filter(|l| l.contains('*')).collect();
    assert_eq!(same.len(), 1, "{table}");
    ok(&["compare", "--report", s(&report), "--report", s(&base)]);

    // resume continues from an intermediate checkpoint of the same config
    ok(&["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&d.join("run2")), "--resume", s(&d.join("run/epoch_0000"))]);
    assert_eq!(
        fs::read(d.join("run/final/generator/out.conv.weight.jxp")).unwrap(),
        fs::read(d.join("run2/final/generator/out.conv.weight.jxp")).unwrap()
    );
    assert_eq!(
        code(&["train", "--config", s(&cfg), "--data", s(&manifest), "--epochs", "3", "--resume", s(&ckpt), "--out", s(&d.join("run3"))]),
        2
    );

    // a 64x64 checkpoint cannot run on 16x16 data
    let wrong = d.join("wrong.json");
    ok(&["init-config", "--out", s(&wrong)]);
    assert_eq!(code(&["train", "--config", s(&wrong), "--data", s(&manifest), "--out", s(&d.join("w"))]), 2);
}

#[test]
fn compare_rejects_mismatched_ids() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    ok(&["phantom-gen", "--config", s(&cfg), "--out", s(&d.join("raw"))]);
    ok(&["preprocess", "--manifest", s(&d.join("raw/manifest.json")), "--out", s(&d.join("proc")), "--target-size", "16", "16"]);
    let manifest = d.join("proc/manifest.json");
    ok(&["evaluate", "--constant-mean", "--manifest", s(&manifest), "--out", s(&d.join("test.json"))]);
    ok(&["evaluate", "--constant-mean", "--manifest", s(&manifest), "--split", "train", "--out", s(&d.join("train.json"))]);
    assert_eq!(code(&["compare", "--report", s(&d.join("test.json")), "--report", s(&d.join("train.json"))]), 2);
    assert_eq!(code(&["compare", "--report", s(&d.join("test.json"))]), 1);
}

#[test]
fn gradcheck_command() {
    let a = ok(&["gradcheck", "--ops", "tanh,conv2d", "--seed", "3"]);
    let b = ok(&["gradcheck", "--ops", "tanh,conv2d", "--seed", "3"]);
    let strip = |t: &str| t.lines().filter(|l| !l.contains(" cases in ")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&a), strip(&b));
    assert!(a.contains("tanh") && a.contains("conv adjoint"));
    assert_eq!(code(&["gradcheck", "--ops", "nope"]), 2);
}
