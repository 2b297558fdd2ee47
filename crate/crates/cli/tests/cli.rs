use std::path::Path;
use std::process::{Command, Output};

fn styledg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styledg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = styledg(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 20] = [
    "--set", "backbone.stage_channels=[4,8,8,16]",
    "--set", "backbone.input_size=16",
    "--set", "preprocess.resize_to=18",
    "--set", "preprocess.crop_to=16",
    "--set", "batch_size=4",
    "--set", "grad_accum_steps=1",
    "--set", "epochs=1",
    "--set", "srm_fl.reduction=2",
    "--set", "train_domains=[0,1]",
    "--set", "lr=0.001",
];

#[test]
fn generate_train_eval_stats_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["generate-data", "--out", s(&data), "--image-size", "16", "--per-domain", "8", "--seed", "3"]);
    let manifest = data.join("manifest.jsonl");
    assert!(manifest.is_file());

    let run = dir.path().join("run");
    let mut args = vec!["train", "--manifest", s(&manifest), "--out", s(&run)];
    args.extend(TINY);
    ok(&args);
    for f in ["model.ckpt", "resolved_config.json", "train_log.jsonl", "epoch_losses.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["batch_size"], 4);
    assert!(resolved["preprocess"]["normalize_std"].is_number());

    let eval = dir.path().join("eval");
    ok(&["eval", "--checkpoint", s(&run.join("model.ckpt")), "--manifest", s(&manifest), "--out", s(&eval)]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["per_domain"].as_array().unwrap().len(), 3);
    assert!(eval.join("metrics.csv").is_file());

    let stats = dir.path().join("stats");
    ok(&["stats", "--manifest", s(&manifest), "--out", s(&stats)]);
    assert!(std::fs::read_dir(&stats).unwrap().count() >= 2);
}

#[test]
fn gradcheck_reports_every_case_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("gradcheck.json");
    let stdout = ok(&["gradcheck", "--json", s(&json)]);
    assert!(stdout.lines().any(|l| l.starts_with("PASS")));
    assert!(!stdout.lines().any(|l| l.starts_with("FAIL")));
    assert!(json.is_file());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    assert!(!styledg(&["stats", "--manifest", s(&missing), "--out", s(dir.path())]).status.success());
    let out = styledg(&[
        "train", "--manifest", s(&missing), "--out", s(dir.path()), "--set", "batch_size=0",
    ]);
    assert!(!out.status.success());
}
