use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn xfsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xfsl"))
        .args(args)
        .env("XFSL_THREADS", "1")
        .output()
        .expect("spawn xfsl")
}

fn ok(args: &[&str]) -> Value {
    let out = xfsl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.trim()).expect("one-line json summary")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_DATA: [&str; 10] = [
    "--per-class",
    "12",
    "--test-per-class",
    "5",
    "--image-size",
    "32",
    "--radius-min",
    "3",
    "--radius-max",
    "5",
];

const SMALL_MODEL: [&str; 10] = [
    "--channels",
    "4,8",
    "--embedding-dim",
    "8",
    "--epochs",
    "1",
    "--episodes",
    "3",
    "--q-per-class",
    "2",
];

fn gen_data(dir: &Path, seed: &str) {
    let mut args = vec!["gen-data", "--out", s(dir), "--seed", seed];
    args.extend(SMALL_DATA);
    ok(&args);
}

fn file_map(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    gen_data(&a, "4");
    gen_data(&b, "4");
    gen_data(&c, "5");
    let strip_echo = |m: Vec<(String, Vec<u8>)>| m.into_iter().filter(|(n, _)| n != "run_config.json").collect::<Vec<_>>();
    let (fa, fb, fc) = (strip_echo(file_map(&a)), strip_echo(file_map(&b)), strip_echo(file_map(&c)));
    assert_eq!(fa, fb);
    assert_ne!(fa, fc);
    assert!(fa.iter().any(|(n, _)| n == "manifest.jsonl"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(xfsl(&[]).status.code(), Some(2));
    assert_eq!(xfsl(&["train", "--mode", "sideways"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = xfsl(&["train", "--data", s(&tmp.path().join("missing")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn invalid_lambda_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "0");
    let out = xfsl(&["active", "--data", s(&data), "--out", s(&tmp.path().join("al")), "--lambda", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn baseline_mode_warns_and_records_zero_alpha() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let model = tmp.path().join("model");
    gen_data(&data, "1");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&model), "--mode", "baseline", "--alpha", "0.3"];
    args.extend(SMALL_MODEL);
    let out = xfsl(&args);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--alpha 0.3 is ignored in baseline mode"), "{stderr}");
    let echo: Value = serde_json::from_str(&fs::read_to_string(model.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echo["train"]["alpha"], 0.0);
    assert_eq!(echo["train"]["mode"], "baseline");
}

#[test]
fn train_eval_explain_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let data = p("data");
    gen_data(&data, "2");

    let mut runs = Vec::new();
    for (name, mode) in [("guided", "guided"), ("baseline", "baseline")] {
        let model = p(&format!("{name}_model"));
        let mut args = vec!["train", "--data", s(&data), "--out", s(&model), "--mode", mode, "--seed", "2"];
        args.extend(SMALL_MODEL);
        let summary = ok(&args);
        assert_eq!(summary["command"], "train");
        for f in ["checkpoint.bin", "model.json", "loss_trace.csv", "run_config.json"] {
            assert!(model.join(f).is_file(), "missing {f}");
        }
        let trace = fs::read_to_string(model.join("loss_trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 2);

        let eval = p(&format!("{name}_eval"));
        ok(&["eval", "--model", s(&model), "--data", s(&data), "--out", s(&eval), "--dump-heatmaps"]);
        let report: Value = serde_json::from_str(&fs::read_to_string(eval.join("eval_report.json")).unwrap()).unwrap();
        let acc = report["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(fs::read_dir(eval.join("heatmaps")).unwrap().count(), 15);
        runs.push(eval);
    }

    let explain = p("explain");
    ok(&[
        "explain",
        "--model",
        s(&p("guided_model")),
        "--data",
        s(&data),
        "--out",
        s(&explain),
        "--method",
        "ig",
        "--ig-steps",
        "4",
        "--limit",
        "3",
        "--target",
        "true",
    ]);
    let csv = fs::read_to_string(explain.join("explain_ig.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sample_id,label,target,dice,iou,degenerate"));
    assert_eq!(lines.count(), 3);

    let report = p("report");
    let mut args = vec!["report", "--out", s(&report), "--runs"];
    args.extend(runs.iter().map(|r| s(r)));
    ok(&args);
    let summary = fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(summary.starts_with("kind,variant,runs,accuracy_mean,accuracy_std,macro_auc_mean,iou_mean,iou_std\n"));
    assert!(summary.contains("\"guided (alpha=0.1)\""));
    assert!(summary.contains("\"baseline\""));
    let text = fs::read_to_string(report.join("report.txt")).unwrap();
    assert!(text.starts_with("Guided vs baseline"));
}

#[test]
fn active_run_writes_audit_trail() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("al");
    gen_data(&data, "3");
    let mut args = vec![
        "active",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--init-labeled",
        "15",
        "--rounds",
        "2",
        "--batch-k",
        "4",
        "--finetune-epochs",
        "1",
        "--finetune-episodes",
        "2",
        "--k-shot",
        "2",
    ];
    args.extend(SMALL_MODEL);
    ok(&args);
    for f in ["audit.jsonl", "round_0.json", "round_2.json", "pool_history.json", "checkpoint.bin", "model.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let audit = fs::read_to_string(out.join("audit.jsonl")).unwrap();
    let selected = audit
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["selected"] == true)
        .count();
    assert_eq!(selected, 8);
}
