mod common;

use std::path::Path;
use std::process::{Command, Output};

use moe_core::fixtures::{parse_activity_matrix, BASELINE_FILE, BASELINE_MATRIX, BLES_FILE, BLES_MATRIX};
use moe_core::trace::RoutingTrace;

fn moe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn matrix_trace(text: &str, path: &Path) {
    let m = parse_activity_matrix(text).unwrap();
    RoutingTrace::from_activity_matrix(&m).unwrap().save(path).unwrap();
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in {line}"))
        .parse()
        .unwrap()
}

#[test]
fn simulate_offload_on_the_reference_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let low = dir.path().join("bles.jsonl");
    let high = dir.path().join("baseline.jsonl");
    matrix_trace(BLES_MATRIX, &low);
    matrix_trace(BASELINE_MATRIX, &high);
    let out_dir = dir.path().join("report");
    let o = moe(&[
        "simulate-offload",
        "--trace",
        low.to_str().unwrap(),
        "--trace",
        high.to_str().unwrap(),
        "--expert-bytes",
        "1e6",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().filter(|l| l.starts_with("trace=")).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("exrep_pct=16.1765"), "{}", lines[0]);
    assert!(lines[1].contains("exrep_pct=30.8824"), "{}", lines[1]);
    assert_eq!(field(lines[0], "swap_events"), 11.0);
    assert_eq!(field(lines[1], "swap_events"), 21.0);
    assert!(field(lines[0], "tokens_per_sec") > field(lines[1], "tokens_per_sec"));

    let csv = std::fs::read_to_string(out_dir.join("offload.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with(moe_core::offload::CSV_HEADER.join(",").as_str()));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("offload.json")).unwrap()).unwrap();
    assert!(json.is_array() || json.is_object());
}

#[test]
fn simulate_offload_writes_csv_to_stdout_without_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.jsonl");
    matrix_trace(BLES_MATRIX, &t);
    let o = moe(&["simulate-offload", "--trace", t.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains(&moe_core::offload::CSV_HEADER.join(",")));
}

#[test]
fn bad_traces_exit_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = moe(&["simulate-offload", "--trace", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no records"), "{}", stderr(&o));

    let broken = dir.path().join("broken.jsonl");
    std::fs::write(
        &broken,
        "{\"num_experts\":4,\"top_k\":1}\n{\"layer_id\":0,\"selected_expert_ids\":[1]}\n{\"layer_id\":0,\"selected_expert_ids\":[9]}\n",
    )
    .unwrap();
    let o = moe(&["simulate-offload", "--trace", broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let garbage = dir.path().join("garbage.jsonl");
    std::fs::write(&garbage, "{\"layer_id\":0,\"selected_expert_ids\":[1]}\nnot json\n").unwrap();
    let o = moe(&["simulate-offload", "--trace", garbage.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = moe(&["simulate-offload", "--trace", "/nonexistent/t.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_cost_parameters_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.jsonl");
    matrix_trace(BLES_MATRIX, &t);
    let o = moe(&["simulate-offload", "--trace", t.to_str().unwrap(), "--bandwidth", "0"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn fixtures_command_detects_tampering() {
    let o = moe(&["fixtures"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0 failed"));

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(BASELINE_FILE), BASELINE_MATRIX).unwrap();
    let mut m = parse_activity_matrix(BLES_MATRIX).unwrap();
    m[2][9] ^= 1;
    let tampered: String = m
        .iter()
        .map(|row| row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    std::fs::write(dir.path().join(BLES_FILE), tampered).unwrap();
    let o = moe(&["fixtures", "--dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let text = stdout(&o);
    assert!(text.contains("FAIL"));
    assert!(text.contains("expert E3 token 10"), "{text}");
}

#[test]
fn train_eval_generate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, common::synthetic_corpus(100_000, 3)).unwrap();
    let run = dir.path().join("run");
    let small = [
        "--corpus",
        corpus.to_str().unwrap(),
        "--layers",
        "1",
        "--hidden",
        "16",
        "--experts",
        "4",
        "--active",
        "2",
        "--batch-size",
        "4",
        "--seq-len",
        "32",
    ];
    let mut args = vec!["train", "--out", run.to_str().unwrap(), "--steps", "200", "--lr", "1e-2"];
    args.extend(["--lb-coef", "0", "--bles-coef", "0"]);
    args.extend(small);
    let o = moe(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.jsonl", "checkpoint.bin", "config.toml", "eval.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let ce: Vec<f64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["kind"] == "step")
        .map(|v| v["ce"].as_f64().unwrap())
        .collect();
    assert_eq!(ce.len(), 200);
    let head: f64 = ce[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = ce[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head - 0.5, "loss {head} -> {tail}");

    let ckpt = run.join("checkpoint.bin");
    let mut eval_args = vec!["eval", "--checkpoint", ckpt.to_str().unwrap()];
    eval_args.extend(small);
    let o = moe(&eval_args);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(metrics["perplexity"].as_f64().unwrap() > 1.0);

    let trace = dir.path().join("gen.jsonl");
    let o = moe(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--prompt",
        "the ",
        "-n",
        "20",
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("the "));
    let t = RoutingTrace::load(&trace).unwrap();
    assert_eq!(t.num_layers(), 1);
    assert_eq!(t.num_experts(), 4);

    let o = moe(&["simulate-offload", "--trace", trace.to_str().unwrap(), "--config", run.join("config.toml").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let other = dir.path().join("other.txt");
    std::fs::write(&other, "qqq zzz xxx ".repeat(500)).unwrap();
    let o = moe(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--corpus", other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("vocabulary"));
}

#[test]
fn train_without_corpus_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = moe(&["train", "--out", dir.path().to_str().unwrap(), "--steps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corpus"));
}

#[test]
fn bundled_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let cfg = moe_core::trainer::TrainConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!((cfg.model.experts, cfg.model.active), (8, 2));
}
