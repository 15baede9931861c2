use std::path::Path;
use std::process::{Command, Output};

fn qfsep(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qfsep"));
    cmd.args(args).env_remove("QFSEP_OUT_ROOT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn qfsep")
}

fn ok(args: &[&str]) -> String {
    let out = qfsep(args, &[]);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let (data, model, folded, stats, quant) = (p("data"), p("m"), p("mf"), p("s.bin"), p("mq"));
    ok(&[
        "gen-data",
        "--train",
        "96",
        "--val",
        "48",
        "--holdout",
        "16",
        "--out",
        &data,
    ]);
    ok(&[
        "train",
        "--arch",
        "baseline",
        "--data",
        &data,
        "--epochs",
        "1",
        "--out",
        &model,
        "--history",
        &p("h.csv"),
    ]);
    ok(&[
        "transform",
        "--model",
        &model,
        "--op",
        "inject-dead",
        "--channels",
        "0,3",
        "--layer",
        "1",
        "--out",
        &p("mi"),
    ]);
    ok(&[
        "transform",
        "--model",
        &model,
        "--op",
        "make-friendly",
        "--out",
        &p("mfr"),
    ]);
    ok(&[
        "transform",
        "--model",
        &model,
        "--op",
        "fold-bn",
        "--out",
        &folded,
    ]);
    ok(&["calibrate", "--model", &folded, "--data", &data, "--out", &stats]);
    ok(&["quantize", "--model", &folded, "--stats", &stats, "--out", &quant]);

    let eval: serde_json::Value = serde_json::from_str(&ok(&[
        "eval",
        "--model",
        &quant,
        "--quantized",
        "--data",
        &data,
        "--mode",
        "fixed",
    ]))
    .unwrap();
    assert_eq!(eval["images"], 48);
    assert!(eval["top1"].as_f64().unwrap() >= 0.0);

    ok(&[
        "diagnose",
        "--model",
        &p("mi"),
        "--out",
        &p("d.json"),
        "--csv",
        &p("csv"),
    ]);
    let alpha = std::fs::read_to_string(dir.path().join("csv/alpha-layer2.csv")).unwrap();
    assert!(alpha.starts_with("channel_index,alpha\n"));
    ok(&[
        "diagnose",
        "--model",
        &model,
        "--quantized",
        &quant,
        "--data",
        &data,
        "--out",
        &p("d2.json"),
    ]);

    ok(&[
        "bench",
        "--model",
        &quant,
        "--engine",
        "int8",
        "--data",
        &data,
        "--warmup",
        "1",
        "--log",
        &p("run.csv"),
    ]);
    ok(&[
        "score",
        "--log",
        &p("run.csv"),
        "--budget-ms",
        "30",
        "--out",
        &p("score.json"),
    ]);
    let score: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("score.json")).unwrap()).unwrap();
    assert_eq!(score["n"], 16);
}

#[test]
fn exit_codes() {
    assert_eq!(qfsep(&["--help"], &[]).status.code(), Some(0));
    assert_eq!(qfsep(&["train", "--help"], &[]).status.code(), Some(0));
    assert_eq!(qfsep(&["no-such-command"], &[]).status.code(), Some(1));
    assert_eq!(qfsep(&["score"], &[]).status.code(), Some(1));
    assert_eq!(
        qfsep(&["score", "--log", "/nonexistent/run.csv"], &[])
            .status
            .code(),
        Some(2)
    );
    let bad = qfsep(&["pipeline", "--set", "train.no_such_key=1"], &[]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn pipeline_uses_the_output_root_variable() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    std::fs::write(
        &config,
        "seed = 3\n[data]\ntrain = 160\nval = 80\nholdout = 16\n[train]\nepochs = 1\n[diagnose]\nprobe_per_class = 1\n",
    )
    .unwrap();
    let root = dir.path().join("root");
    let out = qfsep(
        &["pipeline", "--config", config.to_str().unwrap()],
        &[("QFSEP_OUT_ROOT", &root)],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-baseline"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 3);
    assert!(summary["accuracy"]["friendly"]["int8"].is_number());
}
