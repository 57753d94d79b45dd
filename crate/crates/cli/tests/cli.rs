use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bmnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmnn"))
        .args(args)
        .env_remove("BMNN_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}):\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn ok_json(args: &[&str]) -> Value {
    let out = bmnn(args);
    assert_eq!(code(&out), 0, "{args:?}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    json_of(&out)
}

/// A tiny synthetic fc problem that trains in milliseconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        r#"
layers = [{ kind = "fc", out = 6 }, { kind = "bn" }, { kind = "relu" }, { kind = "fc", out = 3 }]
dataset = "synthetic"
classes = 3
synthetic_shape = [5]
synthetic_count = 24
synthetic_test_count = 9
batch = 8
epochs = 2
lr = 0.05
seed = 3
"#,
    )
    .unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

// ---------------------------------------------------------------------------
// golden schemas: key structure of every --json document

/// Replaces every leaf with its JSON type and keeps only the first array element.
fn skeleton(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), skeleton(v))).collect()),
        Value::Array(a) => Value::Array(a.first().map(skeleton).into_iter().collect()),
        Value::Null => Value::String("null".into()),
        Value::Bool(_) => Value::String("bool".into()),
        Value::Number(_) => Value::String("number".into()),
        Value::String(_) => Value::String("string".into()),
    }
}

fn check_golden(name: &str, doc: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.json"));
    let got = skeleton(doc);
    if std::env::var_os("BMNN_UPDATE_GOLDEN").is_some() {
        fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let want: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
        .unwrap();
    assert_eq!(got, want, "schema of {name} changed");
}

#[test]
fn json_schemas_match_golden_files() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("w.bin");
    let csv = dir.path().join("m.csv");
    let jsonl = dir.path().join("m.jsonl");
    let train = ok_json(&[
        "train", "--json", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--metrics-csv", s(&csv), "--metrics-jsonl", s(&jsonl),
    ]);
    check_golden("train", &train);
    check_golden("eval", &ok_json(&["eval", "--json", "--config", s(&cfg), "--checkpoint", s(&ckpt)]));
    check_golden("verify-factors", &ok_json(&["verify-factors", "--json", "--preset", "lenet-bn"]));
    check_golden("compare-oracle", &ok_json(&["compare-oracle", "--json"]));
    let synth = dir.path().join("synth");
    check_golden(
        "make-synthetic",
        &ok_json(&["make-synthetic", "--json", "--out", s(&synth), "--count", "10", "--test-count", "2"]),
    );
    let err = bmnn(&["train", "--json", "--dataset", "cifar10"]);
    assert_eq!(code(&err), 2);
    check_golden("error", &json_of(&err));
}

// ---------------------------------------------------------------------------
// exit codes

#[test]
fn exit_code_zero_on_success() {
    let dir = TempDir::new().unwrap();
    let out = bmnn(&["train", "--config", s(&tiny_config(dir.path()))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("sgd") || String::from_utf8_lossy(&out.stdout).contains("backmatch"));
}

#[test]
fn exit_code_one_on_divergence() {
    let dir = TempDir::new().unwrap();
    let out = bmnn(&[
        "train", "--json", "--config", s(&tiny_config(dir.path())), "--rule", "sgd", "--lr", "1e9", "--epochs", "20",
    ]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_of(&out)["error"]["kind"], "divergence");
}

#[test]
fn exit_code_two_on_config_errors() {
    let dir = TempDir::new().unwrap();
    let bad_key = dir.path().join("bad.toml");
    fs::write(&bad_key, "lr = 0.1\nlearning_rat = 0.2\n").unwrap();
    let out = bmnn(&["train", "--config", s(&bad_key)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"), "offending key is named");

    let bad_type = dir.path().join("type.toml");
    fs::write(&bad_type, "epochs = \"many\"\n").unwrap();
    assert_eq!(code(&bmnn(&["train", "--config", s(&bad_type)])), 2);

    // CIFAR without any data directory
    let out = bmnn(&["train", "--preset", "lenet-bn", "--dataset", "cifar10"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("BMNN_DATA_DIR"));

    assert_eq!(code(&bmnn(&["train", "--rule", "adam"])), 2);
    assert_eq!(code(&bmnn(&["train", "--config", s(&tiny_config(dir.path())), "--lr", "-1"])), 2);
    assert_eq!(code(&bmnn(&["frobnicate"])), 2);
}

#[test]
fn exit_code_three_on_io_errors() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&bmnn(&["train", "--config", s(&dir.path().join("missing.toml"))])), 3);
    // a data directory without CIFAR files
    let out = bmnn(&["train", "--dataset", "cifar10", "--data-dir", s(dir.path())]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    // unwritable metrics path
    let cfg = tiny_config(dir.path());
    let out = bmnn(&["train", "--config", s(&cfg), "--metrics-csv", s(&dir.path().join("no/such/dir/m.csv"))]);
    assert_eq!(code(&out), 3);
    // checkpoint that is not a checkpoint
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"hello").unwrap();
    assert_eq!(code(&bmnn(&["eval", "--config", s(&cfg), "--checkpoint", s(&junk)])), 3);
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&bmnn(&["--help"])), 0);
    assert_eq!(code(&bmnn(&["train", "--help"])), 0);
}

// ---------------------------------------------------------------------------
// precedence, end to end

#[test]
fn flags_beat_file_beat_defaults() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let settings = |extra: &[&str]| {
        let mut args = vec!["train", "--json", "--config", s(&cfg)];
        args.extend_from_slice(extra);
        ok_json(&args)["settings"].clone()
    };
    let base = settings(&[]);
    // from the file
    assert_eq!(base["lr"], 0.05);
    assert_eq!(base["epochs"], 2);
    assert_eq!(base["seed"], 3);
    // defaults
    assert_eq!(base["momentum"], 0.9);
    assert_eq!(base["rule"], "backmatch");
    assert_eq!(base["nesterov"], true);
    // flags
    let over = settings(&["--lr", "0.01", "--epochs", "1", "--momentum", "0.5", "--rule", "lsalr", "--nesterov", "false"]);
    assert_eq!(over["lr"], 0.01);
    assert_eq!(over["epochs"], 1);
    assert_eq!(over["momentum"], 0.5);
    assert_eq!(over["rule"], "lsalr");
    assert_eq!(over["nesterov"], false);
    assert_eq!(over["seed"], 3);
}

#[test]
fn environment_supplies_the_data_directory() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_bmnn"));
        cmd.args(["train", "--json", "--config", s(&cfg), "--epochs", "1"]).env_remove("BMNN_DATA_DIR");
        if let Some(e) = env {
            cmd.env("BMNN_DATA_DIR", e);
        }
        if let Some(f) = flag {
            cmd.args(["--data-dir", f]);
        }
        let out = cmd.output().unwrap();
        assert_eq!(code(&out), 0);
        json_of(&out)["settings"]["data_dir"].clone()
    };
    assert_eq!(run(None, None), Value::Null);
    assert_eq!(run(Some("/from/env"), None), "/from/env");
    assert_eq!(run(Some("/from/env"), Some("/from/flag")), "/from/flag");
}

// ---------------------------------------------------------------------------
// train / eval / make-synthetic

#[test]
fn synthetic_cifar_trains_and_evaluates() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let made = ok_json(&["make-synthetic", "--json", "--out", s(&data), "--count", "40", "--test-count", "12", "--seed", "4"]);
    assert_eq!(made["files"].as_array().unwrap().len(), 6);
    let ckpt = dir.path().join("w.bin");
    let csv = dir.path().join("metrics.csv");
    let common = ["--preset", "lenet-bn-mini", "--dataset", "cifar10", "--data-dir", s(&data), "--batch", "8", "--epochs", "2"];
    let mut args = vec!["train", "--json", "--rule", "backmatch", "--lr", "0.02", "--checkpoint", s(&ckpt), "--metrics-csv", s(&csv)];
    args.extend_from_slice(&common);
    let trained = ok_json(&args);
    assert_eq!(trained["data"]["train"], 40);
    assert_eq!(trained["data"]["test"], 12);
    let run = &trained["runs"][0];
    let header = fs::read_to_string(&csv).unwrap();
    assert!(header.starts_with("epoch,step,learning_rate,train_loss"));
    assert_eq!(header.lines().count(), 1 + 2 * 5, "one row per step plus the header");

    let mut args = vec!["eval", "--json", "--checkpoint", s(&ckpt)];
    args.extend_from_slice(&common);
    let eval = ok_json(&args);
    assert_eq!(eval["split"], "test");
    assert_eq!(eval["samples"], 12);
    assert_eq!(eval["accuracy"], run["test_accuracy"]);
    assert_eq!(eval["loss"], run["test_loss"]);
}

#[test]
fn paired_run_writes_one_log_per_rule() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let csv = dir.path().join("m.csv");
    let doc = ok_json(&[
        "train", "--json", "--config", s(&cfg), "--rule", "sgd", "--lr", "0.1", "--pair-rule", "backmatch", "--pair-lr", "0.02",
        "--metrics-csv", s(&csv),
    ]);
    let runs = doc["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["rule"], "sgd");
    assert_eq!(runs[1]["rule"], "backmatch");
    assert_eq!(runs[1]["learning_rate"], 0.02);
    assert_eq!(runs[0]["batch_digest"], runs[1]["batch_digest"]);
    assert_eq!(runs[0]["initial_loss"], runs[1]["initial_loss"], "shared initialization");
    assert!(dir.path().join("m.sgd.csv").exists());
    assert!(dir.path().join("m.backmatch.csv").exists());
}

#[test]
fn repeated_training_is_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str| {
        let p = dir.path().join(name);
        ok_json(&["train", "--config", s(&cfg), "--metrics-jsonl", s(&p), "--json"]);
        fs::read_to_string(p).unwrap()
    };
    let strip = |log: String| -> Vec<Value> {
        log.lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("seconds");
                v
            })
            .collect()
    };
    assert_eq!(strip(run("a.jsonl")), strip(run("b.jsonl")));
}

// ---------------------------------------------------------------------------
// verify-factors / compare-oracle

#[test]
fn verify_factors_reports_lenet_sharing() {
    let doc = ok_json(&["verify-factors", "--json", "--preset", "lenet-bn", "--seed", "5"]);
    assert_eq!(doc["closed_form_available"], true);
    let layers = doc["layers"].as_array().unwrap();
    let row = |i: u64| layers.iter().find(|r| r["layer"] == i).unwrap();
    assert_eq!(row(0)["sharing"], 196.0);
    assert_eq!(row(4)["sharing"], 25.0);
    for i in [0, 4, 9, 12, 15] {
        let r = row(i);
        assert!(r["relative_difference"].as_f64().unwrap() < 1e-12, "layer {i}");
        let (scale, measured) = (r["scale"].as_f64().unwrap(), r["measured"].as_f64().unwrap());
        assert!((scale - measured).abs() / scale < 1e-12, "layer {i}: scaled/BP equals 1/(m s)");
    }
    let text = bmnn(&["verify-factors", "--preset", "lenet-bn"]);
    let text = String::from_utf8_lossy(&text.stdout);
    assert!(text.contains("s_cv1 = 196, s_cv2 = 25"), "{text}");
}

#[test]
fn verify_factors_identity_toy_net_has_unit_ratios() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("toy.toml");
    fs::write(
        &cfg,
        "layers = [{ kind = \"fc\", out = 4 }, { kind = \"bn\" }, { kind = \"relu\" }, { kind = \"fc\", out = 4 }]\n\
         dataset = \"synthetic\"\nclasses = 4\nsynthetic_shape = [4]\n",
    )
    .unwrap();
    let doc = ok_json(&["verify-factors", "--json", "--config", s(&cfg), "--init", "identity"]);
    for row in doc["layers"].as_array().unwrap() {
        assert_eq!(row["ratio"], 1.0, "{row}");
        assert_eq!(row["m_input"], 1.0, "{row}");
    }
    // identity is only defined for square fc layers
    assert_eq!(code(&bmnn(&["verify-factors", "--preset", "lenet-bn", "--init", "identity"])), 2);
}

#[test]
fn compare_oracle_fc_cases() {
    let doc = ok_json(&["compare-oracle", "--json", "--kind", "fc", "--inputs", "16", "--outputs", "8", "--batch", "64"]);
    let cases = doc["cases"].as_array().unwrap();
    let case = |name: &str| cases.iter().find(|c| c["case"] == name).unwrap().clone();
    assert!(case("whitened")["weight_error"].as_f64().unwrap() < 1e-8);
    assert!(case("unit-columns")["input_error"].as_f64().unwrap() < 1e-12);
    let gap = case("random")["weight_error"].as_f64().unwrap();
    assert!(gap.is_finite() && gap > 0.0);
}

#[test]
fn compare_oracle_conv_cases() {
    let doc = ok_json(&["compare-oracle", "--json", "--kind", "conv", "--channels", "2", "--filters", "3", "--kernel", "2", "--stride", "2", "--size", "6"]);
    let cases = doc["cases"].as_array().unwrap();
    let white = cases.iter().find(|c| c["case"] == "whitened").unwrap();
    assert_eq!(white["sharing"], 9.0);
    assert!(white["weight_error"].as_f64().unwrap() < 1e-8);
    // overlapping patches: only the random case
    let doc = ok_json(&["compare-oracle", "--json", "--kind", "conv", "--kernel", "3", "--stride", "1", "--size", "5"]);
    assert_eq!(doc["cases"].as_array().unwrap().len(), 1);
}

#[test]
fn compare_oracle_rejects_oversized_geometry() {
    assert_eq!(code(&bmnn(&["compare-oracle", "--kind", "fc", "--inputs", "600", "--batch", "700"])), 2);
    let out = bmnn(&["compare-oracle", "--kind", "conv", "--channels", "60", "--kernel", "3", "--stride", "1", "--size", "5"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("limit"));
}
