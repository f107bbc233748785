use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn superpr(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_superpr"));
    cmd.args(args).env_remove("SUPER_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("run superpr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_line(o: &Output) -> Value {
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    let last = err.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not JSON ({e}): {last}"))
}

const TINY: &str = r#"{
  "model": {"depth": 1, "stem_channels": 4},
  "dataset": {"task": "thin_lines", "train_count": 8, "test_count": 4, "size": 16},
  "train": {"epochs": 2, "batch_size": 4}
}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn macs_prints_exact_integer_csv() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "tiny.json", r#"{"depth": 2, "stem_channels": 8}"#);
    let o = superpr(&["macs", "--spec", &spec], &[]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let header = rows.headers().unwrap().clone();
    assert_eq!(
        header.iter().collect::<Vec<_>>(),
        ["name", "op", "output_shape", "macs", "params", "input_volume", "output_volume"]
    );
    let records: Vec<_> = rows.records().map(|r| r.unwrap()).collect();
    let (total, layers) = records.split_last().unwrap();
    let sum: u64 = layers.iter().map(|r| r[3].parse::<u64>().unwrap()).sum();
    assert_eq!(total[0].to_string(), "total");
    assert_eq!(total[3].parse::<u64>().unwrap(), sum);
}

#[test]
fn malformed_config_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "bad.json", r#"{"depth": 2, "stem_channels": "eight"}"#);
    let o = superpr(&["macs", "--spec", &spec], &[]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["error"], "config");
    assert_eq!(e["path"], "stem_channels");

    let cfg = write(dir.path(), "cfg.json", &TINY.replace("\"size\": 16", "\"size\": 15"));
    let o = superpr(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["path"], "dataset.size");

    let o = superpr(&["train", "--config", &cfg], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "usage");
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", TINY);
    let missing = dir.path().join("nowhere");
    let o = superpr(&["eval", "--config", &cfg, "--checkpoint", missing.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"], "io");
}

#[test]
fn train_then_eval_reproduces_final_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", TINY);
    let out = dir.path().join("run");
    let o = superpr(&["train", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert!(report.get("wall_clock_seconds").is_none());
    let timing: Value = serde_json::from_str(&fs::read_to_string(out.join("timing.json")).unwrap()).unwrap();
    assert!(timing["wall_clock_seconds"].as_f64().unwrap() > 0.0);

    let ckpt = out.join("checkpoint");
    let o = superpr(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(eval, report["final_metrics"]);
}

#[test]
fn seed_env_overrides_both_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", TINY);
    let run = |seed: &str| {
        let out = dir.path().join(format!("run{seed}"));
        let o = superpr(&["train", "--config", &cfg, "--out", out.to_str().unwrap()], &[("SUPER_SEED", seed)]);
        assert!(o.status.success());
        fs::read_to_string(out.join("metrics.json")).unwrap()
    };
    let a: Value = serde_json::from_str(&run("7")).unwrap();
    assert_eq!((a["model_seed"].as_u64(), a["data_seed"].as_u64()), (Some(7), Some(7)));
    assert_eq!(run("7"), run("7"));
    assert_ne!(run("7"), run("8"));

    let o = superpr(&["train", "--config", &cfg, "--out", "x"], &[("SUPER_SEED", "seven")]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["path"], "SUPER_SEED");
}

#[test]
fn gen_writes_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", TINY);
    let out = dir.path().join("data");
    let o = superpr(&["gen", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success());
    let labels = fs::read_to_string(out.join("train/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 9);
    assert!(labels.starts_with("index,image,mask,width"));
    let mask = superpr::tensor::io::load(out.join("test/0000_mask.supt")).unwrap().into_tensor::<f32>();
    assert_eq!(mask.shape(), superpr::Shape::new(1, 1, 16, 16));
    assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn compare_emits_one_row_per_seed_decoder_bucket() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", TINY);
    let out = dir.path().join("cmp");
    let o = superpr(
        &["compare", "--task", "thin_lines", "--config", &cfg, "--seeds", "2", "--out", out.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "seed,decoder,bucket,iou");
    assert_eq!(lines.len(), 1 + 2 * 2 * 3);
    for seed in ["0", "1"] {
        for dec in ["super", "baseline"] {
            for bucket in ["overall", "0-2", "2-4"] {
                let prefix = format!("{seed},{dec},{bucket},");
                assert!(lines.iter().any(|l| l.starts_with(&prefix)), "missing {prefix}");
            }
        }
    }
    assert_eq!(fs::read_to_string(out.join("compare.csv")).unwrap(), text);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["metric"], "iou_0_2");
    assert!(out.join("seed1_baseline.json").exists());

    let o = superpr(&["compare", "--task", "denoise", "--config", &cfg, "--seeds", "1"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_passes_on_fresh_build() {
    let o = superpr(&["verify", "--quick"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["pass"], true);
    assert!(r["suites"].as_array().unwrap().len() >= 10);
}
