use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "pipeline": {"image_size": 16, "patch_size": 4, "d_model": 8, "heads": 2, "encoder_depth": 1,
               "decoder_depth": 2, "queries": 4, "num_classes": 3, "rpb_hidden": 8, "ffn_hidden": 16},
  "data": {"image_size": 16, "min_objects": 1, "max_objects": 3, "min_size": 0.2, "max_size": 0.4},
  "train_samples": 8,
  "eval_samples": 4,
  "optim": {"epochs": 2, "batch_size": 4}
}"#;

fn plaindet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plaindet")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn generate_writes_stable_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&plaindet(&["generate", "--seed", "7", "--n", "512", "--out", s(d)]));
    }
    let text = fs::read(a.join("annotations.jsonl")).unwrap();
    assert_eq!(text.iter().filter(|&&c| c == b'\n').count(), 512);
    assert_eq!(text, fs::read(b.join("annotations.jsonl")).unwrap());
    assert_eq!(json(&a.join("config.json"))["seed"], 7);
    assert_eq!(json(&a.join("config.json"))["data"]["seed"], 7);

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let bad = blocker.join("sub");
    let out = plaindet(&["generate", "--n", "3", "--out", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("file"));

    let out = plaindet(&["generate", "--n", "2", "--images", "--out", s(&dir.path().join("img"))]);
    ok(&out);
    assert!(dir.path().join("img/images/000001.pgm").exists());
}

#[test]
fn zero_epochs_writes_initial_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let out_dir = dir.path().join("run");
    let out = plaindet(&["train", "--config", &cfg, "--epochs", "0", "--out", s(&out_dir)]);
    ok(&out);
    for f in ["checkpoint.json", "checkpoint.bin", "metrics.json", "config.json", "loss_log.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(out_dir.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let m = json(&out_dir.join("metrics.json"));
    assert!(m["AP"].is_number() && m["AP50"].is_number() && m["AP75"].is_number() && m["per_class"].is_object());
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed, m);
}

#[test]
fn resume_continues_the_step_counter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let run = dir.path().join("run");
    ok(&plaindet(&["train", "--config", &cfg, "--epochs", "1", "--out", s(&run)]));
    ok(&plaindet(&["train", "--config", &cfg, "--epochs", "3", "--resume", "--out", s(&run)]));
    let log = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    let rows: Vec<Vec<&str>> = log.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let epochs: Vec<u64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    let steps: Vec<u64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(epochs, vec![0, 1, 2]);
    assert_eq!(steps, vec![2, 4, 6]);
    assert_eq!(json(&run.join("checkpoint.json"))["meta"]["step"], 6);

    // resuming a finished run trains nothing and evaluates once
    let before = fs::read(run.join("metrics.json")).unwrap();
    ok(&plaindet(&["train", "--config", &cfg, "--epochs", "3", "--resume", "--out", s(&run)]));
    assert_eq!(fs::read(run.join("metrics.json")).unwrap(), before);
}

#[test]
fn eval_reproduces_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let run = dir.path().join("run");
    ok(&plaindet(&["train", "--config", &cfg, "--epochs", "1", "--out", s(&run)]));
    let ev = dir.path().join("eval");
    let ck = run.join("checkpoint.json");
    ok(&plaindet(&["eval", "--config", &cfg, "--checkpoint", s(&ck), "--out", s(&ev)]));
    assert_eq!(fs::read(ev.join("metrics.json")).unwrap(), fs::read(run.join("metrics.json")).unwrap());
    assert!(ev.join("config.json").exists());
}

#[test]
fn ablate_two_arms_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let arm = |name: &str, bias: &str| format!(r#"{{"name": "{name}", "bias": "{bias}", "reparam": true, "lft": true, "mqs": true, "hybrid": false}}"#);
    let grid = format!(r#"{{"arms": [{}, {}, {}], "seeds": [0]}}"#, arm("plain", "none"), arm("rpb", "decomposed"), arm("again", "none"));
    let grid = write_config(dir.path(), "grid.json", &grid);
    let out_dir = dir.path().join("abl");
    let out = plaindet(&["ablate", "--config", &cfg, "--grid", &grid, "--epochs", "1", "--out", s(&out_dir)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("'again' duplicates 'plain'"));
    let md = fs::read_to_string(out_dir.join("ablation.md")).unwrap();
    let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| arm")).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("| plain | none |") && rows[1].starts_with("| rpb | decomposed |"));
    assert!(md.contains("AP50 trend down the arm list"));
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    for f in ["config.json", "grid.json", "plain/seed0/metrics.json", "rpb/seed0/metrics.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn flops_rows() {
    let out = plaindet(&["flops"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,K,H,W,M,h,flops,activation_bytes");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("naive,300,50,84,8,256,"));
    assert!(lines[3].starts_with("naive,16,8,8,4,64,"));

    let out = plaindet(&["flops", "--no-default-shapes"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "variant,K,H,W,M,h,flops,activation_bytes\n");

    let dir = tempfile::tempdir().unwrap();
    let out = plaindet(&["flops", "--no-default-shapes", "--shape", "1,2,2,1,2", "--out", s(dir.path())]);
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("flops.csv")).unwrap();
    assert_eq!(csv, String::from_utf8(out.stdout).unwrap());
    assert!(csv.contains("naive,1,2,2,1,2,80,") && csv.contains("decomposed,1,2,2,1,2,52,"));

    assert_eq!(plaindet(&["flops", "--shape", "1,2,3"]).status.code(), Some(1));
}

const TOY_SMALL: &str = r#"{"train_samples": 4, "eval_samples": 4}"#;

#[test]
fn dump_attention_maps_and_index() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.json", TOY_SMALL);
    let run = dir.path().join("run");
    ok(&plaindet(&["train", "--config", &cfg, "--epochs", "0", "--out", s(&run)]));
    let dump = dir.path().join("dump");
    let ck = run.join("checkpoint.json");
    ok(&plaindet(&["dump-attn", "--checkpoint", s(&ck), "--index", "3", "--out", s(&dump)]));
    let maps = fs::read_dir(&dump)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("attn_"))
        .count();
    assert_eq!(maps, 2 * 4 * 16);
    let index = json(&dump.join("attention_index.json"));
    assert_eq!(index["files"].as_array().unwrap().len(), 128);
    assert_eq!(index["sample"], 3);
    assert_eq!(index["inside_box_mass"].as_array().unwrap().len(), 16);
    assert!(dump.join("attn_l1_h3_q15.pgm").exists());

    let csv = dir.path().join("csv");
    ok(&plaindet(&["dump-attn", "--checkpoint", s(&ck), "--format", "csv", "--out", s(&csv)]));
    assert!(csv.join("attn_l0_h0_q0.csv").exists());
    let both = dir.path().join("both");
    ok(&plaindet(&["dump-attn", "--checkpoint", s(&ck), "--format", "both", "--out", s(&both)]));
    assert_eq!(json(&both.join("attention_index.json"))["files"].as_array().unwrap().len(), 128);
    assert!(both.join("attn_l1_h3_q15.pgm").exists() && both.join("attn_l1_h3_q15.csv").exists());

    let missing = dir.path().join("nope.json");
    let out = plaindet(&["dump-attn", "--checkpoint", s(&missing), "--out", s(&dump)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn box_mask_model_keeps_attention_inside() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mask.json", r#"{"pipeline": {"bias": "boxmask"}, "train_samples": 4, "eval_samples": 4}"#);
    let run = dir.path().join("run");
    ok(&plaindet(&["train", "--config", &cfg, "--epochs", "0", "--out", s(&run)]));
    let dump = dir.path().join("dump");
    ok(&plaindet(&["dump-attn", "--checkpoint", s(&run.join("checkpoint.json")), "--out", s(&dump)]));
    let index = json(&dump.join("attention_index.json"));
    for m in index["inside_box_mass"].as_array().unwrap() {
        assert!(m.as_f64().unwrap() >= 0.999, "{m}");
    }
}

#[test]
fn exit_codes() {
    assert_eq!(plaindet(&["--help"]).status.code(), Some(0));
    assert_eq!(plaindet(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(plaindet(&[]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", r#"{"pipeline": {"patch_size": 7}}"#);
    let out = plaindet(&["train", "--config", &bad, "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let unknown = write_config(dir.path(), "unknown.json", r#"{"learning_rate": 3}"#);
    assert_eq!(plaindet(&["train", "--config", &unknown, "--out", s(dir.path())]).status.code(), Some(1));
    let missing = dir.path().join("missing.json");
    assert_eq!(plaindet(&["train", "--config", s(&missing)]).status.code(), Some(1));
    assert_eq!(plaindet(&["train", "--epochs", "0"]).status.code(), Some(1));
}
