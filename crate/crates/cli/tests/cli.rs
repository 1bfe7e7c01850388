use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.toml");

fn iml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iml")).args(args).output().unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

#[test]
fn forge_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = iml(&["forge", "--config", TINY, "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let rel = Path::new("main/seed-7/bundle.jsonl");
    let bytes = std::fs::read(a.join(rel)).unwrap();
    assert!(!bytes.is_empty());
    assert_eq!(bytes, std::fs::read(b.join(rel)).unwrap());
    assert_eq!(std::fs::read(a.join("main/seed-7/vocab.jsonl")).unwrap(), std::fs::read(b.join("main/seed-7/vocab.jsonl")).unwrap());
    assert!(!a.join("main/seed-0").exists());
}

#[test]
fn missing_bundle_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.jsonl");
    let out = dir.path().join("out");
    let o = iml(&["train", "--config", TINY, "--seed", "0", "--bundle", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let e = error_json(&o);
    assert_eq!(e["error"], "io");
    assert_eq!(e["path"], missing.to_str().unwrap());
}

#[test]
fn unknown_preset_is_a_config_error() {
    let e = error_json(&iml(&["repro", "no-such-preset"]));
    assert_eq!(e["error"], "config");
    assert_eq!(e["field"], "preset");
    assert!(e["message"].as_str().unwrap().contains("set-inclusion-desk"));
    let e = error_json(&iml(&["train", "--preset", "no-such-preset"]));
    assert_eq!(e["field"], "preset");
}

#[test]
fn invalid_fields_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(TINY).unwrap();
    let cases = [
        (base.replace("batch_size = 64\neval_every = 1\n\n[training.stage2]", "batch_size = 0\neval_every = 1\n\n[training.stage2]"), "training.stage1.batch_size"),
        (base.replace("n_heads = 2", "n_heads = 3"), "model"),
        (base.replace("[analysis]", "[analysis]\nbogus = 1"), "analysis"),
        (base.replace("epochs = 2", "epochs = \"two\""), "training.stage1"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("bad{i}.toml"));
        std::fs::write(&path, text).unwrap();
        let e = error_json(&iml(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]));
        assert_eq!(e["error"], "config", "{e}");
        assert!(e["field"].as_str().unwrap().starts_with(field), "case {i}: {e}");
    }
}

#[test]
fn usage_errors_are_single_json_lines() {
    let o = iml(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"], "usage");
    let e = error_json(&iml(&["train", "--out", "/tmp/none"]));
    assert_eq!(e["field"], "config");
}

#[test]
fn checkpoint_commands_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let o = iml(&["train", "--config", TINY, "--seed", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seed_dir = out.join("main/seed-1");
    for f in ["config.toml", "bundle.jsonl", "vocab.jsonl", "metrics.csv", "predictions.jsonl", "alignment.csv", "probe.csv", "run.json", "checkpoints/stage1.ckpt", "checkpoints/stage2.ckpt"] {
        assert!(seed_dir.join(f).exists(), "{f}");
    }
    let ckpt = seed_dir.join("checkpoints/stage2.ckpt");
    let o = iml(&["eval", "--config", TINY, "--seed", "1", "--checkpoint", ckpt.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let em: Vec<(String, f64)> = stdout
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (format!("{}/{}", f[0], f[1]), f[2].parse().unwrap())
        })
        .collect();
    // Re-evaluating the final checkpoint reproduces the logged final EM.
    let mut rdr = csv::Reader::from_path(seed_dir.join("metrics.csv")).unwrap();
    for row in rdr.records() {
        let row = row.unwrap();
        if &row[2] == "stage2" && &row[6] == "em" {
            let key = format!("{}/{}", &row[4], &row[5]);
            let logged: f64 = row[7].parse().unwrap();
            assert!(em.iter().any(|(k, v)| *k == key && *v == logged), "{key}: {logged} vs {em:?}");
        }
    }
    for cmd in ["align", "probe"] {
        let s1 = seed_dir.join("checkpoints/stage1.ckpt");
        let o = iml(&[cmd, "--config", TINY, "--seed", "1", "--checkpoint", s1.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stdout.is_empty());
    }
    let before = std::fs::read(out.join("main/report/summary.csv")).unwrap();
    let o = iml(&["report", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(before, std::fs::read(out.join("main/report/summary.csv")).unwrap());
    let e = error_json(&iml(&["report", "--out", dir.path().join("empty").to_str().unwrap()]));
    assert_eq!(e["error"], "io");
}
