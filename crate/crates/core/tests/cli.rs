//! End-to-end runs of the `groupcap` binary on a tiny corpus.

use std::path::Path;
use std::process::{Command, Output};

use groupcap::datagen::{read_jsonl, select_split, Split};

const TINY: [&str; 6] = ["--set", "n_samples=240", "--set", "epochs=2", "--set", "h=16"];

fn groupcap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groupcap"))
        .args(TINY)
        .args(args)
        .current_dir(dir)
        .env_remove("GROUPCAP_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("file exists")).expect("valid JSON")
}

#[test]
fn pipeline_from_datagen_to_attention() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(groupcap(&["datagen", "--out", "data"], d));
    for f in ["samples.jsonl", "vocab.txt", "report.json", "run.json", "config.txt"] {
        assert!(d.join("data").join(f).exists(), "missing {f}");
    }
    let run = json(&d.join("data/run.json"));
    assert_eq!(run["command"], "datagen");
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);

    ok(groupcap(&["train", "--data", "data", "--out", "train"], d));
    let csv = std::fs::read_to_string(d.join("train/train_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus two epochs:\n{csv}");

    let eval = ok(groupcap(&["eval", "--data", "data", "--out", "eval", "--ckpt", "train/model.ckpt"], d));
    assert!(eval.contains("WordAcc"));
    let m = json(&d.join("eval/metrics.json"));
    let acc = m["word_acc"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&acc));

    let samples = read_jsonl(&d.join("data/samples.jsonl")).unwrap();
    let test = select_split(&samples, Split::Test);
    let gold: String = test.iter().map(|s| s.caption_text() + "\n").collect();
    std::fs::write(d.join("gold.txt"), gold).unwrap();
    ok(groupcap(&["eval", "--data", "data", "--out", "gold", "--predictions", "gold.txt"], d));
    let m = json(&d.join("gold/metrics.json"));
    assert_eq!(m["word_acc"].as_f64(), Some(100.0));
    assert_eq!(m["wer"].as_f64(), Some(0.0));
    assert_eq!(m["bleu1"].as_f64(), Some(1.0));

    let id = test[0].id.to_string();
    let caption = ok(groupcap(
        &["caption", "--data", "data", "--out", "cap", "--ckpt", "train/model.ckpt", "--sample", &id, "--beam", "1"],
        d,
    ));
    assert_eq!(std::fs::read_to_string(d.join("cap/caption.txt")).unwrap(), caption);

    ok(groupcap(
        &["attention", "--data", "data", "--out", "att", "--ckpt", "train/model.ckpt", "--sample", &id],
        d,
    ));
    let att = json(&d.join("att/attention.json"));
    let matrices = att["matrices"].as_array().unwrap();
    assert_eq!(matrices[0]["name"], "target");
    for row in matrices[0]["weights"].as_array().unwrap() {
        let sum: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-4);
    }
}

#[test]
fn seed_flag_and_environment_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(groupcap(&["--seed", "5", "datagen", "--out", "flag"], d));
    let env = Command::new(env!("CARGO_BIN_EXE_groupcap"))
        .args(TINY)
        .args(["datagen", "--out", "env"])
        .current_dir(d)
        .env("GROUPCAP_SEED", "5")
        .output()
        .unwrap();
    ok(env);
    ok(groupcap(&["datagen", "--out", "default"], d));
    let read = |p: &str| std::fs::read(d.join(p).join("samples.jsonl")).unwrap();
    assert_eq!(read("flag"), read("env"));
    assert_ne!(read("flag"), read("default"));
}

#[test]
fn configuration_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = groupcap(&["--set", "batchsize=4", "datagen", "--out", "x"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    std::fs::write(d.join("bad.cfg"), "lr = fast\n").unwrap();
    let out = groupcap(&["--config", "bad.cfg", "datagen", "--out", "x"], d);
    assert!(!out.status.success());

    let out = groupcap(&["eval", "--data", "missing", "--out", "x", "--ckpt", "none.ckpt"], d);
    assert!(!out.status.success());
}

#[test]
fn ablation_and_noise_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(groupcap(&["datagen", "--out", "data"], d));
    let table = ok(groupcap(
        &["--set", "epochs=1", "ablate", "--data", "data", "--out", "abl", "--ckpt-dir", "ck", "--targets", "0,5", "--refs", "0,15"],
        d,
    ));
    assert!(table.contains("15"));
    let abl = json(&d.join("abl/ablation.json"));
    assert_eq!(abl["cells"].as_array().unwrap().len(), 3, "Tgt0+Ref0 is skipped");
    let ckpts = std::fs::read_dir(d.join("ck")).unwrap().count();
    assert_eq!(ckpts, 3);

    ok(groupcap(
        &["--set", "epochs=1", "noise", "--data", "data", "--out", "noise", "--ckpt-dir", "ck", "--k-train", "0", "--k-test", "0,5"],
        d,
    ));
    let grid = json(&d.join("noise/noise.json"));
    assert_eq!(grid["cells"].as_array().unwrap().len(), 2);
}
