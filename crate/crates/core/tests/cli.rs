//! End-to-end runs of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvadapter")).args(args).output().expect("spawn mvadapter")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "\
# a short run so the test stays quick
data.n_pairs = 64
data.n_train = 32
train.epochs = 2
";

#[test]
fn storage_units() {
    let o = bin(&["storage", "--tasks", "5", "--ratio", "0.025"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "1.125");
    let o = bin(&["storage", "--tasks", "5", "--full"]);
    assert_eq!(stdout(&o).trim(), "5.0");
}

#[test]
fn clip_scale_parameter_report() {
    let o = bin(&["params", "--clip-b16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let ratio: f64 = out.lines().find_map(|l| l.strip_prefix("ratio ")).unwrap().trim_end_matches('%').parse().unwrap();
    assert!(ratio > 1.5 && ratio <= 3.0, "{ratio}");
    assert!(out.lines().any(|l| l.starts_with("reference ")));
    assert!(out.lines().any(|l| l.starts_with("gap ")));
}

#[test]
fn missing_file_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.bin");
    let o = bin(&["eval", "--ckpt", p(&missing), "--data", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(p(&missing)));
}

#[test]
fn bad_config_exits_3_with_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    for (text, key) in [("adapter.bogus = 1\n", "adapter.bogus"), ("train.lr = fast\n", "train.lr"), ("train.batch_size = 1\n", "train.batch_size")] {
        std::fs::write(&cfg, text).unwrap();
        let o = bin(&["params", "--config", p(&cfg)]);
        assert_eq!(o.status.code(), Some(3), "{text}");
        assert!(stderr(&o).contains(key), "{}", stderr(&o));
    }
}

#[test]
fn generate_train_evaluate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data.bin");
    let o = bin(&["gen-data", "--spec", p(&cfg), "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut outputs = Vec::new();
    for run in 0..2 {
        let ckpt = dir.path().join(format!("ckpt{run}.bin"));
        let log = dir.path().join(format!("log{run}.txt"));
        let t = bin(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt), "--log", p(&log)]);
        assert!(t.status.success(), "{}", stderr(&t));
        let e = bin(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
        assert!(e.status.success(), "{}", stderr(&e));
        outputs.push((stdout(&t), std::fs::read(&ckpt).unwrap(), std::fs::read(&log).unwrap(), stdout(&e)));
    }
    assert_eq!(outputs[0], outputs[1]);
    let eval = &outputs[0].3;
    assert!(eval.lines().any(|l| l.starts_with("T2V ")) && eval.lines().any(|l| l.starts_with("V2T ")), "{eval}");
}

#[test]
fn untrained_checkpoint_evaluates_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "train.epochs = 0\n").unwrap();
    let data = dir.path().join("data.bin");
    assert!(bin(&["gen-data", "--spec", p(&cfg), "--out", p(&data)]).status.success());
    let ckpt = dir.path().join("init.bin");
    assert!(bin(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]).status.success());
    let o = bin(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    // 64 queries, 8 labels: chance R@1 is 12.5 with sd about 4.1
    let out = stdout(&o);
    for line in out.lines().filter(|l| l.starts_with("T2V ") || l.starts_with("V2T ")) {
        let r1: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!((r1 - 12.5).abs() <= 12.5, "{line}");
    }
}
