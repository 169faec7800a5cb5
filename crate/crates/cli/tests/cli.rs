use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_MODEL: &str = r#"
[model]
stem_channels = 4
encoder_widths = [8, 16, 32, 64]
encoder_depths = [1, 1, 1, 1]
head_hidden = 16
input_size = [32, 32]

[train]
epochs = 2
batch_size = 2
"#;

fn eocd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eocd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, counts: [&str; 3]) -> Output {
    eocd(&[
        "synth", "--out", p(dir), "--size", "32", "--n-train", counts[0], "--n-val", counts[1], "--n-test", counts[2],
        "--seed", "5",
    ])
}

fn config(tmp: &TempDir) -> PathBuf {
    let path = tmp.path().join("run.toml");
    fs::write(&path, SMALL_MODEL).unwrap();
    path
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_triples_deterministically() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = synth(&a, ["2", "1", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.starts_with("# eocd synth"));
    assert!(s.contains("split=train samples=2 mean_change_fraction="));
    let files = tree(&a);
    let images = files.iter().filter(|(f, _)| f.extension().is_some_and(|e| e == "ppm")).count();
    let masks = files.iter().filter(|(f, _)| f.extension().is_some_and(|e| e == "pgm")).count();
    assert_eq!((images, masks), (8, 4));
    assert_eq!(code(&synth(&b, ["2", "1", "1"])), 0);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn synth_rejects_bad_size_and_non_empty_output() {
    let tmp = TempDir::new().unwrap();
    let o = eocd(&["synth", "--out", p(&tmp.path().join("x")), "--size", "40"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("multiple of 32"));
    let d = tmp.path().join("d");
    assert_eq!(code(&synth(&d, ["1", "1", "1"])), 0);
    assert_eq!(code(&synth(&d, ["1", "1", "1"])), 2);
    let forced = eocd(&["synth", "--out", p(&d), "--size", "32", "--n-train", "1", "--n-val", "1", "--n-test", "1", "--force"]);
    assert_eq!(code(&forced), 0);
}

#[test]
fn gradcheck_exit_codes() {
    let o = eocd(&["gradcheck", "--op", "all", "--instances", "2"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o).matches("status=pass").count(), 21);
    let o = eocd(&["gradcheck", "--op", "conv3d"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("softmax_channel"));
}

#[test]
fn train_eval_predict_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, ["4", "2", "2"])), 0);
    let cfg = config(&tmp);
    let ckpt = tmp.path().join("m.ckpt");
    let log = tmp.path().join("run.log");
    let train = |ckpt: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--config", p(&cfg), "--data", p(&data), "--out", p(ckpt), "--log", p(&log)];
        args.extend_from_slice(extra);
        eocd(&args)
    };

    let o = train(&ckpt, &["--oracle-teacher"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.starts_with("# eocd train"));
    assert!(s.contains("teacher = \"oracle\""));
    let epochs: Vec<&str> = s.lines().filter(|l| l.starts_with("epoch=")).collect();
    assert_eq!(epochs.len(), 2);
    let epoch_log = fs::read_to_string(tmp.path().join("m.ckpt.log")).unwrap();
    assert_eq!(epoch_log.lines().collect::<Vec<_>>(), epochs);
    assert!(fs::read_to_string(&log).unwrap().contains("epoch=2 "));

    // same seed, same data: identical final validation line
    let again = tmp.path().join("m2.ckpt");
    let o2 = train(&again, &["--oracle-teacher"]);
    let last = |o: &Output| stdout(o).lines().rfind(|l| l.starts_with("best_epoch=")).map(String::from);
    assert_eq!(last(&o), last(&o2));
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());

    // supervised only
    let o = train(&tmp.path().join("s.ckpt"), &[]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("distill_loss = \"none\""));
    assert!(stdout(&o).contains("distill_loss=0 "));

    let o = train(&tmp.path().join("t.ckpt"), &["--teacher", "/nonexistent.ckpt"]);
    assert_eq!(code(&o), 2);

    let eval = || eocd(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--split", "test"]);
    let (e1, e2) = (eval(), eval());
    assert_eq!(code(&e1), 0, "{}", stderr(&e1));
    assert_eq!(stdout(&e1), stdout(&e2));
    assert!(stdout(&e1).contains("split=test samples=2 iou="));

    let mask = tmp.path().join("mask.pgm");
    let pre = data.join("test/A/test_00000.ppm");
    let post = data.join("test/B/test_00000.ppm");
    let o = eocd(&["predict", "--ckpt", p(&ckpt), "--pre", p(&pre), "--post", p(&post), "--out", p(&mask)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("change_percent="));
    let bytes = fs::read(&mask).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert!(bytes[13..].iter().all(|&b| b == 0 || b == 255));
    assert_eq!(bytes.len(), 13 + 32 * 32);
}

#[test]
fn eval_and_predict_input_errors() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, ["1", "1", "0"])), 0);
    let ckpt = tmp.path().join("m.ckpt");
    let cfg = config(&tmp);
    let o = eocd(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = eocd(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--split", "test"]);
    assert_eq!(code(&o), 2);

    let big = tmp.path().join("big");
    assert_eq!(
        code(&eocd(&["synth", "--out", p(&big), "--size", "64", "--n-train", "1", "--n-val", "0", "--n-test", "0"])),
        0
    );
    let o = eocd(&[
        "predict",
        "--ckpt",
        p(&ckpt),
        "--pre",
        p(&data.join("train/A/train_00000.ppm")),
        "--post",
        p(&big.join("train/B/train_00000.ppm")),
        "--out",
        p(&tmp.path().join("m.pgm")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_reports_zero_fusion_params() {
    let o = eocd(&["bench", "--preset", "micro", "--size", "32", "--warmup", "0", "--runs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("params.fusion=0"));
    assert!(s.contains("low_confidence=true"));
    let flops = |size: &str| {
        let o = eocd(&["bench", "--preset", "micro", "--size", size, "--warmup", "0", "--runs", "1"]);
        stdout(&o)
            .lines()
            .find_map(|l| l.strip_prefix("flops=").map(|r| r.split(' ').next().unwrap().parse::<u64>().unwrap()))
            .unwrap()
    };
    assert!(flops("64") > flops("32"));
    let naive = eocd(&["bench", "--preset", "micro", "--fusion", "naive", "--size", "32", "--runs", "1", "--warmup", "0"]);
    assert!(!stdout(&naive).contains("params.fusion=0"));
}

#[test]
fn ablate_components_emits_four_rows() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, ["2", "1", "1"])), 0);
    let cfg = config(&tmp);
    let o = eocd(&["ablate", "--data", p(&data), "--preset", "components", "--config", p(&cfg), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("row=") && l.contains(" params=")).map(String::from).collect();
    assert_eq!(rows.len(), 4);
    let params = |r: &str| -> u64 {
        r.split(' ').find_map(|kv| kv.strip_prefix("params=")).unwrap().parse().unwrap()
    };
    assert!(params(&rows[1]) < params(&rows[0]));
    let o = eocd(&["ablate", "--data", p(&data), "--preset", "everything"]);
    assert_eq!(code(&o), 2);
}
