use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

use stepsplit_core::dataset::{mnist_paths, write_mnist, LabeledDataset};
use stepsplit_core::Tensor;

fn stepsplit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stepsplit")).args(args).output().expect("binary runs")
}

fn tiny_mnist(dir: &Path, n: usize) {
    let images = Tensor::from_fn(&[n, 1, 28, 28], |i| ((i * 7 + i / 13) % 256) as f64 / 255.0).unwrap();
    let ds = LabeledDataset::new(images, (0..n).map(|i| (i * 3) % 10).collect(), "mnist").unwrap();
    for train in [true, false] {
        let (img, lab) = mnist_paths(dir, train);
        write_mnist(&ds, &img, &lab).unwrap();
    }
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: [&str; 6] = ["--batch", "8", "--epochs", "2", "--activation", "stepwise"];

#[test]
fn missing_dataset_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = stepsplit(&["train", "--data-dir", tmp.path().join("none").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
    assert!(!out.exists());
}

#[test]
fn bad_flags_fail() {
    assert!(!stepsplit(&["train", "--lr", "-1"]).status.success());
    assert!(!stepsplit(&["train", "--activation", "stepwise", "--n", "0"]).status.success());
    assert!(!stepsplit(&["eval"]).status.success());
    assert!(!stepsplit(&["nonsense"]).status.success());
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_mnist(tmp.path(), 24);
    let out = tmp.path().join("run");
    let d = tmp.path().to_str().unwrap();
    let text = stdout(&stepsplit(&[&["train", "--data-dir", d, "--out", out.to_str().unwrap()], &SMALL[..]].concat()));
    assert_eq!(text, std::fs::read_to_string(out.join("metrics.txt")).unwrap());
    let last: f64 = text.lines().last().unwrap().rsplit(' ').next().unwrap().parse().unwrap();
    let ckpt = out.join("model.svw");
    let eval = stdout(&stepsplit(&["eval", "--data-dir", d, "--checkpoint", ckpt.to_str().unwrap()]));
    assert_eq!(eval.trim(), format!("test accuracy {last}"));
}

#[test]
fn serve_pair_matches_in_process_split() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_mnist(tmp.path(), 24);
    let d = tmp.path().to_str().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let dir = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();

    let (t_out, e_out, local) = (dir("trainer"), dir("edge"), dir("local"));
    let trainer = Command::new(env!("CARGO_BIN_EXE_stepsplit"))
        .args([&["serve-trainer", "--listen", &addr, "--out", &t_out], &SMALL[..]].concat())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let edge = stepsplit(&[&["serve-edge", "--connect", &addr, "--data-dir", d, "--out", &e_out], &SMALL[..]].concat());
    let trainer = trainer.wait_with_output().unwrap();
    stdout(&edge);
    assert!(trainer.status.success());

    stdout(&stepsplit(&[&["train", "--mode", "split", "--data-dir", d, "--out", &local], &SMALL[..]].concat()));
    let read = |p: String| std::fs::read(p).unwrap();
    assert_eq!(read(format!("{t_out}/model.svw")), read(format!("{local}/model.svw")));
    assert_eq!(read(format!("{t_out}/metrics.txt")), read(format!("{local}/metrics.txt")));
}

#[test]
fn figure_lists_missing_commands() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_mnist(tmp.path(), 12);
    let o = stepsplit(&["figure", "--data-dir", tmp.path().to_str().unwrap(), "--out", tmp.path().join("f").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stepsplit train") && err.contains("--activation sigmoid"), "{err}");
}

#[test]
fn attack_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_mnist(tmp.path(), 4);
    let out = tmp.path().join("a");
    let text = stdout(&stepsplit(&[
        "attack", "--data-dir", tmp.path().to_str().unwrap(), "--num-images", "2", "--strategy", "patchwise",
        "--out", out.to_str().unwrap(),
    ]));
    assert_eq!(text, std::fs::read_to_string(out.join("attack.txt")).unwrap());
    assert_eq!(text.lines().count(), 9);
    assert!(out.join("recon-i.pgm").is_file() && out.join("originals.pgm").is_file());
}
