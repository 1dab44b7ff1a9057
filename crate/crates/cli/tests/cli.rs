use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

fn obfnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obfnet"))
        .args(args)
        .arg("-q")
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = obfnet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

fn prepare(dir: &Path) {
    ok(
        dir,
        &["data", "prepare", "--source", "synth-mnist", "--classes", "3", "--per-class", "40", "--seed", "1", "--out", "d"],
    );
}

fn train(dir: &Path, out: &str) -> String {
    ok(
        dir,
        &["train", "infnet", "--arch", "mnist-im", "--data", "d", "--epochs", "10", "--seed", "1", "--out", out],
    )
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(dir: &Path, model: &str) -> (Server, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_obfnet"))
        .args(["serve", "--model", model, "--bind", "127.0.0.1:0", "-q"])
        .current_dir(dir)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
    (Server(child), addr)
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(obfnet(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(obfnet(dir.path(), &["eval", "--bogus"]).status.code(), Some(2));
    assert_eq!(obfnet(dir.path(), &["modelinfo"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_are_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.onet"), b"JUNKJUNKJUNK").unwrap();
    let out = obfnet(dir.path(), &["modelinfo", "bad.onet"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[bad-magic]: "), "{err}");
}

#[test]
fn training_is_reproducible_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let a = train(d, "a.onet");
    train(d, "b.onet");
    assert_eq!(std::fs::read(d.join("a.onet")).unwrap(), std::fs::read(d.join("b.onet")).unwrap());
    assert_eq!(value(&a, "test_accuracy"), "1.000000");
    let csv = std::fs::read_to_string(d.join("a.epochs.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,train_loss,train_accuracy,val_accuracy,seconds"));
    assert_eq!(csv.lines().count(), 11);

    let eval = ok(d, &["eval", "--model", "a.onet", "--data", "d", "--out", "ev"]);
    assert_eq!(value(&eval, "accuracy"), "1.000000");
    assert!(d.join("ev/confusion.csv").is_file());

    let info = ok(d, &["modelinfo", "a.onet", "--rates", "10e6,100e6"]);
    let bytes: f64 = value(&info, "file_bytes").parse().unwrap();
    let t: f64 = value(&info, "transfer_seconds@10000000").parse().unwrap();
    assert!((t - bytes * 8.0 / 10e6).abs() < 1e-6);
    let params: usize = value(&info, "params").parse().unwrap();
    // 784*512 + 512 + 512*512 + 512 + 512*3 + 3 for three classes.
    assert_eq!(params, 928_771);

    let bench = ok(d, &["bench", "--model", "a.onet", "--batch-sizes", "1,2", "--runs", "3", "--out", "b"]);
    assert_eq!(bench.lines().count(), 3);
    assert!(d.join("b/bench.csv").is_file());
}

#[test]
fn edge_matches_eval_through_a_live_server() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    train(d, "m.onet");
    ok(
        d,
        &[
            "train", "obfnet-set", "--arch", "mnist-om", "--hidden", "16", "--infnet", "m.onet", "--data", "d",
            "--epochs", "10", "--count", "2", "--seed", "3", "--out", "set",
        ],
    );
    assert!(d.join("set/manifest.txt").is_file());
    let eval = ok(d, &["eval", "--model", "m.onet", "--data", "d"]);
    let (_server, addr) = start_server(d, "m.onet");
    let opt_out = ok(d, &["edge", "--server", &addr, "--set", "set", "--input", "d", "--opt-out", "--out", "e"]);
    assert_eq!(value(&opt_out, "accuracy"), value(&eval, "accuracy"));
    assert_eq!(value(&opt_out, "samples"), value(&eval, "total"));
    let opt_in = ok(d, &["edge", "--server", &addr, "--set", "set", "--input", "d", "--seed", "5"]);
    assert_eq!(value(&opt_in, "mode"), "opt-in");
    let acc: f64 = value(&opt_in, "accuracy").parse().unwrap();
    assert!(acc >= 0.9, "{opt_in}");

    let metrics = ok(d, &["metrics", "--set", "set", "--data", "d", "--out", "met"]);
    assert!(value(&metrics, "mean_abs_correlation").parse::<f64>().unwrap() <= 1.0);
    for f in ["metrics.txt", "metrics.json", "grid.pgm"] {
        assert!(d.join("met").join(f).is_file(), "{f}");
    }

    let missing = obfnet(d, &["edge", "--server", &addr, "--input", "d"]);
    assert_eq!(missing.status.code(), Some(1));
}
