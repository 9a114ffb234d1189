use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sketchless"));
    cmd.env("RUST_LOG", "warn");
    for (var, _) in sketchless::service::ENV_OVERRIDES {
        cmd.env_remove(var);
    }
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn sketchless")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn make_toy_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let args = |out: &Path| {
        vec!["make-toy", "--n", "20", "--size", "64", "--frames", "10", "--seed", "1", "--out"]
            .into_iter()
            .map(String::from)
            .chain([s(out).to_string()])
            .collect::<Vec<_>>()
    };
    let argv = args(&a);
    ok(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    let first = tree(&a);
    assert_eq!(first.keys().filter(|k| k.starts_with("photos")).count(), 20);
    assert!(first.contains_key(Path::new("run.toml")));

    std::fs::remove_dir_all(&a).unwrap();
    ok(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(tree(&a), first, "rerun into the same directory is byte-identical");

    let b = dir.path().join("b");
    let argv = args(&b);
    ok(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    let strip = |t: BTreeMap<PathBuf, Vec<u8>>| {
        t.into_iter()
            .filter(|(k, _)| !k.to_string_lossy().ends_with(".manifest.json"))
            .collect::<BTreeMap<_, _>>()
    };
    assert_eq!(strip(tree(&b)), strip(first));
}

#[test]
fn train_stage2_without_stage1_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["make-toy", "--n", "3", "--size", "32", "--frames", "4", "--out", s(&data)]);
    ok(&["gen-episodes", "--data", s(&data)]);
    let missing = dir.path().join("missing.ckpt");
    let out = run(&["train-stage2", "--data", s(&data), "--stage1", s(&missing), "--out", s(&dir.path().join("s2.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stage-1 checkpoint") && stderr.contains("missing.ckpt"), "{stderr}");
    assert!(!dir.path().join("s2.ckpt").exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["make-toy", "--out", s(dir.path()), "--n", "1"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["gen-episodes", "--data", s(dir.path()), "--set", "nonsense=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_corpus_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["make-toy", "--n", "3", "--size", "32", "--frames", "4", "--out", s(&data)]);
    std::fs::remove_file(data.join("photos/id0001.png")).unwrap();
    let out = run(&["gen-episodes", "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http(addr: &str, method: &str, path: &str, body: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let status = raw[9..12].parse().unwrap();
    let body = raw.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

/// The whole toy pipeline followed by a short drawing session over HTTP.
#[test]
fn full_pipeline_smoke() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let s1 = dir.path().join("models/s1.ckpt");
    let s2 = dir.path().join("models/s2.ckpt");
    let eval = dir.path().join("eval");
    ok(&["make-toy", "--n", "8", "--size", "48", "--frames", "6", "--seed", "2", "--out", s(&data)]);
    ok(&["gen-episodes", "--data", s(&data)]);
    ok(&["train-stage1", "--data", s(&data), "--out", s(&s1), "--stage1-epochs", "20", "--d-low", "8"]);
    ok(&["train-stage2", "--data", s(&data), "--stage1", s(&s1), "--out", s(&s2), "--stage2-epochs", "5", "--d-low", "8"]);
    let table = ok(&[
        "eval", "--data", s(&data), "--stage1", s(&s1), "--stage2", s(&s2), "--out", s(&eval), "--split", "all", "--dims", "8",
    ]);
    assert!(table.contains("ours") && table.contains("b1"), "{table}");
    for method in ["ours", "b1"] {
        let report: serde_json::Value =
            serde_json::from_slice(&std::fs::read(eval.join(format!("{method}_d8.json"))).unwrap()).unwrap();
        for key in ["m_at_A", "m_at_B", "w_at_mA", "w_at_mB"] {
            let v = report[key].as_f64().unwrap();
            assert!((0.0..=100.0).contains(&v), "{method} {key} = {v}");
        }
        let curve = std::fs::read_to_string(eval.join(format!("{method}_d8_curve.csv"))).unwrap();
        assert_eq!(curve.lines().count(), 7);
    }
    for m in [s1.with_file_name("s1.ckpt.manifest.json"), eval.join("eval.manifest.json")] {
        let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(&m).unwrap()).unwrap();
        assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
        assert!(!manifest["inputs"].as_object().unwrap().is_empty());
        assert!(!manifest["version"].as_str().unwrap().is_empty());
    }

    let mut child = bin()
        .args(["serve", "--stage1", s(&s1), "--stage2", s(&s2), "--corpus", s(&data), "--port", "0", "--canvas-size", "48"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let _server = Server(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").expect(&line).to_string();

    let (status, body) = http(&addr, "GET", "/api/v1/healthz", "");
    assert_eq!(status, 200, "{body}");
    let (status, body) = http(&addr, "POST", "/api/v1/sessions", r#"{"target_id":"id0002","k":3}"#);
    assert_eq!(status, 201, "{body}");
    let session: serde_json::Value = serde_json::from_str(&body).unwrap();
    let id = session["session_id"].as_str().unwrap();
    let (status, body) = http(
        &addr,
        "POST",
        &format!("/api/v1/sessions/{id}/strokes"),
        r#"{"points":[{"x":5,"y":5},{"x":40,"y":30}]}"#,
    );
    assert_eq!(status, 200, "{body}");
    let result: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(result["top_k"].as_array().unwrap().len(), 3);
    assert!(result["target_rank"].as_u64().unwrap() >= 1);
    assert_eq!(http(&addr, "DELETE", &format!("/api/v1/sessions/{id}"), "").0, 204);
    assert!(started.elapsed() < Duration::from_secs(15 * 60));
}
