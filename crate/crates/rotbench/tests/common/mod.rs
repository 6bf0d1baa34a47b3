#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rotbench::format::{read_catalog, sha256_hex};
use rotbench_core::{Catalog, TestCase};

/// Seed the demo script was written against.
pub const DEMO_SEED: u64 = 7;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn demo_catalog() -> Catalog {
    read_catalog(&fixture("demo_catalog.json")).unwrap()
}

/// `n` valid cases made by cycling the demo cases under fresh ids.
pub fn scaled_cases(n: usize) -> Vec<TestCase> {
    let demo = demo_catalog().cases;
    (0..n)
        .map(|i| TestCase {
            id: format!("q{:03}", i + 1),
            ..demo[i % demo.len()].clone()
        })
        .collect()
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rotbench"))
}

pub fn run_cli(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    out
}

pub fn run_ok(args: &[&str]) -> String {
    let out = run_cli(args);
    assert!(
        out.status.success(),
        "rotbench {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Relative path → SHA-256 of every file below `dir`.
pub fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, sha256_hex(&std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny chat-completion server. The first `fail_first` requests get a 500;
/// requests past `hang_after` never get an answer. Every answer is derived
/// from the request body, so reruns produce identical transcripts.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
    pub auth_headers: Arc<Mutex<Vec<String>>>,
    pub bodies: Arc<Mutex<Vec<serde_json::Value>>>,
}

#[derive(Clone, Copy, Default)]
pub struct StubBehavior {
    pub fail_first: usize,
    pub hang_after: Option<usize>,
}

impl StubServer {
    pub fn start(behavior: StubBehavior) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let auth_headers = Arc::new(Mutex::new(Vec::new()));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (r, a, b) = (requests.clone(), auth_headers.clone(), bodies.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (r, a, b) = (r.clone(), a.clone(), b.clone());
                thread::spawn(move || handle(stream, behavior, &r, &a, &b));
            }
        });
        Self {
            url,
            requests,
            auth_headers,
            bodies,
        }
    }
}

fn handle(
    mut stream: TcpStream,
    behavior: StubBehavior,
    requests: &AtomicUsize,
    auth: &Mutex<Vec<String>>,
    bodies: &Mutex<Vec<serde_json::Value>>,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut content_length = 0;
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let (name, value) = line.split_once(':').unwrap_or((line, ""));
        match name.to_ascii_lowercase().as_str() {
            "content-length" => content_length = value.trim().parse().unwrap_or(0),
            "authorization" => auth.lock().unwrap().push(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; content_length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let n = requests.fetch_add(1, Ordering::SeqCst);
    let json: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
    bodies.lock().unwrap().push(json.clone());

    if behavior.hang_after.is_some_and(|h| n >= h) {
        thread::sleep(Duration::from_secs(120));
        return;
    }
    let (status, payload) = if n < behavior.fail_first {
        ("500 Internal Server Error", r#"{"error":"injected failure"}"#.to_string())
    } else {
        let digest = &sha256_hex(&serde_json::to_vec(&json["messages"]).unwrap())[..12];
        let content = format!("Thought: stub\nAction: finish\nAction Input: {{\"answer\": \"{digest}\"}}");
        (
            "200 OK",
            serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string(),
        )
    };
    let _ = write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let _ = stream.flush();
}
