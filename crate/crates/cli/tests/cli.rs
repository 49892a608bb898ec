use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sourcerank"))
}

fn sample_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sample/sample.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pipeline(out: &Path, args: &[&str]) -> Output {
    let config = sample_config();
    let mut full = vec!["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    full.extend_from_slice(args);
    run(&full)
}

#[test]
fn full_run_prints_three_systems() {
    let dir = tempfile::tempdir().unwrap();
    let out = pipeline(dir.path(), &["run"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    for system in ["DER", "MRF", "MRF-weighted"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{system} "))), "{text}");
    }
    for stage in ["ingest", "split", "index", "retrieve", "rerank", "evaluate"] {
        assert!(dir.path().join(stage).join("manifest.json").is_file(), "{stage}");
    }
}

#[test]
fn stages_run_one_by_one_and_retrieve_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["ingest", "split", "index", "retrieve"] {
        ok(&pipeline(dir.path(), &[stage]));
    }
    let path = dir.path().join("retrieve/retrieval.jsonl");
    let first = std::fs::read(&path).unwrap();
    ok(&pipeline(dir.path(), &["retrieve"]));
    assert_eq!(first, std::fs::read(&path).unwrap());
    ok(&pipeline(dir.path(), &["rerank", "--ranker", "oracle"]));
    ok(&pipeline(dir.path(), &["rerank", "--ranker", "oracle"]));
    let out = pipeline(dir.path(), &["evaluate"]);
    assert_eq!(out.status.code(), Some(1), "ranker flag changed the rerank settings");
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    ok(&pipeline(dir.path(), &["evaluate", "--force", "--k", "5,10"]));
}

#[test]
fn evaluate_refuses_a_changed_seed() {
    let dir = tempfile::tempdir().unwrap();
    ok(&pipeline(dir.path(), &["run"]));
    let out = pipeline(dir.path(), &["--seed", "99", "evaluate"]);
    assert_eq!(out.status.code(), Some(1));
    ok(&pipeline(dir.path(), &["--seed", "99", "evaluate", "--force"]));
}

#[test]
fn ad_hoc_query_lists_sources() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["ingest", "split", "index"] {
        ok(&pipeline(dir.path(), &[stage]));
    }
    let out = pipeline(dir.path(), &["retrieve", "--query", "kalolo kaloru", "--top", "3", "--model", "cer"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["rank"], 1);
    assert!(lines[0]["log_score"].as_f64().unwrap() >= lines[2]["log_score"].as_f64().unwrap());
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let d = dir.path().join(name);
        ok(&run(&["--seed", "7", "synth", "--dir", d.to_str().unwrap(), "--sources", "50", "--docs", "500"]));
        files.push(std::fs::read(d.join("corpus.jsonl")).unwrap());
        files.push(std::fs::read(d.join("embeddings.txt")).unwrap());
    }
    assert_eq!(files[0], files[2]);
    assert_eq!(files[1], files[3]);
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&["--out", dir.path().to_str().unwrap(), "index"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("hint: run `sourcerank split` first"));

    ok(&pipeline(dir.path(), &["run"]));
    let endpoint = bin()
        .args(["--config", sample_config().to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .args(["rerank", "--ranker", "endpoint"])
        .env_remove("SOURCERANK_ENDPOINT_URL")
        .env_remove("SOURCERANK_API_KEY")
        .output()
        .unwrap();
    assert_eq!(endpoint.status.code(), Some(3));
    let replay = pipeline(dir.path(), &["replay", "--log", "/no/such/log.jsonl"]);
    assert_eq!(replay.status.code(), Some(1));
}

/// Answers each chat request by echoing the last list in its prompt.
fn stub_endpoint() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; length];
            if reader.read_exact(&mut body).is_err() {
                continue;
            }
            let request: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let prompt = request["messages"]
                .as_array()
                .and_then(|m| m.last())
                .and_then(|m| m["content"].as_str())
                .unwrap_or("")
                .to_string();
            let list = prompt
                .rfind('[')
                .and_then(|i| prompt[i..].find(']').map(|j| prompt[i..=i + j].to_string()))
                .unwrap_or_default();
            let reply = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": list}}]}).to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            );
        }
    });
    format!("http://{addr}/v1/chat/completions")
}

#[test]
fn endpoint_run_replays_byte_identically() {
    let url = stub_endpoint();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("live");
    let log = dir.path().join("responses.jsonl");
    for stage in ["ingest", "split", "index", "retrieve"] {
        ok(&pipeline(&out, &[stage]));
    }
    let live = bin()
        .args(["--config", sample_config().to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(["rerank", "--ranker", "endpoint", "--record", log.to_str().unwrap()])
        .env("SOURCERANK_ENDPOINT_URL", &url)
        .env("SOURCERANK_API_KEY", "test-key")
        .output()
        .unwrap();
    ok(&live);
    let recorded = std::fs::read(out.join("rerank/mrf.jsonl")).unwrap();
    assert!(std::fs::read_to_string(&log).unwrap().lines().count() > 0);

    let replayed = dir.path().join("replayed");
    for stage in ["ingest", "split", "index", "retrieve"] {
        ok(&pipeline(&replayed, &[stage]));
    }
    ok(&pipeline(&replayed, &["replay", "--log", log.to_str().unwrap()]));
    assert_eq!(recorded, std::fs::read(replayed.join("rerank/mrf.jsonl")).unwrap());
    let trace = std::fs::read_to_string(replayed.join("rerank/trace.jsonl")).unwrap();
    assert!(!trace.contains("\"fallback\":\""), "replay fell back");
}
