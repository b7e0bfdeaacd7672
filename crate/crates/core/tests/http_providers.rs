//! Remote embedding and judge clients against a local one-shot HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};
use trialcf_core::similarity::{Embedder, HttpEmbedder, HttpJudge, Judge, SimilarityError};

#[derive(Debug, Clone)]
struct Seen {
    authorization: Option<String>,
    body: Value,
}

/// Serves one canned `(status, body)` response per connection, in order,
/// and records what each request carried.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = std::thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                authorization: auth,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn texts(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[test]
fn embedder_round_trip_with_key() {
    let (url, seen, h) = serve(vec![(200, json!({"embeddings": [[1.0, 0.0], [0.6, 0.8]]}).to_string())]);
    let e = HttpEmbedder::new(&url, Some("secret".into()), Duration::from_secs(5));
    let out = e.embed_batch("condition", &texts(&["asthma", "copd"])).unwrap();
    assert_eq!(out, vec![vec![1.0, 0.0], vec![0.6, 0.8]]);
    h.join().unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer secret"));
    assert_eq!(seen[0].body, json!({"texts": ["asthma", "copd"], "variable": "condition"}));
}

#[test]
fn embedder_retries_server_errors() {
    let (url, seen, h) = serve(vec![
        (503, "{}".into()),
        (200, json!({"embeddings": [[0.5, 0.5]]}).to_string()),
    ]);
    let e = HttpEmbedder::new(&url, None, Duration::from_secs(5)).with_retries(2, Duration::from_millis(1));
    assert_eq!(e.embed_batch("phase", &texts(&["Phase 3"])).unwrap(), vec![vec![0.5, 0.5]]);
    h.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 2);
    assert_eq!(seen.lock().unwrap()[0].authorization, None);
}

#[test]
fn embedder_gives_up_after_retries() {
    let (url, _, h) = serve(vec![(500, "{}".into()), (500, "{}".into())]);
    let e = HttpEmbedder::new(&url, None, Duration::from_secs(5)).with_retries(1, Duration::from_millis(1));
    let err = e.embed_batch("phase", &texts(&["Phase 3"])).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, SimilarityError::Provider(ref m) if m.contains("after 2 attempts")), "{err}");
}

#[test]
fn embedder_rejects_bad_responses() {
    let (url, _, h) = serve(vec![
        (200, json!({"embeddings": [[1.0]]}).to_string()),
        (200, json!({"embeddings": [[1.0, 2.0], [1.0]]}).to_string()),
        (200, "not json".into()),
    ]);
    let e = HttpEmbedder::new(&url, None, Duration::from_secs(5)).with_retries(0, Duration::ZERO);
    let two = texts(&["a", "b"]);
    assert!(matches!(e.embed_batch("v", &two), Err(SimilarityError::Provider(_))));
    assert!(matches!(e.embed_batch("v", &two), Err(SimilarityError::DimensionMismatch(2, 1))));
    assert!(matches!(e.embed_batch("v", &two), Err(SimilarityError::Provider(_))));
    h.join().unwrap();
    assert!(matches!(e.embed_batch("v", &texts(&[" "])), Err(SimilarityError::EmptyText)));
}

#[test]
fn judge_round_trip() {
    let (url, seen, h) = serve(vec![
        (200, json!({"aligned": true}).to_string()),
        (200, json!({"aligned": false}).to_string()),
    ]);
    let j = HttpJudge::new(&url, Some("k".into()), Duration::from_secs(5));
    assert!(j.aligned("condition", "asthma", "moderate asthma").unwrap());
    assert!(!j.aligned("condition", "asthma", "diabetes").unwrap());
    h.join().unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen[1].body, json!({"a": "asthma", "b": "diabetes", "variable": "condition"}));
    assert_eq!(seen[1].authorization.as_deref(), Some("Bearer k"));
}

#[test]
fn unreachable_service_is_a_provider_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let j = HttpJudge::new(&format!("http://127.0.0.1:{port}/"), None, Duration::from_secs(2))
        .with_retries(0, Duration::ZERO);
    assert!(matches!(j.aligned("v", "a", "b"), Err(SimilarityError::Provider(_))));
}
