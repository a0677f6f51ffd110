//! Remote logit provider against a local scripted HTTP server.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use proxysteer::providers::{LogitProvider, ProviderError, RemoteConfig, RemoteProvider};
use proxysteer::retry::RetryPolicy;
use proxysteer::steer::{decode_unsteered, DecodingConfig};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const TOKENS: [&str; 4] = ["a", "b", "c", "<eos>"];

/// Hash of a token list, computed here independently of the library.
fn oracle_hash(tokens: &[&str]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    hex::encode(h.finalize())
}

/// What the server does with the n-th (0-based) logits request.
type Script = dyn Fn(usize, &Value) -> (u16, Value) + Send + Sync;

struct Server {
    url: String,
    logits_calls: Arc<AtomicUsize>,
    requests: Arc<Mutex<Vec<Value>>>,
}

fn serve(script: Box<Script>) -> Server {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let logits_calls = Arc::new(AtomicUsize::new(0));
    let requests = Arc::new(Mutex::new(Vec::new()));
    let (calls, reqs) = (logits_calls.clone(), requests.clone());
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let (status, body) = match req.url() {
                "/vocab" => (
                    200,
                    json!({"tokens": TOKENS, "vocab_hash": oracle_hash(&TOKENS), "eos_token_id": 3}),
                ),
                "/logits" => {
                    let mut text = String::new();
                    req.as_reader().read_to_string(&mut text).unwrap();
                    let v: Value = serde_json::from_str(&text).unwrap();
                    reqs.lock().unwrap().push(v.clone());
                    script(calls.fetch_add(1, Ordering::SeqCst), &v)
                }
                _ => (404, json!({})),
            };
            let resp = tiny_http::Response::from_string(body.to_string()).with_status_code(status);
            let _ = req.respond(resp);
        }
    });
    Server {
        url,
        logits_calls,
        requests,
    }
}

fn fast_retry(max_attempts: u32) -> RemoteConfig {
    RemoteConfig {
        timeout_ms: 5_000,
        retry: RetryPolicy {
            max_attempts,
            initial_backoff_ms: 1,
            multiplier: 1.0,
        },
    }
}

fn ok_logits(values: Vec<f64>) -> (u16, Value) {
    (
        200,
        json!({"logits": values, "vocab_hash": oracle_hash(&TOKENS)}),
    )
}

#[test]
fn passes_logits_through_and_decodes() {
    // `go` continues with a, then b, then end of sequence
    let s = serve(Box::new(|_, req| {
        let ctx = req["context"].as_str().unwrap().to_string();
        ok_logits(match ctx.as_str() {
            "go" => vec![2.0, 0.5, 0.0, -1.0],
            "go a" => vec![0.0, 3.0, 0.0, -1.0],
            _ => vec![0.0, 0.0, 0.0, 4.0],
        })
    }));
    let p = RemoteProvider::connect(&s.url, fast_retry(1)).unwrap();
    assert_eq!(p.vocabulary().tokens(), TOKENS);
    assert_eq!(p.vocab_hash(), oracle_hash(&TOKENS));
    assert_eq!(p.eos_token_id(), Some(3));
    assert_eq!(p.logits("go").unwrap().values(), &[2.0, 0.5, 0.0, -1.0]);
    let first = s.requests.lock().unwrap()[0].clone();
    assert_eq!(first, json!({"context": "go", "want": "last_token_logits"}));

    let out = decode_unsteered(&p, "go", &DecodingConfig::default()).unwrap();
    assert_eq!(out.text, "a b");
}

#[test]
fn wrong_length_is_a_schema_violation() {
    let s = serve(Box::new(|_, _| ok_logits(vec![1.0, 2.0])));
    let p = RemoteProvider::connect(&s.url, fast_retry(1)).unwrap();
    match p.logits("x") {
        Err(ProviderError::SchemaViolation(msg)) => {
            assert!(msg.contains("expected 4 logits, got 2"), "{msg}")
        }
        other => panic!("unexpected {other:?}"),
    }
    let s = serve(Box::new(|_, _| (200, json!({"logit": [0.0]}))));
    let p = RemoteProvider::connect(&s.url, fast_retry(1)).unwrap();
    assert!(matches!(
        p.logits("x"),
        Err(ProviderError::SchemaViolation(_))
    ));
}

#[test]
fn hash_change_mid_session_is_fatal() {
    let s = serve(Box::new(|n, _| {
        if n == 0 {
            ok_logits(vec![0.0; 4])
        } else {
            (
                200,
                json!({"logits": [0.0, 0.0, 0.0, 0.0], "vocab_hash": oracle_hash(&["a", "b", "c", "d"])}),
            )
        }
    }));
    let p = RemoteProvider::connect(&s.url, fast_retry(3)).unwrap();
    p.logits("x").unwrap();
    match p.logits("x") {
        Err(ProviderError::VocabHashMismatch { expected, actual }) => {
            assert_eq!(expected, oracle_hash(&TOKENS));
            assert_eq!(actual, oracle_hash(&["a", "b", "c", "d"]));
        }
        other => panic!("unexpected {other:?}"),
    }
    // not retried
    assert_eq!(s.logits_calls.load(Ordering::SeqCst), 2);
}

#[test]
fn server_errors_are_retried() {
    let s = serve(Box::new(|n, _| {
        if n < 2 {
            (503, json!({}))
        } else {
            ok_logits(vec![1.0; 4])
        }
    }));
    let p = RemoteProvider::connect(&s.url, fast_retry(3)).unwrap();
    assert_eq!(p.logits("x").unwrap().values(), &[1.0; 4]);
    assert_eq!(s.logits_calls.load(Ordering::SeqCst), 3);

    let s = serve(Box::new(|_, _| (500, json!({}))));
    let p = RemoteProvider::connect(&s.url, fast_retry(3)).unwrap();
    match p.logits("x") {
        Err(ProviderError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn client_errors_are_not_retried() {
    let s = serve(Box::new(|_, _| (400, json!({"error": "bad request"}))));
    let p = RemoteProvider::connect(&s.url, fast_retry(5)).unwrap();
    match p.logits("x") {
        Err(ProviderError::Transport { attempts, message }) => {
            assert_eq!(attempts, 1);
            assert!(message.contains("HTTP 400"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(s.logits_calls.load(Ordering::SeqCst), 1);
}

#[test]
fn vocabulary_hash_is_checked_on_connect() {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    thread::spawn(move || {
        for req in server.incoming_requests() {
            let body = json!({"tokens": TOKENS, "vocab_hash": "00"});
            let _ = req.respond(tiny_http::Response::from_string(body.to_string()));
        }
    });
    assert!(matches!(
        RemoteProvider::connect(&url, fast_retry(1)),
        Err(ProviderError::VocabHashMismatch { .. })
    ));
}
