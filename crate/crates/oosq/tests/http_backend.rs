//! The live backend against a throwaway local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use oosq::gateway::{Gateway, HttpBackend, ResponseCache, RetryPolicy};
use oosq_core::{ChatGateway, ChatRequest, GatewayError};

struct Seen {
    auth: Option<String>,
    body: String,
}

/// Serves one canned `(status, body)` per connection, in order, and
/// records what each request carried.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let lower = l.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(l["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { auth, body: String::from_utf8(buf).unwrap() });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn gateway(url: &str, key_var: &str, cache: Option<ResponseCache>) -> Gateway {
    let backend = HttpBackend::new(url, key_var, Duration::from_secs(5));
    Gateway::new(
        Box::new(backend),
        cache,
        RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(1) },
        2,
    )
}

fn set_key(var: &str) {
    // Each test uses its own variable, so concurrent tests do not race.
    std::env::set_var(var, "test-secret");
}

#[test]
fn retries_5xx_and_429_then_succeeds() {
    set_key("OOSQ_HTTP_TEST_KEY_A");
    let (url, seen) = serve(vec![(503, "{}".into()), (429, "{}".into()), (200, ok_body("hello"))]);
    let gw = gateway(&url, "OOSQ_HTTP_TEST_KEY_A", None);
    let req = ChatRequest::new("m", "sys".into(), "hi".into());
    let resp = gw.complete(&req).unwrap();
    assert_eq!(resp.text, "hello");
    assert_eq!(gw.stats.backend_calls(), 3);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer test-secret"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "m");
    assert_eq!(body["messages"][1]["content"], "hi");
}

#[test]
fn gives_up_after_three_retries() {
    set_key("OOSQ_HTTP_TEST_KEY_B");
    let (url, seen) = serve(vec![(500, "{}".into()); 4]);
    let gw = gateway(&url, "OOSQ_HTTP_TEST_KEY_B", None);
    let err = gw.complete(&ChatRequest::new("m", String::new(), "hi".into())).unwrap_err();
    assert!(matches!(err, GatewayError::BackendUnavailable { attempts: 4, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    set_key("OOSQ_HTTP_TEST_KEY_C");
    let (url, seen) = serve(vec![(400, "{\"error\":\"bad\"}".into())]);
    let gw = gateway(&url, "OOSQ_HTTP_TEST_KEY_C", None);
    let err = gw.complete(&ChatRequest::new("m", String::new(), "hi".into())).unwrap_err();
    assert!(matches!(err, GatewayError::Rejected(ref m) if m.contains("400")), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn missing_key_fails_without_a_request() {
    let (url, seen) = serve(vec![]);
    let gw = gateway(&url, "OOSQ_HTTP_TEST_KEY_UNSET", None);
    let err = gw.complete(&ChatRequest::new("m", String::new(), "hi".into())).unwrap_err();
    assert_eq!(err, GatewayError::AuthMissing { variable: "OOSQ_HTTP_TEST_KEY_UNSET".into() });
    assert!(seen.lock().unwrap().is_empty());
}

#[test]
fn live_responses_are_cached() {
    set_key("OOSQ_HTTP_TEST_KEY_D");
    let dir = tempfile::tempdir().unwrap();
    let (url, seen) = serve(vec![(200, ok_body("once"))]);
    let req = ChatRequest::new("m", String::new(), "hi".into());
    let gw = gateway(&url, "OOSQ_HTTP_TEST_KEY_D", Some(ResponseCache::new(dir.path())));
    assert_eq!(gw.complete(&req).unwrap().text, "once");
    // a fresh gateway over the same cache directory never reaches the server
    let gw = gateway(&url, "OOSQ_HTTP_TEST_KEY_D", Some(ResponseCache::new(dir.path())));
    assert_eq!(gw.complete(&req).unwrap().text, "once");
    assert_eq!(gw.stats.backend_calls(), 0);
    assert_eq!(gw.stats.cache_hits(), 1);
    assert_eq!(seen.lock().unwrap().len(), 1);
}
