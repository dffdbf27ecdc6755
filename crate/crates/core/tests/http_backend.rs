#![cfg(feature = "http")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use distfid::backends::http::HttpBackend;
use distfid::backends::{Backend, BackendConfig, BackendError, BackendKind, GenerationRequest, HttpSettings};
use distfid::dist::{make_distribution, render_prompt, Alphabet, PromptSpec};
use distfid::harness::analyze_transcript;
use serde_json::json;

struct Captured {
    headers: String,
    body: String,
}

/// Serves the scripted `(status, body)` responses in order, one per
/// connection, and records what it received.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push_str(&line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured {
                headers,
                body: String::from_utf8(buf).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen, handle)
}

fn backend(endpoint: String, retries: u32, key_env: Option<&str>) -> HttpBackend {
    let settings = HttpSettings {
        endpoint,
        api_key_env: key_env.map(String::from),
    };
    let mut cfg = BackendConfig::new("mock", BackendKind::Http(settings.clone()));
    cfg.model = "mock-model".into();
    cfg.retries = retries;
    cfg.timeout_secs = 5;
    HttpBackend::new(cfg, settings)
        .unwrap()
        .with_backoff_base(Duration::from_millis(1))
}

fn request() -> GenerationRequest {
    let task = make_distribution(Alphabet::numeric(1, 4).unwrap(), vec![0.1, 0.7, 0.1, 0.1]).unwrap();
    let spec = PromptSpec::simulated(task.clone()).with_sample_count(3);
    GenerationRequest {
        trial_id: "mock/extreme/0".into(),
        prompt: render_prompt(&spec).unwrap(),
        target: Some(task),
        sample_count: 3,
    }
}

fn top(entries: &[(&str, f64)]) -> serde_json::Value {
    json!(entries
        .iter()
        .map(|(t, p)| json!({"token": t, "logprob": p.ln()}))
        .collect::<Vec<_>>())
}

fn completion(finish: &str) -> String {
    let steps = vec![
        json!({"token": "2", "logprob": 0.6f64.ln(), "top_logprobs": top(&[("2", 0.6), ("1", 0.2), ("3", 0.1), ("x", 0.05), ("y", 0.03), ("4", 0.02)])}),
        json!({"token": ",", "logprob": 0.0, "top_logprobs": top(&[(",", 1.0)])}),
        json!({"token": " 1", "logprob": 0.5f64.ln(), "top_logprobs": top(&[(" 1", 0.5), (" 2", 0.5)])}),
        json!({"token": ",", "logprob": 0.0, "top_logprobs": top(&[(",", 1.0)])}),
        json!({"token": " 2", "logprob": 0.9f64.ln(), "top_logprobs": top(&[(" 2", 0.9), ("hello", 0.1)])}),
    ];
    json!({
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": "2, 1, 2"},
            "finish_reason": finish,
            "logprobs": {"content": steps}
        }]
    })
    .to_string()
}

#[test]
fn maps_logprobs_into_steps() {
    std::env::set_var("DISTFID_TEST_TOKEN", "sekrit");
    let (url, seen, h) = serve(vec![(200, completion("stop"))]);
    let b = backend(url, 3, Some("DISTFID_TEST_TOKEN"));
    let t = b.generate(&request()).unwrap();
    h.join().unwrap();

    assert_eq!(t.output_text, "2, 1, 2");
    assert_eq!(t.steps.len(), 5);
    assert_eq!(t.steps[0].top_entries.len(), 5, "truncated to top_k");
    assert!(!t.meta.truncated);
    assert_eq!(t.meta.model, "mock-model");

    let seen = seen.lock().unwrap();
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["logprobs"], true);
    assert_eq!(body["top_logprobs"], 5);
    assert_eq!(body["temperature"], 1.0);
    assert!(seen[0].headers.contains("Bearer sekrit"));

    // The sixth entry ("4") fell outside the top 5 and must map to 0.
    let task = request().target.unwrap();
    let rec = analyze_transcript(&t, &task);
    let d = rec.steps[0].distribution.as_ref().unwrap();
    assert!((d.probs[1] - 0.6 / 0.9).abs() < 1e-12);
    assert_eq!(d.probs[3], 0.0);
    assert_eq!(rec.accepted_samples, 3);
}

#[test]
fn length_finish_marks_truncation() {
    let (url, _, h) = serve(vec![(200, completion("length"))]);
    let t = backend(url, 1, None).generate(&request()).unwrap();
    h.join().unwrap();
    assert!(t.meta.truncated);
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen, h) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, completion("stop")),
    ]);
    let t = backend(url, 3, None).generate(&request());
    h.join().unwrap();
    assert!(t.is_ok());
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_retry_budget() {
    let (url, seen, h) = serve(vec![(500, "boom".into()), (500, "boom".into())]);
    let err = backend(url, 2, None).generate(&request()).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, BackendError::Provider { status: 500, .. }));
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn logprobs_rejection_is_not_retried() {
    let (url, seen, h) = serve(vec![(400, r#"{"error": "logprobs are not supported for this model"}"#.into())]);
    let err = backend(url, 3, None).generate(&request()).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, BackendError::ProviderLogprobsUnavailable(_)));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn missing_logprobs_in_response() {
    let body = json!({"choices": [{"message": {"content": "1, 2"}, "finish_reason": "stop"}]}).to_string();
    let (url, _, h) = serve(vec![(200, body)]);
    let err = backend(url, 1, None).generate(&request()).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, BackendError::ProviderLogprobsUnavailable(_)));
}

#[test]
fn missing_token_env_fails_before_network() {
    let b = backend("http://127.0.0.1:9/v1".into(), 1, Some("DISTFID_SURELY_UNSET_VAR"));
    assert!(matches!(b.generate(&request()), Err(BackendError::MissingToken(_))));
}

#[test]
fn unreachable_endpoint_is_network_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let b = backend(format!("http://127.0.0.1:{port}/v1"), 2, None);
    match b.generate(&request()) {
        Err(BackendError::Network { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("{other:?}"),
    }
}
