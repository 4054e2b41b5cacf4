//! Client behaviour against a local fake HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use errdisc_llm::{render_summary_prompt, ChatClient, ChatClientConfig, FewShot, LlmError, PromptOptions};
use serde_json::Value;

struct Captured {
    headers: Vec<String>,
    body: String,
}

/// Serves one canned (status, body) pair per connection, in order, and
/// reports what each request carried.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            tx.send(Captured { headers, body: String::from_utf8(buf).unwrap() }).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn examples() -> Vec<FewShot> {
    (1..=3).map(|i| FewShot { input: format!("dialogue {i}"), output: format!("summary {i}") }).collect()
}

fn fixture() -> Value {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/replay_exchange.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn replayed_exchange_parses_to_recorded_text() {
    let rec = fixture();
    let (url, rx) = serve(vec![(200, rec["response"].to_string())]);
    let token_env = "ERRDISC_TEST_REPLAY_TOKEN";
    std::env::set_var(token_env, "s3cret-value");
    let cfg = ChatClientConfig { endpoint: url, token_env: token_env.into(), timeout_secs: 10, ..ChatClientConfig::default() };
    let client = ChatClient::new(cfg.clone());
    let context = "User: Can you book a table for two at 7?\nAgent: The weather in Paris is sunny today.";
    let bundle = render_summary_prompt(context, None, &examples(), &PromptOptions::default()).unwrap();
    assert_eq!(bundle.user_payload, rec["request"]["user_payload"].as_str().unwrap());

    let text = client.generate(&bundle).unwrap();
    assert_eq!(text, rec["response"]["choices"][0]["message"]["content"].as_str().unwrap());

    let got = rx.recv().unwrap();
    assert!(got.headers.iter().any(|h| h == "authorization: Bearer s3cret-value" || h == "Authorization: Bearer s3cret-value"));
    let sent: Value = serde_json::from_str(&got.body).unwrap();
    assert_eq!(sent["model"], rec["request"]["model"]);
    assert_eq!(sent["temperature"], rec["request"]["temperature"]);
    let msgs = sent["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 8);
    assert_eq!(msgs.last().unwrap()["content"], rec["request"]["user_payload"]);

    // The token lives only in the environment, never in serialized state.
    assert!(!serde_json::to_string(&cfg).unwrap().contains("s3cret"));
    assert!(!format!("{cfg:?}").contains("s3cret"));
    assert!(!serde_json::to_string(&bundle).unwrap().contains("s3cret"));
}

#[test]
fn transient_statuses_are_retried_over_http() {
    let rec = fixture();
    let (url, rx) = serve(vec![
        (503, "overloaded".into()),
        (429, "slow down".into()),
        (200, rec["response"].to_string()),
    ]);
    let cfg = ChatClientConfig { endpoint: url, max_retries: 3, backoff_ms: 1, timeout_secs: 10, ..ChatClientConfig::default() };
    let bundle = render_summary_prompt("User: hi\nAgent: bye", None, &examples(), &PromptOptions::default()).unwrap();
    assert!(ChatClient::new(cfg).generate(&bundle).is_ok());
    assert_eq!(rx.try_iter().count(), 3);
}

#[test]
fn client_error_carries_body_excerpt() {
    let (url, _rx) = serve(vec![(400, r#"{"error":"unknown model"}"#.into())]);
    let cfg = ChatClientConfig { endpoint: url, backoff_ms: 1, timeout_secs: 10, ..ChatClientConfig::default() };
    let bundle = render_summary_prompt("User: hi\nAgent: bye", None, &examples(), &PromptOptions::default()).unwrap();
    match ChatClient::new(cfg).generate(&bundle) {
        Err(LlmError::Api { status: 400, excerpt }) => assert!(excerpt.contains("unknown model")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = ChatClientConfig {
        endpoint: format!("http://127.0.0.1:{port}/v1/chat/completions"),
        max_retries: 2,
        backoff_ms: 1,
        timeout_secs: 5,
        ..ChatClientConfig::default()
    };
    let bundle = render_summary_prompt("User: hi\nAgent: bye", None, &examples(), &PromptOptions::default()).unwrap();
    assert!(matches!(ChatClient::new(cfg).generate(&bundle), Err(LlmError::Transport { attempts: 3, .. })));
}
