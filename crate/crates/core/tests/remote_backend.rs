//! The chat-completion backend against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use bmc_core::bridging::{bridge_dataset, BackendError, ModifierBackend, RemoteBackend, RemoteConfig};
use bmc_core::data::PreferenceRecord;
use bmc_core::vocab::{encode, Vocabulary};
use serde_json::{json, Value};

struct Captured {
    body: Value,
    authorization: Option<String>,
}

/// Serves one scripted `(status, body)` per connection, then stops.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = std::thread::spawn(move || {
        for (status, body) in script {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured {
                body: serde_json::from_slice(&buf).unwrap(),
                authorization,
            });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen, handle)
}

fn chat(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn config(url: String, key_env: &str) -> RemoteConfig {
    RemoteConfig {
        base_url: url,
        model: "test-model".into(),
        api_key_env: key_env.into(),
        max_retries: 2,
        timeout_secs: 10,
        max_in_flight: 1,
        backoff_ms: 1,
        ..RemoteConfig::default()
    }
}

fn record() -> PreferenceRecord {
    PreferenceRecord::new(encode(b"2+2?"), encode(b"It is 4."), encode(b"It is 5."))
}

#[test]
fn retries_server_errors_then_bridges() {
    let (url, seen, server) = serve(vec![
        (503, "{}".into()),
        (200, chat("Sure.\n<revised>It is 4.</revised>")),
    ]);
    std::env::set_var("BMC_TEST_KEY_RETRY", "secret");
    let backend = RemoteBackend::new(config(url, "BMC_TEST_KEY_RETRY"), Vocabulary::byte_level()).unwrap();
    let (out, report) = bridge_dataset(&[record()], &backend, 1.0, 0).unwrap();
    server.join().unwrap();
    assert_eq!(report.modified, 1);
    assert_eq!(out[0].pseudo_chosen.as_deref(), Some(&encode(b"It is 4.")[..]));
    assert_eq!(out[0].diff_chosen.as_deref(), Some(&[6][..]));

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].authorization.as_deref(), Some("Bearer secret"));
    assert_eq!(seen[1].body["model"], "test-model");
    let message = seen[1].body["messages"][0]["content"].as_str().unwrap();
    assert!(message.contains("2+2?") && message.contains("It is 5."));
}

#[test]
fn keep_verdict_filters_the_pair() {
    let (url, _, server) = serve(vec![(200, chat("KEEP_ORIGINAL"))]);
    let backend = RemoteBackend::new(config(url, "BMC_TEST_KEY_UNSET"), Vocabulary::byte_level()).unwrap();
    let (out, report) = bridge_dataset(&[record()], &backend, 1.0, 0).unwrap();
    server.join().unwrap();
    assert_eq!(report.filtered, 1);
    assert!(out[0].filtered);
    assert!(out[0].pseudo_chosen.is_none());
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, server) = serve(vec![(400, "{\"error\":\"bad\"}".into())]);
    let backend = RemoteBackend::new(config(url, "BMC_TEST_KEY_UNSET"), Vocabulary::byte_level()).unwrap();
    let err = backend.complete("hi").unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, BackendError::Transport { attempts: 1, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_reply_is_reported() {
    let (url, _, server) = serve(vec![(200, chat("no tags here"))]);
    let backend = RemoteBackend::new(config(url, "BMC_TEST_KEY_UNSET"), Vocabulary::byte_level()).unwrap();
    let rec = record();
    let req = bmc_core::bridging::ModifyRequest {
        task: bmc_core::bridging::ModifyTask::Improve,
        prompt: &rec.prompt,
        chosen: &rec.chosen,
        rejected: &rec.rejected,
    };
    let err = backend.modify(&req).unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, BackendError::MalformedReply { .. }));
}

#[test]
fn unreachable_server_marks_records_failed() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let backend = RemoteBackend::new(
        config(format!("http://127.0.0.1:{port}/v1"), "BMC_TEST_KEY_UNSET"),
        Vocabulary::byte_level(),
    )
    .unwrap();
    let (out, report) = bridge_dataset(&[record(), record()], &backend, 1.0, 0).unwrap();
    assert_eq!(report.failed, 2);
    assert!(out.iter().all(|r| r.filtered));
}
