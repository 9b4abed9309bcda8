//! The model clients against a local HTTP server speaking the wire protocol.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use coderag::dense::EmbedderClient;
use coderag::pipeline::{GenerationConfig, GeneratorClient};
use coderag::query::ProbeClient;
use coderag::rerank::{PickerClient, PickerPrompt};
use coderag::wire::{ClientError, HttpTransport, RemoteEmbedder, RemoteGenerator, RemotePicker, RemoteProbe, Transport};
use serde_json::{json, Value};

type Handler = Box<dyn Fn(&Value) -> (u16, String) + Send + Sync>;

struct Server {
    url: String,
    seen: Arc<Mutex<Vec<Value>>>,
}

/// Serves every connection on a background thread until the test exits.
fn serve(handler: Handler) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; length];
            reader.read_exact(&mut body).unwrap();
            let request: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            assert!(request_line.starts_with("POST /v1 "), "unexpected request line {request_line:?}");
            let (status, reply) = handler(&request);
            log.lock().unwrap().push(request);
            let head = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                reply.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    Server { url, seen }
}

fn transport(s: &Server) -> Arc<dyn Transport> {
    Arc::new(HttpTransport::new(s.url.clone()))
}

#[test]
fn probe_sums_logprobs_and_sends_score_requests() {
    let server = serve(Box::new(|_| (200, json!({"version": 1, "token_logprobs": [-0.5, -0.25, -1.0]}).to_string())));
    let probe = RemoteProbe::new(transport(&server));
    let score = probe.greedy_score("chunk\ntarget", 8).unwrap();
    assert_eq!(score, -1.75);
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen[0]["type"], "score");
    assert_eq!(seen[0]["version"], 1);
    assert_eq!(seen[0]["prompt"], "chunk\ntarget");
    assert_eq!(seen[0]["max_tokens"], 8);
    assert_eq!(seen[0]["want_logprobs"], true);
}

#[test]
fn embedder_learns_dimension_and_rejects_drift() {
    let server = serve(Box::new(|req| {
        let n = if req["text"] == "odd" { 2 } else { 3 };
        (200, json!({"embedding": vec![0.5; n]}).to_string())
    }));
    let e = RemoteEmbedder::new(transport(&server), None);
    assert_eq!(e.dimension().unwrap(), 3);
    assert_eq!(e.embed("x").unwrap(), vec![0.5; 3]);
    assert!(matches!(e.embed("odd"), Err(ClientError::InvalidReply(_))));
    assert_eq!(server.seen.lock().unwrap()[0]["type"], "embed");
}

#[test]
fn picker_renders_prompt_and_parses_reply() {
    let server = serve(Box::new(|_| (200, json!({"text": "2"}).to_string())));
    let picker = RemotePicker::new(transport(&server), PickerPrompt::default());
    assert_eq!(picker.pick("cfg = parse_conf", &["a", "b", "c"]).unwrap(), 1);
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen[0]["type"], "chat");
    assert!(seen[0]["prompt"].as_str().unwrap().contains("cfg = parse_conf"));
}

#[test]
fn generator_passes_limits() {
    let server = serve(Box::new(|_| (200, json!({"text": "ig(path)"}).to_string())));
    let generator = RemoteGenerator::new(transport(&server));
    let config = GenerationConfig { max_new_tokens: 16, temperature: 0.0, max_input_tokens: 512 };
    assert_eq!(generator.generate("cfg = parse_conf", &config).unwrap(), "ig(path)");
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen[0]["type"], "generate");
    assert_eq!(seen[0]["max_tokens"], 16);
}

#[test]
fn server_errors_are_unavailable_and_bad_bodies_invalid() {
    let server = serve(Box::new(|req| match req["prompt"].as_str() {
        Some("fail") => (503, "{}".into()),
        Some("newer") => (200, json!({"version": 2, "text": "x"}).to_string()),
        _ => (200, "not json".into()),
    }));
    let generator = RemoteGenerator::new(transport(&server));
    let config = GenerationConfig::default();
    assert!(matches!(generator.generate("fail", &config), Err(ClientError::Unavailable(_))));
    assert!(matches!(generator.generate("newer", &config), Err(ClientError::InvalidReply(_))));
    assert!(matches!(generator.generate("garbage", &config), Err(ClientError::InvalidReply(_))));
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let probe = RemoteProbe::new(Arc::new(HttpTransport::new(format!("http://127.0.0.1:{port}/"))));
    assert!(matches!(probe.greedy_score("x", 1), Err(ClientError::Unavailable(_))));
}
