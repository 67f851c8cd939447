//! Minimal chat-completions endpoint on a local socket.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

pub struct Captured {
    pub body: Value,
    pub authorization: Option<String>,
}

pub struct MockLlm {
    pub endpoint: String,
    pub hits: Arc<AtomicUsize>,
    pub requests: Arc<Mutex<Vec<Captured>>>,
}

type Responder = dyn Fn(usize, &Value) -> (u16, Value) + Send + Sync;

impl MockLlm {
    /// Serves forever on an ephemeral port; `respond` gets the 0-based hit
    /// index and the request body.
    pub fn start(respond: impl Fn(usize, &Value) -> (u16, Value) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let respond: Arc<Responder> = Arc::new(respond);
        let (h, r) = (hits.clone(), requests.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let (mut len, mut auth) = (0usize, None);
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    if lower.starts_with("authorization:") {
                        auth = Some(line["authorization:".len()..].trim().to_string());
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).ok();
                let body: Value = serde_json::from_slice(&buf).unwrap_or(Value::Null);
                let i = h.fetch_add(1, Ordering::SeqCst);
                let (status, reply) = respond(i, &body);
                r.lock().unwrap().push(Captured { body, authorization: auth });
                let payload = reply.to_string();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            }
        });
        Self { endpoint, hits, requests }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

pub fn chat_reply(content: &str) -> Value {
    json!({"choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]})
}

/// Well-formed replies for every layer: wisdom echoes the draft line.
pub fn echo_reply(body: &Value) -> Value {
    let user = body["messages"][1]["content"].as_str().unwrap_or_default();
    let content = match user.lines().find_map(|l| l.strip_prefix("Draft: ")) {
        Some(draft) => json!({"text": draft, "rationale": "mock"}).to_string(),
        None => json!({"rationale": "mock rationale", "generalizability": "mock"}).to_string(),
    };
    chat_reply(&content)
}
