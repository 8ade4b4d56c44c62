//! Minimal blocking HTTP/1.1 server for stubbing model endpoints.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};

pub struct Request {
    pub method: String,
    pub path: String,
    pub body: Vec<u8>,
}

impl Request {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

pub struct Reply {
    pub status: u16,
    pub body: String,
}

impl Reply {
    pub fn ok(body: impl Into<String>) -> Self {
        Reply {
            status: 200,
            body: body.into(),
        }
    }

    pub fn status(status: u16, body: impl Into<String>) -> Self {
        Reply {
            status,
            body: body.into(),
        }
    }
}

pub type Handler = dyn Fn(usize, &Request) -> Reply + Send + Sync;

pub struct StubServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    addr: std::net::SocketAddr,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Serves `handler` on an ephemeral localhost port. The handler receives
    /// the zero-based request index.
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(usize, &Request) -> Reply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let (h, s) = (hits.clone(), stop.clone());
        let thread = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let handler = handler.clone();
                let h = h.clone();
                std::thread::spawn(move || serve(stream, &*handler, &h));
            }
        });
        StubServer {
            url: format!("http://{addr}"),
            hits,
            stop,
            addr,
            thread: Some(thread),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve(stream: TcpStream, handler: &Handler, hits: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or("").to_string();
    let path = parts.next().unwrap_or("").to_string();
    let mut content_length = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; content_length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let index = hits.fetch_add(1, Ordering::SeqCst);
    let reply = handler(index, &Request { method, path, body });
    let mut stream = stream;
    let head = format!(
        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        reply.status,
        reply.body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(reply.body.as_bytes());
    let _ = stream.flush();
}

/// Wraps model text in an OpenAI-style chat completion.
pub fn chat_completion(text: &str) -> String {
    json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]})
        .to_string()
}

/// The narrative from a chat-completions request (last user message).
pub fn user_message(req: &Request) -> String {
    req.json()["messages"]
        .as_array()
        .and_then(|m| m.iter().rev().find(|m| m["role"] == "user"))
        .and_then(|m| m["content"].as_str())
        .unwrap_or("")
        .to_string()
}

/// Words a careful reader would take as a causal link to an earlier crash.
const CUES: [&str; 10] = [
    "ahead",
    "queue",
    "backed up",
    "debris",
    "earlier",
    "previous",
    "prior",
    "slowed to look",
    "emergency",
    "response",
];

/// A deterministic stand-in for a prompted LLM.
pub fn llm_stub() -> StubServer {
    StubServer::start(|_, req| {
        let narrative = user_message(req).to_lowercase();
        let yes = CUES.iter().any(|c| narrative.contains(c));
        let text = if yes {
            "Reasoning done.\n{\"answer\": \"YES\", \"probability\": 0.9, \"explanation\": \"Narrative links the crash to an earlier incident.\"}"
        } else {
            "{\"answer\": \"NO\", \"probability\": 0.15, \"explanation\": \"No prior crash is described.\"}"
        };
        Reply::ok(chat_completion(text))
    })
}

/// A naive remote classifier keyed on crash words; disagrees with the LLM on
/// distractor narratives.
pub fn remote_stub() -> StubServer {
    StubServer::start(|_, req| {
        let v = req.json();
        let narrative = v["narrative"].as_str().unwrap_or("").to_lowercase();
        let yes = CUES.iter().any(|c| narrative.contains(c)) || narrative.contains("secondary");
        let body = if yes {
            json!({"answer": "YES", "probability": 0.8})
        } else {
            json!({"answer": "NO", "probability": 0.3, "explanation": "no cue"})
        };
        Reply::ok(body.to_string())
    })
}
