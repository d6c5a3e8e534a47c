//! In-process mock services and synthetic images for tests and demos.
//!
//! A synthetic image is a PNG signature followed by a JSON payload. The mock
//! judge answers from the payload: `{"gender": "man"}` answers every judge,
//! `{"gender": {"vlm-a": "man", "*": "woman"}}` answers per model name. The
//! mock reward server returns the payload's `score`.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

use crate::error::{Error, Result};
use crate::judge::lexical_caption_attributes;

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

pub fn synthetic_png(payload: &Value) -> Vec<u8> {
    let mut bytes = PNG_SIGNATURE.to_vec();
    bytes.extend(serde_json::to_vec(payload).expect("payload serializes"));
    bytes
}

pub fn read_payload(bytes: &[u8]) -> Option<Value> {
    serde_json::from_slice(bytes.strip_prefix(PNG_SIGNATURE)?).ok()
}

/// Writes one synthetic frame per payload to `root/video_id/frame-NNNN.png`.
pub fn write_frames(root: &Path, video_id: &str, payloads: &[Value]) -> Result<()> {
    let dir = root.join(video_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, payload) in payloads.iter().enumerate() {
        let path = dir.join(format!("frame-{i:04}.png"));
        std::fs::write(&path, synthetic_png(payload)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Writes a single synthetic image at `root/relative`.
pub fn write_image(root: &Path, relative: &str, payload: &Value) -> Result<()> {
    let path = root.join(relative);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&path, synthetic_png(payload)).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Judge,
    Reward,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockOptions {
    /// Answer 503 once this many requests have been served.
    pub fail_after: Option<usize>,
    pub delay_ms: u64,
    pub workers: usize,
}

pub struct MockServer {
    base: String,
    kind: Kind,
    server: Arc<Server>,
    requests: Arc<AtomicUsize>,
    fail_after: Arc<AtomicUsize>,
    threads: Vec<JoinHandle<()>>,
}

fn judge_reply(body: &Value) -> (u16, String) {
    let model = body["model"].as_str().unwrap_or_default();
    let content = body.pointer("/messages/0/content").and_then(Value::as_array);
    let Some(content) = content else {
        return (400, json!({"error": "no message content"}).to_string());
    };
    let text = content
        .iter()
        .find_map(|c| c["text"].as_str())
        .unwrap_or_default();
    let image_url = content
        .iter()
        .find_map(|c| c.pointer("/image_url/url").and_then(Value::as_str));

    let reply = match image_url {
        Some(url) => {
            let payload = url
                .split_once("base64,")
                .and_then(|(_, b64)| base64::engine::general_purpose::STANDARD.decode(b64).ok())
                .and_then(|bytes| read_payload(&bytes))
                .unwrap_or(Value::Null);
            let attribute = if text.to_lowercase().contains("ethnicity") {
                "ethnicity"
            } else {
                "gender"
            };
            match &payload[attribute] {
                Value::String(s) => s.clone(),
                Value::Object(per_model) => per_model
                    .get(model)
                    .or_else(|| per_model.get("*"))
                    .and_then(Value::as_str)
                    .unwrap_or("unidentifiable")
                    .to_string(),
                _ => "unidentifiable".to_string(),
            }
        }
        None => {
            let caption = text.rsplit_once("Caption:").map_or(text, |(_, c)| c).trim();
            let a = lexical_caption_attributes(caption);
            json!({
                "gender": a.gender.map(|g| g.as_str()),
                "ethnicity": a.ethnicity.map(|e| e.as_str()),
                "action": a.action.map(|x| x.name()),
            })
            .to_string()
        }
    };
    let out = json!({
        "id": "mock",
        "object": "chat.completion",
        "model": model,
        "choices": [{"index": 0, "message": {"role": "assistant", "content": reply}, "finish_reason": "stop"}],
    });
    (200, out.to_string())
}

fn reward_reply(body: &Value) -> (u16, String) {
    let payload = body["image_b64"]
        .as_str()
        .and_then(|b64| base64::engine::general_purpose::STANDARD.decode(b64).ok())
        .and_then(|bytes| read_payload(&bytes))
        .unwrap_or(Value::Null);
    if let Some(raw) = payload["reward_reply"].as_str() {
        return (200, raw.to_string());
    }
    match payload["score"].as_f64() {
        Some(score) => (200, json!({"score": score}).to_string()),
        None => (400, json!({"error": "image has no score"}).to_string()),
    }
}

impl MockServer {
    pub fn judge(options: MockOptions) -> MockServer {
        MockServer::start(Kind::Judge, options)
    }

    pub fn reward(options: MockOptions) -> MockServer {
        MockServer::start(Kind::Reward, options)
    }

    fn start(kind: Kind, options: MockOptions) -> MockServer {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind mock server"));
        let port = server.server_addr().to_ip().expect("ip listener").port();
        let requests = Arc::new(AtomicUsize::new(0));
        let fail_after = Arc::new(AtomicUsize::new(options.fail_after.unwrap_or(usize::MAX)));
        let threads = (0..options.workers.max(4))
            .map(|_| {
                let server = Arc::clone(&server);
                let requests = Arc::clone(&requests);
                let fail_after = Arc::clone(&fail_after);
                let delay = Duration::from_millis(options.delay_ms);
                std::thread::spawn(move || {
                    while let Ok(mut request) = server.recv() {
                        let mut text = String::new();
                        let _ = request.as_reader().read_to_string(&mut text);
                        let n = requests.fetch_add(1, Ordering::SeqCst);
                        if !delay.is_zero() {
                            std::thread::sleep(delay);
                        }
                        let (status, reply) = if n >= fail_after.load(Ordering::SeqCst) {
                            (503, json!({"error": "unavailable"}).to_string())
                        } else {
                            match serde_json::from_str::<Value>(&text) {
                                Ok(body) => match kind {
                                    Kind::Judge => judge_reply(&body),
                                    Kind::Reward => reward_reply(&body),
                                },
                                Err(_) => (400, json!({"error": "bad json"}).to_string()),
                            }
                        };
                        let header = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                            .expect("static header");
                        let response = Response::from_string(reply)
                            .with_status_code(status)
                            .with_header(header);
                        let _ = request.respond(response);
                    }
                })
            })
            .collect();
        MockServer {
            base: format!("http://127.0.0.1:{port}"),
            kind,
            server,
            requests,
            fail_after,
            threads,
        }
    }

    /// Endpoint URL clients should be configured with.
    pub fn url(&self) -> String {
        match self.kind {
            Kind::Judge => format!("{}/v1/chat/completions", self.base),
            Kind::Reward => format!("{}/score", self.base),
        }
    }

    /// Requests received so far, including failed ones.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Fails every request from the `n`th on; `None` heals the server.
    pub fn set_fail_after(&self, n: Option<usize>) {
        self.fail_after.store(n.unwrap_or(usize::MAX), Ordering::SeqCst);
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        for _ in &self.threads {
            self.server.unblock();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}
