//! Chat-completion HTTP backend.

use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ClientError, InferenceBackend, InferenceReply, InferenceRequest};
use crate::store::{FrameRef, Usage};

/// 1×1 transparent PNG sent in place of frames that were never rendered.
const PLACEHOLDER_PNG: &[u8] = &[
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52, 0x00, 0x00, 0x00,
    0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00, 0x00, 0x1f, 0x15, 0xc4, 0x89, 0x00, 0x00, 0x00, 0x0b, 0x49,
    0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0x60, 0x00, 0x02, 0x00, 0x00, 0x05, 0x00, 0x01, 0x7a, 0x5e, 0xab, 0x3f, 0x00,
    0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub api_key: Option<String>,
    /// Model name sent in the request body.
    pub model: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    /// Directory that frame paths are relative to.
    pub frame_root: PathBuf,
    pub placeholder_frames: bool,
    /// Per-image `detail` hint ("low", "high", "auto"); frames are otherwise sent unmodified.
    pub image_detail: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            api_key: None,
            model: String::new(),
            timeout_s: 120.0,
            max_retries: 4,
            backoff_base_ms: 500,
            backoff_cap_ms: 30_000,
            frame_root: PathBuf::from("."),
            placeholder_frames: false,
            image_detail: None,
        }
    }
}

pub struct RemoteClient {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(InferenceReply),
    Retry(ClientError, Option<Duration>),
    Fatal(ClientError),
}

fn mime_for(path: &str) -> &'static str {
    match path.rsplit('.').next().map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/png",
    }
}

fn message_text(content: &Value) -> Option<String> {
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect(),
        ),
        _ => None,
    }
}

impl RemoteClient {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { cfg, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn image_url(&self, frame: &FrameRef) -> Result<String, ClientError> {
        let rel = frame.image_ref();
        let bytes = match fs::read(self.cfg.frame_root.join(&rel)) {
            Ok(b) => b,
            Err(_) if self.cfg.placeholder_frames => PLACEHOLDER_PNG.to_vec(),
            Err(_) => return Err(ClientError::MissingFrame(rel)),
        };
        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
        Ok(format!("data:{};base64,{b64}", mime_for(&rel)))
    }

    /// The JSON body sent for `req`.
    pub fn request_body(&self, req: &InferenceRequest) -> Result<Value, ClientError> {
        let mut messages = req.prompt.chat_messages(|f| self.image_url(f))?;
        if let Some(detail) = &self.cfg.image_detail {
            for part in messages[1]["content"].as_array_mut().into_iter().flatten() {
                if part["type"] == "image_url" {
                    part["image_url"]["detail"] = json!(detail);
                }
            }
        }
        let model = if self.cfg.model.is_empty() { &req.model_id } else { &self.cfg.model };
        let mut body = json!({
            "model": model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    fn attempt(&self, body: &str) -> Attempt {
        let started = Instant::now();
        let mut call = self.agent.post(&self.cfg.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match call.send(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(ClientError::Timeout { attempts: 0 }, None),
            Err(e) => return Attempt::Retry(ClientError::Transport(e.to_string()), None),
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .map(Duration::from_secs_f64);
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(ClientError::Timeout { attempts: 0 }, None),
            Err(e) => return Attempt::Retry(ClientError::Transport(e.to_string()), None),
        };
        match status {
            200..=299 => {}
            401 | 403 => return Attempt::Fatal(ClientError::AuthFailure(status)),
            429 => return Attempt::Retry(ClientError::RateLimited { attempts: 0 }, retry_after),
            500..=599 => return Attempt::Retry(ClientError::BackendError { status, body: text }, retry_after),
            _ => return Attempt::Fatal(ClientError::BackendError { status, body: text }),
        }
        let parsed: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => return Attempt::Fatal(ClientError::MalformedResponse(e.to_string())),
        };
        let Some(content) = message_text(&parsed["choices"][0]["message"]["content"]) else {
            return Attempt::Fatal(ClientError::MalformedResponse("no choices[0].message.content".into()));
        };
        Attempt::Done(InferenceReply {
            text: content,
            usage: Usage {
                prompt_tokens: parsed["usage"]["prompt_tokens"].as_u64(),
                completion_tokens: parsed["usage"]["completion_tokens"].as_u64(),
                retries: 0,
            },
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn backoff(&self, retry: u32, hint: Option<Duration>) -> Duration {
        let exp = self.cfg.backoff_base_ms.saturating_mul(1u64 << retry.min(20));
        let wait = Duration::from_millis(exp.min(self.cfg.backoff_cap_ms));
        hint.map_or(wait, |h| h.min(Duration::from_millis(self.cfg.backoff_cap_ms)))
    }
}

impl InferenceBackend for RemoteClient {
    fn infer(&self, req: &InferenceRequest) -> Result<InferenceReply, ClientError> {
        if req.temperature.is_nan() || req.temperature < 0.0 {
            return Err(ClientError::InvalidRequest("temperature must be non-negative".into()));
        }
        let body = self.request_body(req)?.to_string();
        let mut retries = 0;
        loop {
            match self.attempt(&body) {
                Attempt::Done(mut reply) => {
                    reply.usage.retries = retries;
                    return Ok(reply);
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e, hint) => {
                    if retries >= self.cfg.max_retries {
                        let attempts = retries + 1;
                        return Err(match e {
                            ClientError::Timeout { .. } => ClientError::Timeout { attempts },
                            ClientError::RateLimited { .. } => ClientError::RateLimited { attempts },
                            other => other,
                        });
                    }
                    let wait = self.backoff(retries, hint);
                    log::warn!("retrying after {e} (retry {} in {wait:?})", retries + 1);
                    std::thread::sleep(wait);
                    retries += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{build_prompt, PromptSpec};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves one canned `(status, body, delay)` per connection and records request bodies.
    fn stub(responses: Vec<(u16, &'static str, u64)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for (status, body, delay) in responses {
                let Ok((mut stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(String::from_utf8(buf).unwrap());
                std::thread::sleep(Duration::from_millis(delay));
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        (url, seen)
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"[[(0, grab, cup)]] é"}}],"usage":{"prompt_tokens":11,"completion_tokens":7}}"#;

    fn client(url: String) -> RemoteClient {
        RemoteClient::new(RemoteConfig {
            endpoint: url,
            api_key: Some("k".into()),
            model: "stub".into(),
            timeout_s: 0.5,
            max_retries: 3,
            backoff_base_ms: 1,
            backoff_cap_ms: 5,
            placeholder_frames: true,
            ..RemoteConfig::default()
        })
    }

    fn req() -> InferenceRequest {
        let spec = PromptSpec {
            h: 2,
            t: 1,
            frame_refs: (0..2)
                .map(|step| FrameRef {
                    scenario_id: "x".into(),
                    step,
                    path: None,
                })
                .collect(),
            scene_graph_text: "{\"room\": {}}".into(),
            icl_examples: vec![],
            max_images: 50,
        };
        InferenceRequest::new(build_prompt(&spec).unwrap(), "m").with_seed(5)
    }

    #[test]
    fn retries_rate_limits_then_succeeds() {
        let (url, seen) = stub(vec![(429, "{}", 0), (429, "{}", 0), (200, OK, 0)]);
        let reply = client(url).infer(&req()).unwrap();
        assert_eq!(reply.text, "[[(0, grab, cup)]] é");
        assert_eq!(reply.usage.retries, 2);
        assert_eq!(reply.usage.prompt_tokens, Some(11));
        let bodies = seen.lock().unwrap();
        assert_eq!(bodies.len(), 3);
        let sent: Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["model"], "stub");
        assert_eq!(sent["temperature"], 1.0);
        assert_eq!(sent["seed"], 5);
        let url = sent["messages"][1]["content"][1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let (url, seen) = stub(vec![(401, "{}", 0), (200, OK, 0)]);
        assert_eq!(client(url).infer(&req()), Err(ClientError::AuthFailure(401)));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen) = stub(vec![(400, "bad", 0), (200, OK, 0)]);
        assert!(matches!(client(url).infer(&req()), Err(ClientError::BackendError { status: 400, .. })));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn server_errors_exhaust_retries() {
        let (url, seen) = stub(vec![(503, "down", 0); 4]);
        assert!(matches!(client(url).infer(&req()), Err(ClientError::BackendError { status: 503, .. })));
        assert_eq!(seen.lock().unwrap().len(), 4);
    }

    #[test]
    fn timeout_is_reported() {
        let (url, _) = stub(vec![(200, OK, 1500); 4]);
        let mut c = client(url);
        c.cfg.max_retries = 0;
        c = RemoteClient::new(c.cfg);
        assert_eq!(c.infer(&req()), Err(ClientError::Timeout { attempts: 1 }));
    }

    #[test]
    fn missing_frames_fail_without_placeholder() {
        let mut cfg = client("http://127.0.0.1:9/".into()).cfg;
        cfg.placeholder_frames = false;
        cfg.frame_root = std::env::temp_dir().join("no-such-frames");
        assert!(matches!(RemoteClient::new(cfg).infer(&req()), Err(ClientError::MissingFrame(_))));
    }

    #[test]
    fn reads_real_frames() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("frames/x")).unwrap();
        fs::write(dir.path().join("frames/x/0000.png"), b"abc").unwrap();
        fs::write(dir.path().join("frames/x/0001.png"), b"abc").unwrap();
        let mut cfg = client("http://127.0.0.1:9/".into()).cfg;
        cfg.placeholder_frames = false;
        cfg.frame_root = dir.path().to_path_buf();
        cfg.image_detail = Some("low".into());
        let body = RemoteClient::new(cfg).request_body(&req()).unwrap();
        let part = &body["messages"][1]["content"][1]["image_url"];
        assert_eq!(part["url"], "data:image/png;base64,YWJj");
        assert_eq!(part["detail"], "low");
    }
}
