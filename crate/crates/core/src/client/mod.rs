//! Inference backends behind one blocking interface.

mod mock;
mod remote;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use mock::{MockMode, MockModel, MockModelSpec, MockVocab};
pub use remote::{RemoteClient, RemoteConfig};

use crate::prompt::Prompt;
use crate::store::Usage;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub prompt: Prompt,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub model_id: String,
    pub max_output_tokens: u32,
    /// Caller-side identifier (the sample id); never sent to remote backends.
    pub tag: Option<String>,
}

impl InferenceRequest {
    pub fn new(prompt: Prompt, model_id: impl Into<String>) -> Self {
        Self {
            prompt,
            temperature: DEFAULT_TEMPERATURE,
            seed: None,
            model_id: model_id.into(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            tag: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReply {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited; gave up after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("authentication failed (HTTP {0})")]
    AuthFailure(u16),
    #[error("backend returned HTTP {status}: {body}")]
    BackendError { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("frame {0} is missing")]
    MissingFrame(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
}

impl ClientError {
    /// Short stable name for failure logs.
    pub fn kind(&self) -> &'static str {
        match self {
            ClientError::Timeout { .. } => "timeout",
            ClientError::RateLimited { .. } => "rate_limited",
            ClientError::AuthFailure(_) => "auth_failure",
            ClientError::BackendError { .. } => "backend_error",
            ClientError::Transport(_) => "transport",
            ClientError::MissingFrame(_) => "missing_frame",
            ClientError::InvalidRequest(_) => "invalid_request",
            ClientError::MalformedResponse(_) => "malformed_response",
        }
    }
}

pub trait InferenceBackend: Send + Sync {
    fn infer(&self, req: &InferenceRequest) -> Result<InferenceReply, ClientError>;
}

impl<B: InferenceBackend + ?Sized> InferenceBackend for Box<B> {
    fn infer(&self, req: &InferenceRequest) -> Result<InferenceReply, ClientError> {
        (**self).infer(req)
    }
}

/// Runs `reqs` with at most `max_in_flight` concurrent calls; results keep input order.
pub fn infer_batch(
    backend: &dyn InferenceBackend,
    reqs: &[InferenceRequest],
    max_in_flight: usize,
) -> Vec<Result<InferenceReply, ClientError>> {
    assert!(max_in_flight >= 1, "max_in_flight must be at least 1");
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<InferenceReply, ClientError>>>> = Mutex::new(vec![None; reqs.len()]);
    std::thread::scope(|s| {
        for _ in 0..max_in_flight.min(reqs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = reqs.get(i) else { break };
                let result = backend.infer(req);
                slots.lock().expect("result slots poisoned")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;
    use std::time::Duration;

    struct Probe {
        active: AtomicU32,
        peak: AtomicU32,
    }

    impl InferenceBackend for Probe {
        fn infer(&self, req: &InferenceRequest) -> Result<InferenceReply, ClientError> {
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            let seed = req.seed.unwrap_or(0);
            // later requests finish first
            std::thread::sleep(Duration::from_millis(20 - seed.min(19)));
            self.active.fetch_sub(1, Ordering::SeqCst);
            if req.tag.as_deref() == Some("slow") {
                return Err(ClientError::Timeout { attempts: 1 });
            }
            Ok(InferenceReply {
                text: format!("reply {seed}"),
                usage: Usage::default(),
                latency_ms: 0,
            })
        }
    }

    fn probe() -> Probe {
        Probe {
            active: AtomicU32::new(0),
            peak: AtomicU32::new(0),
        }
    }

    fn reqs(n: u64) -> Vec<InferenceRequest> {
        let prompt = Prompt {
            system: String::new(),
            parts: vec![],
        };
        (0..n).map(|i| InferenceRequest::new(prompt.clone(), "m").with_seed(i)).collect()
    }

    #[test]
    fn order_preserved() {
        let p = probe();
        let out = infer_batch(&p, &reqs(12), 4);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().text, format!("reply {i}"));
        }
        assert!(p.peak.load(Ordering::SeqCst) <= 4);
    }

    #[test]
    fn single_flight_serializes() {
        let p = probe();
        infer_batch(&p, &reqs(5), 1);
        assert_eq!(p.peak.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn per_item_failures() {
        let mut rs = reqs(4);
        rs[2] = rs[2].clone().with_tag("slow");
        let out = infer_batch(&probe(), &rs, 2);
        assert!(matches!(out[2], Err(ClientError::Timeout { .. })));
        assert_eq!(out.iter().filter(|r| r.is_ok()).count(), 3);
    }

    #[test]
    fn default_temperature() {
        assert_eq!(reqs(1)[0].temperature, 1.0);
    }
}
