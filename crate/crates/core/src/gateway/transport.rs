use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use super::{extract_json, ChatRequest, GatewayError};

/// Sends one chat request and returns the assistant text.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError>;
}

impl<T: Transport + ?Sized> Transport for &T {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        (**self).send(request)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        (**self).send(request)
    }
}

/// Wraps a closure.
pub struct FnTransport<F>(pub F);

impl<F> Transport for FnTransport<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        (self.0)(request)
    }
}

/// Replays canned responses in order and records every request.
#[derive(Default)]
pub struct ScriptedTransport {
    responses: Mutex<VecDeque<Result<String, String>>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedTransport {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            responses: Mutex::new(responses.into_iter().map(|s| Ok(s.into())).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Queues a transport failure.
    pub fn push_failure(&self, message: &str) {
        self.responses.lock().unwrap().push_back(Err(message.into()));
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.seen.lock().unwrap().push(request.clone());
        match self.responses.lock().unwrap().pop_front() {
            Some(Ok(s)) => Ok(s),
            Some(Err(e)) => Err(GatewayError::Transport(e)),
            None => Err(GatewayError::Transport("script exhausted".into())),
        }
    }
}

/// Answers rerank prompts with the first ten candidates in their given order.
pub struct IdentityRerankTransport;

impl Transport for IdentityRerankTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let payload: Value = serde_json::from_str(&request.user_payload)
            .map_err(|e| GatewayError::Transport(format!("mock cannot read payload: {e}")))?;
        let post_id = payload["post"]["post_id"].as_str().unwrap_or_default().to_owned();
        let ids: Vec<Value> = payload["factChecks"]
            .as_array()
            .map(|a| a.iter().take(10).map(|c| c["fact_id"].clone()).collect())
            .unwrap_or_default();
        Ok(json!({ post_id: ids }).to_string())
    }
}

/// Answers augmentation prompts with `text + " " + ocr_text` for every pair.
pub struct ConcatEchoTransport;

impl Transport for ConcatEchoTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let payload: Value = serde_json::from_str(&request.user_payload)
            .map_err(|e| GatewayError::Transport(format!("mock cannot read payload: {e}")))?;
        let merged: Vec<String> = payload["pairs"]
            .as_array()
            .map(|a| {
                a.iter()
                    .map(|p| {
                        super::concat_fallback(
                            p["text"].as_str().unwrap_or_default(),
                            p["ocr_text"].as_str().unwrap_or_default(),
                        )
                    })
                    .collect()
            })
            .unwrap_or_default();
        Ok(serde_json::to_string(&merged).expect("strings serialize"))
    }
}

/// JSON chat-completions client with retries and exponential backoff.
pub struct HttpTransport {
    url: String,
    key: Option<String>,
    agent: ureq::Agent,
    pub attempts: u32,
    pub base_delay: Duration,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            url: url.into(),
            key,
            agent,
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }

    /// Reads `GATEWAY_URL` and, if set, `GATEWAY_KEY`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let url = std::env::var("GATEWAY_URL")
            .map_err(|_| GatewayError::InvalidRequest("GATEWAY_URL is not set".into()))?;
        Ok(Self::new(url, std::env::var("GATEWAY_KEY").ok()))
    }

    fn body(request: &ChatRequest) -> Value {
        json!({
            "model": request.model_name,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_payload},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
    }

    fn attempt(&self, body: &Value) -> Result<String, String> {
        let mut req = self.agent.post(&self.url);
        if let Some(k) = &self.key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let v: Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| format!("response has no message content: {v}"))
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let body = Self::body(request);
        let mut last = String::new();
        for i in 0..self.attempts.max(1) {
            if i > 0 {
                std::thread::sleep(self.base_delay * 2u32.pow(i - 1));
            }
            match self.attempt(&body) {
                Ok(s) => return Ok(s),
                Err(e) => last = e,
            }
        }
        Err(GatewayError::Transport(format!(
            "{} attempts failed, last error: {last}",
            self.attempts
        )))
    }
}

/// Appends `{ts, request, response | error}` per call to a JSON Lines file.
pub struct AuditedTransport<T> {
    inner: T,
    log: Mutex<File>,
}

impl<T: Transport> AuditedTransport<T> {
    pub fn new(inner: T, path: &Path) -> Result<Self, GatewayError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner,
            log: Mutex::new(file),
        })
    }
}

impl<T: Transport> Transport for AuditedTransport<T> {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let result = self.inner.send(request);
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64());
        let mut record = json!({ "ts": ts, "request": request });
        match &result {
            Ok(s) => record["response"] = json!(s),
            Err(e) => record["error"] = json!(e.to_string()),
        }
        let mut f = self.log.lock().unwrap();
        writeln!(f, "{record}")?;
        result
    }
}

/// Pulls a JSON array of strings out of free text.
pub(crate) fn parse_string_array(text: &str) -> Option<Vec<String>> {
    let slice = extract_json(text, '[', ']')?;
    serde_json::from_str(slice).ok()
}
