//! Access to the multimodal chat model.
//!
//! A [`Backend`] performs one attempt. The [`Gateway`] wraps it with
//! client-side rate limiting, retries with exponential backoff on transient
//! failures, and timing, and returns a [`ModelExchange`].

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::images::{mime_type, ImageLibrary};
use crate::prompter::{PromptBundle, Segment, Stage};

#[derive(Debug, Clone, thiserror::Error)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited by the model endpoint")]
    RateLimited,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no scripted response for prompt {fingerprint}")]
    NoScript { fingerprint: String },
    #[error("missing credentials: environment variable {0} is not set")]
    AuthMissing(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("image `{0}` could not be resolved")]
    ImageUnavailable(String),
    #[error("script: {0}")]
    Script(String),
}

impl GatewayError {
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Timeout | GatewayError::RateLimited)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelExchange {
    pub request: PromptBundle,
    pub response_text: String,
    pub backend_id: String,
    pub decode_params: DecodeParams,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

/// One model call attempt.
pub trait Backend: Send + Sync {
    fn id(&self) -> String;
    fn call(&self, bundle: &PromptBundle, params: &DecodeParams) -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 500,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64 << retry.saturating_sub(1).min(20);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateLimits {
    /// 0 disables the in-flight cap.
    pub max_in_flight: usize,
    /// 0 disables the per-minute cap.
    pub requests_per_minute: usize,
}

impl Default for RateLimits {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            requests_per_minute: 0,
        }
    }
}

/// Gateway-side limiter shared by all workers.
#[derive(Debug)]
pub struct RateLimiter {
    limits: RateLimits,
    in_flight: Mutex<usize>,
    released: Condvar,
    window: Mutex<VecDeque<Instant>>,
}

pub struct Permit<'a> {
    limiter: &'a RateLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        if self.limiter.limits.max_in_flight > 0 {
            let mut n = self.limiter.in_flight.lock().expect("limiter poisoned");
            *n -= 1;
            self.limiter.released.notify_one();
        }
    }
}

impl RateLimiter {
    pub fn new(limits: RateLimits) -> Self {
        Self {
            limits,
            in_flight: Mutex::new(0),
            released: Condvar::new(),
            window: Mutex::new(VecDeque::new()),
        }
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().expect("limiter poisoned")
    }

    /// Blocks until a request may start.
    pub fn acquire(&self) -> Permit<'_> {
        if self.limits.requests_per_minute > 0 {
            let minute = Duration::from_secs(60);
            loop {
                let wait = {
                    let mut w = self.window.lock().expect("limiter poisoned");
                    let now = Instant::now();
                    while w.front().is_some_and(|t| now.duration_since(*t) >= minute) {
                        w.pop_front();
                    }
                    if w.len() < self.limits.requests_per_minute {
                        w.push_back(now);
                        None
                    } else {
                        Some(minute - now.duration_since(w[0]))
                    }
                };
                match wait {
                    None => break,
                    Some(d) => std::thread::sleep(d),
                }
            }
        }
        if self.limits.max_in_flight > 0 {
            let mut n = self.in_flight.lock().expect("limiter poisoned");
            while *n >= self.limits.max_in_flight {
                n = self.released.wait(n).expect("limiter poisoned");
            }
            *n += 1;
        }
        Permit { limiter: self }
    }
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    limiter: Arc<RateLimiter>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("retry", &self.retry)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, retry: RetryPolicy, limits: RateLimits) -> Self {
        Self {
            backend,
            retry,
            limiter: Arc::new(RateLimiter::new(limits)),
        }
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn limiter(&self) -> &RateLimiter {
        &self.limiter
    }

    pub fn complete(
        &self,
        bundle: &PromptBundle,
        params: &DecodeParams,
    ) -> Result<ModelExchange, GatewayError> {
        let started = Instant::now();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire();
                self.backend.call(bundle, params)
            };
            match result {
                Ok(response_text) => {
                    return Ok(ModelExchange {
                        request: bundle.clone(),
                        response_text,
                        backend_id: self.backend.id(),
                        decode_params: *params,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                    })
                }
                Err(e) if e.is_transient() && attempt <= self.retry.max_retries => {
                    tracing::debug!(attempt, error = %e, "transient model error, backing off");
                    std::thread::sleep(self.retry.backoff(attempt));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scripted backend

/// One scripted response. Every condition that is present must hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    /// Substring of the rendered prompt text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub response: String,
}

impl ScriptRule {
    fn matches(&self, bundle: &PromptBundle, rendered: &str) -> bool {
        self.fingerprint.as_ref().is_none_or(|f| *f == bundle.fingerprint)
            && self.stage.is_none_or(|s| s == bundle.stage)
            && self.contains.as_ref().is_none_or(|c| rendered.contains(c.as_str()))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub name: Option<String>,
    pub rules: Vec<ScriptRule>,
}

/// Deterministic backend answering from a rule table. First matching rule
/// wins; an unmatched prompt is an error.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    name: String,
    rules: Vec<ScriptRule>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Result<Self, GatewayError> {
        if let Some(i) = script
            .rules
            .iter()
            .position(|r| r.fingerprint.is_none() && r.stage.is_none() && r.contains.is_none())
        {
            return Err(GatewayError::Script(format!("rule {i} has no match condition")));
        }
        Ok(Self {
            name: script.name.unwrap_or_else(|| "default".into()),
            rules: script.rules,
        })
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        let script: Script = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        Self::new(script)
    }

    /// A script that answers every prompt recorded in a transcript with the
    /// recorded response.
    pub fn from_transcript(path: &Path) -> Result<Self, GatewayError> {
        let entries = read_transcript(path)
            .map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        let rules = entries
            .into_iter()
            .map(|e| ScriptRule {
                fingerprint: Some(e.exchange.request.fingerprint),
                stage: None,
                contains: None,
                response: e.exchange.response_text,
            })
            .collect();
        Self::new(Script {
            name: Some(format!("replay:{}", path.display())),
            rules,
        })
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> String {
        format!("scripted:{}", self.name)
    }

    fn call(&self, bundle: &PromptBundle, _params: &DecodeParams) -> Result<String, GatewayError> {
        let rendered = bundle.render_text();
        self.rules
            .iter()
            .find(|r| r.matches(bundle, &rendered))
            .map(|r| r.response.clone())
            .ok_or_else(|| GatewayError::NoScript {
                fingerprint: bundle.fingerprint.clone(),
            })
    }
}

// ---------------------------------------------------------------------------
// Remote chat-completions backend

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
        }
    }
}

pub struct OpenAiBackend {
    config: RemoteConfig,
    api_key: String,
    images: Arc<ImageLibrary>,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(config: RemoteConfig, images: Arc<ImageLibrary>) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GatewayError::AuthMissing(config.api_key_env.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            config,
            api_key,
            images,
            client,
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }
}

/// Chat-completions request body: one user message whose content parts
/// follow the bundle's segment order, images inlined as base64 data URLs.
pub fn request_body(
    bundle: &PromptBundle,
    params: &DecodeParams,
    model: &str,
    images: &ImageLibrary,
) -> Result<Value, GatewayError> {
    let mut parts = Vec::with_capacity(bundle.segments.len());
    for seg in &bundle.segments {
        match seg {
            Segment::Text { text } => parts.push(json!({"type": "text", "text": text})),
            Segment::Image { image_ref } => {
                let bytes = images
                    .get(image_ref)
                    .ok_or_else(|| GatewayError::ImageUnavailable(image_ref.clone()))?;
                let url = format!(
                    "data:{};base64,{}",
                    mime_type(image_ref, &bytes),
                    base64::engine::general_purpose::STANDARD.encode(&bytes)
                );
                parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
            }
        }
    }
    Ok(json!({
        "model": model,
        "messages": [{"role": "user", "content": parts}],
        "temperature": params.temperature,
        "max_tokens": params.max_output_tokens,
    }))
}

/// Extracts the assistant text from a chat-completions response.
pub fn response_text(body: &Value) -> Result<String, GatewayError> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| GatewayError::MalformedResponse("no choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => {
            let texts: Vec<&str> = parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect();
            if texts.is_empty() {
                Err(GatewayError::MalformedResponse("content has no text parts".into()))
            } else {
                Ok(texts.concat())
            }
        }
        other => Err(GatewayError::MalformedResponse(format!(
            "unexpected content type: {other}"
        ))),
    }
}

impl Backend for OpenAiBackend {
    fn id(&self) -> String {
        format!("openai-compatible:{}", self.config.model)
    }

    fn call(&self, bundle: &PromptBundle, params: &DecodeParams) -> Result<String, GatewayError> {
        let body = request_body(bundle, params, &self.config.model, &self.images)?;
        let resp = self
            .client
            .post(self.url())
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    GatewayError::Timeout
                } else {
                    GatewayError::Transport(e.to_string())
                }
            })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::Transport(e.to_string())
            }
        })?;
        match status {
            200..=299 => {
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
                response_text(&v)
            }
            429 => Err(GatewayError::RateLimited),
            408 | 504 => Err(GatewayError::Timeout),
            _ => Err(GatewayError::Http {
                status,
                body: text.chars().take(500).collect(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Transcript

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    #[serde(flatten)]
    pub exchange: ModelExchange,
}

/// Append-only JSON-lines log of exchanges. Each line is written under a
/// lock in a single `write_all`.
#[derive(Debug)]
pub struct Transcript {
    path: PathBuf,
    file: Mutex<File>,
}

impl Transcript {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &TranscriptEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut f = self.file.lock().expect("transcript poisoned");
        f.write_all(&line)?;
        f.flush()
    }
}

pub fn read_transcript(path: &Path) -> std::io::Result<Vec<TranscriptEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompter::Prompter;
    use crate::retriever::ExemplarSet;
    use crate::taxonomy::{Dataset, Registry};
    use std::sync::atomic::{AtomicU32, Ordering};

    fn bundle() -> PromptBundle {
        let reg = Registry::builtin(Dataset::FloodNet);
        let spec = reg.classify("is the area mostly non-flooded?").unwrap();
        Prompter::default()
            .build_reasoning_prompt(spec, &ExemplarSet::empty(), "img.png", true)
            .unwrap()
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_retries: 3,
            initial_backoff_ms: 1,
            max_backoff_ms: 4,
        }
    }

    #[test]
    fn scripted_lookup_by_fingerprint() {
        let b = bundle();
        let backend = ScriptedBackend::new(Script {
            name: None,
            rules: vec![ScriptRule {
                fingerprint: Some(b.fingerprint.clone()),
                stage: None,
                contains: None,
                response: "Yes".into(),
            }],
        })
        .unwrap();
        let gw = Gateway::new(Arc::new(backend), fast_retry(), RateLimits::default());
        let ex = gw.complete(&b, &DecodeParams::default()).unwrap();
        assert_eq!(ex.response_text, "Yes");
        assert_eq!(ex.attempt_count, 1);
        assert_eq!(ex.backend_id, "scripted:default");
    }

    #[test]
    fn scripted_unmatched_is_no_script() {
        let backend = ScriptedBackend::new(Script {
            name: None,
            rules: vec![ScriptRule {
                fingerprint: None,
                stage: Some(Stage::Selection),
                contains: None,
                response: "x".into(),
            }],
        })
        .unwrap();
        let gw = Gateway::new(Arc::new(backend), fast_retry(), RateLimits::default());
        assert!(matches!(
            gw.complete(&bundle(), &DecodeParams::default()),
            Err(GatewayError::NoScript { .. })
        ));
    }

    #[test]
    fn conditionless_rule_is_rejected() {
        let err = ScriptedBackend::new(Script {
            name: None,
            rules: vec![ScriptRule {
                fingerprint: None,
                stage: None,
                contains: None,
                response: "x".into(),
            }],
        });
        assert!(matches!(err, Err(GatewayError::Script(_))));
    }

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
        error: GatewayError,
    }

    impl Backend for Flaky {
        fn id(&self) -> String {
            "flaky".into()
        }
        fn call(&self, _: &PromptBundle, _: &DecodeParams) -> Result<String, GatewayError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(self.error.clone())
            } else {
                Ok("ok".into())
            }
        }
    }

    #[test]
    fn retries_rate_limits_then_succeeds() {
        let gw = Gateway::new(
            Arc::new(Flaky {
                failures: 2,
                calls: AtomicU32::new(0),
                error: GatewayError::RateLimited,
            }),
            fast_retry(),
            RateLimits::default(),
        );
        let ex = gw.complete(&bundle(), &DecodeParams::default()).unwrap();
        assert_eq!(ex.attempt_count, 3);
        assert_eq!(ex.response_text, "ok");
    }

    #[test]
    fn gives_up_after_retry_limit() {
        let gw = Gateway::new(
            Arc::new(Flaky {
                failures: 10,
                calls: AtomicU32::new(0),
                error: GatewayError::Timeout,
            }),
            fast_retry(),
            RateLimits::default(),
        );
        assert!(matches!(
            gw.complete(&bundle(), &DecodeParams::default()),
            Err(GatewayError::Timeout)
        ));
    }

    #[test]
    fn permanent_errors_are_not_retried() {
        let flaky = Arc::new(Flaky {
            failures: 1,
            calls: AtomicU32::new(0),
            error: GatewayError::MalformedResponse("bad".into()),
        });
        let gw = Gateway::new(flaky.clone(), fast_retry(), RateLimits::default());
        assert!(gw.complete(&bundle(), &DecodeParams::default()).is_err());
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            initial_backoff_ms: 100,
            max_backoff_ms: 350,
        };
        let ms: Vec<u128> = (1..=4).map(|i| p.backoff(i).as_millis()).collect();
        assert_eq!(ms, [100, 200, 350, 350]);
    }

    #[test]
    fn in_flight_cap_holds_under_contention() {
        struct Slow {
            limiter: std::sync::OnceLock<Arc<RateLimiter>>,
            peak: AtomicU32,
        }
        impl Backend for Slow {
            fn id(&self) -> String {
                "slow".into()
            }
            fn call(&self, _: &PromptBundle, _: &DecodeParams) -> Result<String, GatewayError> {
                let now = self.limiter.get().unwrap().in_flight() as u32;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                Ok(String::new())
            }
        }
        let slow = Arc::new(Slow {
            limiter: Default::default(),
            peak: AtomicU32::new(0),
        });
        let gw = Gateway::new(
            slow.clone(),
            fast_retry(),
            RateLimits {
                max_in_flight: 2,
                requests_per_minute: 0,
            },
        );
        slow.limiter.set(gw.limiter.clone()).ok().unwrap();
        let b = bundle();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| gw.complete(&b, &DecodeParams::default()).unwrap());
            }
        });
        assert!(slow.peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(gw.limiter.in_flight(), 0);
    }

    #[test]
    fn request_body_interleaves_parts() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("img.png"), b"\x89PNGxx").unwrap();
        let lib = ImageLibrary::new(Some(dir.path().to_path_buf()));
        let b = bundle();
        let body = request_body(&b, &DecodeParams::default(), "m", &lib).unwrap();
        let parts = body.pointer("/messages/0/content").unwrap().as_array().unwrap();
        assert_eq!(parts.len(), b.segments.len());
        let kinds: Vec<&str> = parts.iter().map(|p| p["type"].as_str().unwrap()).collect();
        assert_eq!(kinds, ["text", "text", "image_url", "text"]);
        assert!(parts[2]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 1024);

        let empty = ImageLibrary::new(None);
        assert!(matches!(
            request_body(&b, &DecodeParams::default(), "m", &empty),
            Err(GatewayError::ImageUnavailable(_))
        ));
    }

    #[test]
    fn response_parsing() {
        let v = json!({"choices": [{"message": {"content": "Yes"}}]});
        assert_eq!(response_text(&v).unwrap(), "Yes");
        let v = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]});
        assert_eq!(response_text(&v).unwrap(), "ab");
        assert!(matches!(
            response_text(&json!({"error": "x"})),
            Err(GatewayError::MalformedResponse(_))
        ));
    }

    #[test]
    fn auth_missing_without_key() {
        let cfg = RemoteConfig {
            api_key_env: "DVQA_TEST_DEFINITELY_UNSET_KEY".into(),
            ..Default::default()
        };
        assert!(matches!(
            OpenAiBackend::new(cfg, Arc::new(ImageLibrary::default())),
            Err(GatewayError::AuthMissing(_))
        ));
    }

    #[test]
    fn transcript_round_trip_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let t = Transcript::open(&path).unwrap();
        let b = bundle();
        let ex = ModelExchange {
            request: b.clone(),
            response_text: "  No \n".into(),
            backend_id: "x".into(),
            decode_params: DecodeParams::default(),
            latency_ms: 3,
            attempt_count: 1,
        };
        t.append(&TranscriptEntry {
            item_id: Some("i1".into()),
            exchange: ex.clone(),
        })
        .unwrap();
        let back = read_transcript(&path).unwrap();
        assert_eq!(back[0].exchange, ex);
        let replay = ScriptedBackend::from_transcript(&path).unwrap();
        assert_eq!(replay.call(&b, &DecodeParams::default()).unwrap(), "  No \n");
    }
}
