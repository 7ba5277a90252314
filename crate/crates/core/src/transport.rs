//! JSON-over-HTTP plumbing shared by the remote embedding and chat clients.
//!
//! A [`Transport`] posts one JSON body and returns the raw status and body.
//! [`RemoteClient`] layers the client contract on top: bearer auth, a cap on
//! in-flight requests, bounded retry with exponential backoff on transient
//! failures, and mapping of statuses to [`RemoteError`].
//!
//! Fixtures for offline tests are pretty-printed request/response pairs, one
//! file per distinct request, named by a digest of the endpoint and body.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("network error: {0}")]
    Network(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum RemoteError {
    #[error("network error: {0}")]
    Network(String),
    #[error("authentication rejected (status {status})")]
    Auth { status: u16, body: String },
    #[error("provider returned status {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("provider not configured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
    ) -> Result<HttpReply, TransportError>;
}

/// Blocking HTTP transport.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
    ) -> Result<HttpReply, TransportError> {
        let mut request = self
            .agent
            .post(url)
            .header("content-type", "application/json");
        if let Some(key) = api_key {
            request = request.header("authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send(body.to_string())
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub request: FixtureRequest,
    pub response: FixtureResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRequest {
    pub url: String,
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureResponse {
    pub status: u16,
    pub body: Value,
}

/// File name of the fixture for a request. Object keys serialize sorted, so the digest is stable.
pub fn fixture_file_name(url: &str, body: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(url.as_bytes());
    hasher.update([0u8]);
    hasher.update(body.to_string().as_bytes());
    let digest = hex::encode(hasher.finalize());
    format!("{}.json", &digest[..16])
}

fn reply_body_value(body: &str) -> Value {
    serde_json::from_str(body).unwrap_or_else(|_| Value::String(body.to_string()))
}

fn value_to_reply_body(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Serves replies from recorded fixtures; a request without a fixture is an error.
pub struct ReplayTransport {
    dir: PathBuf,
}

impl ReplayTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Transport for ReplayTransport {
    fn post_json(
        &self,
        url: &str,
        _api_key: Option<&str>,
        body: &Value,
    ) -> Result<HttpReply, TransportError> {
        let path = self.dir.join(fixture_file_name(url, body));
        let text = std::fs::read_to_string(&path)
            .map_err(|e| TransportError::Fixture(format!("no fixture {}: {e}", path.display())))?;
        let fixture: Fixture = serde_json::from_str(&text)
            .map_err(|e| TransportError::Fixture(format!("{}: {e}", path.display())))?;
        if fixture.request.body != *body || fixture.request.url != url {
            return Err(TransportError::Fixture(format!(
                "{} records a different request",
                path.display()
            )));
        }
        Ok(HttpReply {
            status: fixture.response.status,
            body: value_to_reply_body(&fixture.response.body),
        })
    }
}

/// Forwards to an inner transport and writes every exchange as a fixture.
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    dir: PathBuf,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn Transport>, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
        }
    }
}

impl Transport for RecordingTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
    ) -> Result<HttpReply, TransportError> {
        let reply = self.inner.post_json(url, api_key, body)?;
        let fixture = Fixture {
            request: FixtureRequest {
                url: url.to_string(),
                body: body.clone(),
            },
            response: FixtureResponse {
                status: reply.status,
                body: reply_body_value(&reply.body),
            },
        };
        write_fixture(&self.dir, &fixture).map_err(TransportError::Fixture)?;
        Ok(reply)
    }
}

pub fn write_fixture(dir: &Path, fixture: &Fixture) -> Result<PathBuf, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let path = dir.join(fixture_file_name(
        &fixture.request.url,
        &fixture.request.body,
    ));
    let text = serde_json::to_string_pretty(fixture).map_err(|e| e.to_string())?;
    std::fs::write(&path, text + "\n").map_err(|e| e.to_string())?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 250,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << retry.min(16)))
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("limiter lock");
        while *used >= self.cap {
            used = self.freed.wait(used).expect("limiter lock");
        }
        *used += 1;
        Permit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.used.lock().expect("limiter lock")
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.limiter.used.lock().expect("limiter lock");
        *used -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Endpoint, model and credential of a remote provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_in_flight() -> usize {
    4
}

impl RemoteConfig {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads `{PREFIX}_ENDPOINT`, `{PREFIX}_MODEL` and `{PREFIX}_API_KEY`.
    pub fn from_env(prefix: &str) -> Result<Self, RemoteError> {
        let var = |name: &str| {
            std::env::var(format!("{prefix}_{name}"))
                .ok()
                .filter(|v| !v.is_empty())
        };
        let endpoint = var("ENDPOINT")
            .ok_or_else(|| RemoteError::Config(format!("{prefix}_ENDPOINT is not set")))?;
        let model = var("MODEL")
            .ok_or_else(|| RemoteError::Config(format!("{prefix}_MODEL is not set")))?;
        Ok(Self::new(endpoint, model, var("API_KEY")))
    }
}

pub struct RemoteClient {
    config: RemoteConfig,
    transport: Arc<dyn Transport>,
    limiter: InFlightLimiter,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig, transport: Arc<dyn Transport>) -> Self {
        let limiter = InFlightLimiter::new(config.max_in_flight);
        Self {
            config,
            transport,
            limiter,
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub fn limiter(&self) -> &InFlightLimiter {
        &self.limiter
    }

    /// Posts `body` and parses a 2xx reply as JSON, retrying network errors, 429 and 5xx.
    pub fn call(&self, body: &Value) -> Result<Value, RemoteError> {
        let retry = self.config.retry;
        let mut attempt = 0;
        loop {
            let outcome = {
                let _permit = self.limiter.acquire();
                self.transport.post_json(
                    &self.config.endpoint,
                    self.config.api_key.as_deref(),
                    body,
                )
            };
            let error = match outcome {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return serde_json::from_str(&reply.body)
                        .map_err(|e| RemoteError::Malformed(e.to_string()));
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(RemoteError::Auth {
                        status: reply.status,
                        body: reply.body,
                    });
                }
                Ok(reply) => {
                    let error = RemoteError::Provider {
                        status: reply.status,
                        body: reply.body,
                    };
                    if !(reply.status == 429 || reply.status >= 500) {
                        return Err(error);
                    }
                    error
                }
                Err(TransportError::Network(msg)) => RemoteError::Network(msg),
                Err(TransportError::Fixture(msg)) => return Err(RemoteError::Network(msg)),
            };
            if attempt >= retry.max_retries {
                return Err(error);
            }
            std::thread::sleep(retry.delay(attempt));
            attempt += 1;
        }
    }
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use serde_json::json;

    #[test]
    fn retries_transient_then_succeeds() {
        let transport = Arc::new(ScriptedTransport::new(vec![
            ScriptedTransport::status(503),
            Err(TransportError::Network("reset".into())),
            ScriptedTransport::ok(json!({"ok": true})),
        ]));
        let client = RemoteClient::new(fast_config(), transport.clone());
        assert_eq!(client.call(&json!({})).unwrap(), json!({"ok": true}));
        let requests = transport.requests.lock().unwrap();
        assert_eq!(requests.len(), 3);
        assert_eq!(requests[0].1.as_deref(), Some("sk-test"));
    }

    #[test]
    fn rate_limit_exhausts_bounded_retries() {
        let transport = Arc::new(ScriptedTransport::new(
            (0..10).map(|_| ScriptedTransport::status(429)).collect(),
        ));
        let client = RemoteClient::new(fast_config(), transport.clone());
        let err = client.call(&json!({})).unwrap_err();
        assert!(
            matches!(err, RemoteError::Provider { status: 429, .. }),
            "{err:?}"
        );
        assert_eq!(transport.requests.lock().unwrap().len(), 4);
    }

    #[test]
    fn auth_and_client_errors_are_not_retried() {
        let transport = Arc::new(ScriptedTransport::new(vec![ScriptedTransport::status(401)]));
        let client = RemoteClient::new(fast_config(), transport.clone());
        assert!(matches!(
            client.call(&json!({})),
            Err(RemoteError::Auth { status: 401, .. })
        ));

        let transport = Arc::new(ScriptedTransport::new(vec![ScriptedTransport::status(400)]));
        let client = RemoteClient::new(fast_config(), transport.clone());
        assert!(matches!(
            client.call(&json!({})),
            Err(RemoteError::Provider { status: 400, .. })
        ));
        assert_eq!(transport.requests.lock().unwrap().len(), 1);
    }

    #[test]
    fn malformed_success_body() {
        let transport = Arc::new(ScriptedTransport::new(vec![Ok(HttpReply {
            status: 200,
            body: "not json".into(),
        })]));
        let client = RemoteClient::new(fast_config(), transport);
        assert!(matches!(
            client.call(&json!({})),
            Err(RemoteError::Malformed(_))
        ));
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let body = json!({"model": "m", "input": ["a"]});
        let inner = Arc::new(ScriptedTransport::new(vec![ScriptedTransport::ok(
            json!({"data": [1, 2]}),
        )]));
        let recorder = RecordingTransport::new(inner, dir.path());
        let live = recorder.post_json("http://x/v1", Some("k"), &body).unwrap();

        let replay = ReplayTransport::new(dir.path());
        let replayed = replay.post_json("http://x/v1", None, &body).unwrap();
        assert_eq!(live, replayed);

        let file =
            std::fs::read_to_string(dir.path().join(fixture_file_name("http://x/v1", &body)))
                .unwrap();
        assert!(
            file.contains("\n  \"request\": {"),
            "fixtures are pretty-printed: {file}"
        );
        assert!(!file.contains("\"k\""), "credentials are never recorded");

        let missing = replay.post_json("http://x/v1", None, &json!({"other": 1}));
        assert!(matches!(missing, Err(TransportError::Fixture(_))));
    }

    #[test]
    fn limiter_caps_concurrency() {
        let limiter = Arc::new(InFlightLimiter::new(2));
        let peak = Arc::new(Mutex::new(0usize));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let limiter = limiter.clone();
                let peak = peak.clone();
                s.spawn(move || {
                    let _p = limiter.acquire();
                    let now = limiter.in_flight();
                    let mut peak = peak.lock().unwrap();
                    *peak = (*peak).max(now);
                    drop(peak);
                    std::thread::sleep(Duration::from_millis(5));
                });
            }
        });
        assert!(*peak.lock().unwrap() <= 2);
        assert_eq!(limiter.in_flight(), 0);
    }

    #[test]
    fn backoff_doubles() {
        let policy = RetryPolicy {
            max_retries: 3,
            base_delay_ms: 100,
        };
        assert_eq!(policy.delay(0), Duration::from_millis(100));
        assert_eq!(policy.delay(2), Duration::from_millis(400));
    }
}
