//! Model backends: the local rule oracle, recorded responses, and a remote
//! OpenAI-style chat-completions endpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use log::{debug, warn};
use serde_json::{json, Value};
use thiserror::Error;

use crate::gcode::ValidationLimits;
use crate::report::serialize_report;
use crate::verifier::verify_oracle;
use crate::vision::{classify_indicators, crop_pct, encode_png, BBoxPct, IndicatorLayout};
use crate::vlm::{messages_digest, ChatMessage, ConfigError, Part, Role, RunConfig, GCODE_HEADER};

pub const API_KEY_ENV: &str = "GVERIFY_API_KEY";
pub const ENDPOINT_ENV: &str = "GVERIFY_ENDPOINT";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("API returned status {status}: {body}")]
    Api { status: u16, body: String },
    #[error("no recorded response for digest {0}")]
    MockMiss(String),
    #[error("invalid request: {0}")]
    Request(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

pub trait ModelBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError>;
}

impl ModelBackend for Box<dyn ModelBackend> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(messages)
    }
}

/// Checks the sequence shape, then asks the backend for a completion.
pub fn call_model(backend: &dyn ModelBackend, messages: &[ChatMessage]) -> Result<String, BackendError> {
    match messages.first() {
        None => return Err(BackendError::Request("message list is empty".into())),
        Some(m) if m.role != Role::System => {
            return Err(BackendError::Request("first message must be the system prompt".into()))
        }
        _ => {}
    }
    backend.complete(messages)
}

/// Runs the local verifier on the program and the first screenshot of the
/// final user message.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    pub limits: ValidationLimits,
    pub layout: IndicatorLayout,
    pub cluster_bbox: BBoxPct,
}

impl OracleBackend {
    pub fn new(cluster_bbox: BBoxPct) -> Self {
        OracleBackend {
            limits: ValidationLimits::default(),
            layout: IndicatorLayout::default(),
            cluster_bbox,
        }
    }
}

impl ModelBackend for OracleBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let last = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::Request("no user message".into()))?;
        let gcode = last
            .texts()
            .find_map(|t| t.strip_prefix(GCODE_HEADER))
            .ok_or_else(|| BackendError::Request("final user message carries no G-code".into()))?;
        let image = last
            .images()
            .next()
            .ok_or_else(|| BackendError::Request("final user message carries no image".into()))?;
        let cluster = crop_pct(&image.image, &self.cluster_bbox);
        let indicators = classify_indicators(&cluster, &self.layout)
            .map_err(|e| BackendError::Request(e.to_string()))?;
        Ok(serialize_report(&verify_oracle(gcode, indicators, &self.limits)))
    }
}

/// Replays responses stored as `<dir>/<digest>.txt`.
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub dir: PathBuf,
}

impl MockBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        MockBackend { dir: dir.into() }
    }

    pub fn recording_path(dir: &Path, digest: &str) -> PathBuf {
        dir.join(format!("{digest}.txt"))
    }
}

impl ModelBackend for MockBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let digest = messages_digest(messages);
        let path = Self::recording_path(&self.dir, &digest);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(BackendError::MockMiss(digest)),
            Err(e) => Err(BackendError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            }),
        }
    }
}

/// Wraps a backend and stores every response under its digest.
pub struct Recorder<B> {
    pub inner: B,
    pub dir: PathBuf,
}

impl<B: ModelBackend> ModelBackend for Recorder<B> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let text = self.inner.complete(messages)?;
        let path = MockBackend::recording_path(&self.dir, &messages_digest(messages));
        fs::create_dir_all(&self.dir)
            .and_then(|_| fs::write(&path, &text))
            .map_err(|e| BackendError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        Ok(text)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    model: String,
    temperature: f64,
    retries: u32,
    backoff: Duration,
}

impl RemoteBackend {
    pub fn new(config: &RunConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Request(e.to_string()))?;
        Ok(RemoteBackend {
            client,
            endpoint: config.endpoint.trim_end_matches('/').to_string(),
            api_key,
            model: config.model_name.clone(),
            temperature: config.temperature,
            retries: config.retries,
            backoff: Duration::from_millis(config.backoff_ms),
        })
    }

    /// Reads the bearer token from `GVERIFY_API_KEY`.
    pub fn from_env(config: &RunConfig) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| ConfigError(format!("{API_KEY_ENV} is not set")))?;
        Self::new(config, Some(key))
    }

    pub fn request_body(&self, messages: &[ChatMessage]) -> Value {
        json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": messages.iter().map(wire_message).collect::<Vec<_>>(),
        })
    }
}

fn data_url(part: &crate::vlm::ImagePart) -> String {
    let b64 = base64::engine::general_purpose::STANDARD.encode(encode_png(&part.image));
    format!("data:{};base64,{b64}", part.media_type)
}

fn wire_message(m: &ChatMessage) -> Value {
    if m.role != Role::User {
        return json!({ "role": m.role.as_str(), "content": m.joined_text() });
    }
    let content: Vec<Value> = m
        .parts
        .iter()
        .map(|p| match p {
            Part::Text(t) => json!({ "type": "text", "text": t }),
            Part::Image(i) => json!({ "type": "image_url", "image_url": { "url": data_url(i) } }),
        })
        .collect();
    json!({ "role": "user", "content": content })
}

/// POSTs `body` to `url` with bearer auth, retrying transport failures with
/// exponential backoff. Non-success statuses are returned without retry.
pub(crate) fn post_json_with_retry(
    client: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
    retries: u32,
    backoff: Duration,
) -> Result<Value, BackendError> {
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        let mut req = client.post(url).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let outcome = req.send().and_then(|resp| {
            let status = resp.status();
            resp.text().map(|text| (status, text))
        });
        match outcome {
            Ok((status, text)) if status.is_success() => {
                return serde_json::from_str(&text).map_err(|e| BackendError::Api {
                    status: status.as_u16(),
                    body: format!("unparseable body ({e}): {text}"),
                });
            }
            Ok((status, text)) => {
                return Err(BackendError::Api {
                    status: status.as_u16(),
                    body: text,
                })
            }
            Err(e) if attempt <= retries => {
                let delay = backoff * 2u32.saturating_pow(attempt - 1);
                warn!("request to {url} failed ({e}); retrying in {delay:?}");
                std::thread::sleep(delay);
            }
            Err(e) => {
                return Err(BackendError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                })
            }
        }
    }
}

impl ModelBackend for RemoteBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", self.endpoint);
        debug!("POST {url} with {} messages", messages.len());
        let body = self.request_body(messages);
        let resp = post_json_with_retry(
            &self.client,
            &url,
            self.api_key.as_deref(),
            &body,
            self.retries,
            self.backoff,
        )?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Api {
                status: 200,
                body: format!("response has no choices[0].message.content: {resp}"),
            })
    }
}
