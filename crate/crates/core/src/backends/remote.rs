//! HTTP adapters. Every call is a JSON POST; images and masks travel as
//! base64 PNG.
//!
//! | backend      | request fields                                        | reply fields              |
//! |--------------|-------------------------------------------------------|---------------------------|
//! | mllm         | `prompt`, `image_b64`?                                | `text`                    |
//! | segmentation | `prompt`, `image_b64`                                 | `text`, `masks_b64[]`     |
//! | inpaint      | `prompt`, `image_b64`, `mask_b64`                     | `image_b64`               |
//! | embedding    | `image_b64` or `text`                                 | `embedding[]`             |
//! | judge        | `source_b64`, `edited_b64`, `instruction`, `criterion`| `text` or `score`         |

use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    BackendError, BackendResult, EmbeddingBackend, InpaintBackend, JudgeBackend, JudgeCriterion,
    MllmBackend, Segmentation, SegmentationBackend,
};
use crate::codec::{image_from_b64, image_to_b64, mask_from_b64, mask_to_b64};
use crate::raster::{BinaryMask, RasterImage};
use crate::types::SEG_MARKER;

const BODY_EXCERPT: usize = 200;
const MAX_BODY: u64 = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteEndpoint {
    pub url: String,
    pub key: Option<String>,
    pub timeout: Duration,
    /// Extra attempts after the first one.
    pub retries: u32,
    /// Delay before retry k is `backoff * 2^k`.
    pub backoff: Duration,
}

impl RemoteEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            key: None,
            timeout: Duration::from_secs(60),
            retries: 2,
            backoff: Duration::from_millis(50),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RetryPolicy {
    /// Retry on transport failures and 5xx.
    Idempotent,
    /// Retry only when the connection failed before anything was sent back.
    ConnectOnly,
}

#[derive(Debug, Clone)]
struct Client {
    endpoint: RemoteEndpoint,
    agent: ureq::Agent,
}

impl Client {
    fn new(endpoint: RemoteEndpoint) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { endpoint, agent }
    }

    fn once(&self, body: &Value) -> Result<Value, (BackendError, bool)> {
        let mut req = self.agent.post(&self.endpoint.url);
        if let Some(k) = &self.endpoint.key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => {
                let before_response = matches!(
                    e,
                    ureq::Error::ConnectionFailed | ureq::Error::HostNotFound
                ) || matches!(&e, ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::ConnectionRefused);
                return Err((
                    BackendError::Transport { message: e.to_string(), retryable: true },
                    before_response,
                ));
            }
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(MAX_BODY)
            .read_to_string()
            .map_err(|e| {
                (BackendError::Transport { message: e.to_string(), retryable: true }, false)
            })?;
        if !(200..300).contains(&status) {
            return Err((
                BackendError::Status {
                    status,
                    body_excerpt: text.chars().take(BODY_EXCERPT).collect(),
                },
                false,
            ));
        }
        serde_json::from_str(&text).map_err(|e| {
            (BackendError::Protocol(format!("reply is not JSON: {e}")), false)
        })
    }

    fn call(&self, body: &Value, policy: RetryPolicy) -> BackendResult<Value> {
        let mut attempt = 0u32;
        loop {
            match self.once(body) {
                Ok(v) => return Ok(v),
                Err((e, before_response)) => {
                    let again = attempt < self.endpoint.retries
                        && match policy {
                            RetryPolicy::Idempotent => e.is_retryable(),
                            RetryPolicy::ConnectOnly => before_response,
                        };
                    if !again {
                        return Err(e);
                    }
                    log::warn!("{}: attempt {} failed: {e}", self.endpoint.url, attempt + 1);
                    thread::sleep(self.endpoint.backoff * 2u32.saturating_pow(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

fn field_str<'a>(v: &'a Value, key: &str) -> BackendResult<&'a str> {
    v.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol(format!("reply lacks string field {key:?}")))
}

#[derive(Debug, Clone)]
pub struct RemoteMllm(Client);

impl RemoteMllm {
    pub fn new(endpoint: RemoteEndpoint) -> Self {
        Self(Client::new(endpoint))
    }
}

impl MllmBackend for RemoteMllm {
    fn chat(&self, image: Option<&RasterImage>, prompt: &str) -> BackendResult<String> {
        let mut body = json!({ "prompt": prompt });
        if let Some(img) = image {
            body["image_b64"] = Value::String(image_to_b64(img)?);
        }
        let reply = self.0.call(&body, RetryPolicy::Idempotent)?;
        Ok(field_str(&reply, "text")?.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct RemoteSegmentation(Client);

impl RemoteSegmentation {
    pub fn new(endpoint: RemoteEndpoint) -> Self {
        Self(Client::new(endpoint))
    }
}

impl SegmentationBackend for RemoteSegmentation {
    fn segment(&self, image: &RasterImage, dialogue: &str) -> BackendResult<Segmentation> {
        let body = json!({ "prompt": dialogue, "image_b64": image_to_b64(image)? });
        let reply = self.0.call(&body, RetryPolicy::Idempotent)?;
        let text = field_str(&reply, "text")?.to_string();
        let masks = match reply.get("masks_b64") {
            Some(Value::Array(items)) => items
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let s = m.as_str().ok_or_else(|| {
                        BackendError::Protocol(format!("masks_b64[{i}] is not a string"))
                    })?;
                    mask_from_b64(s)
                        .map_err(|e| BackendError::Protocol(format!("masks_b64[{i}]: {e}")))
                })
                .collect::<BackendResult<Vec<_>>>()?,
            None | Some(Value::Null) if !text.contains(SEG_MARKER) => Vec::new(),
            None | Some(Value::Null) => {
                return Err(BackendError::Protocol(format!(
                    "reply contains {SEG_MARKER} but no mask list"
                )))
            }
            Some(_) => return Err(BackendError::Protocol("masks_b64 is not a list".into())),
        };
        Ok(Segmentation { reply_text: text, masks })
    }
}

#[derive(Debug, Clone)]
pub struct RemoteInpaint(Client);

impl RemoteInpaint {
    pub fn new(endpoint: RemoteEndpoint) -> Self {
        Self(Client::new(endpoint))
    }
}

impl InpaintBackend for RemoteInpaint {
    fn inpaint(&self, image: &RasterImage, mask: &BinaryMask, prompt: &str) -> BackendResult<RasterImage> {
        let body = json!({
            "prompt": prompt,
            "image_b64": image_to_b64(image)?,
            "mask_b64": mask_to_b64(mask)?,
        });
        let reply = self.0.call(&body, RetryPolicy::ConnectOnly)?;
        image_from_b64(field_str(&reply, "image_b64")?)
            .map_err(|e| BackendError::Protocol(format!("image_b64: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedding {
    client: Client,
    model: Option<String>,
}

impl RemoteEmbedding {
    pub fn new(endpoint: RemoteEndpoint, model: Option<String>) -> Self {
        Self { client: Client::new(endpoint), model }
    }

    fn embed(&self, body: Value) -> BackendResult<Vec<f64>> {
        let reply = self.client.call(&body, RetryPolicy::Idempotent)?;
        let arr = reply
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("reply lacks embedding list".into()))?;
        arr.iter()
            .map(|v| v.as_f64().ok_or_else(|| BackendError::Protocol("non-numeric embedding value".into())))
            .collect()
    }
}

impl EmbeddingBackend for RemoteEmbedding {
    fn model_id(&self) -> String {
        self.model.clone().unwrap_or_else(|| self.client.endpoint.url.clone())
    }

    fn embed_image(&self, image: &RasterImage) -> BackendResult<Vec<f64>> {
        self.embed(json!({ "image_b64": image_to_b64(image)? }))
    }

    fn embed_text(&self, text: &str) -> BackendResult<Vec<f64>> {
        self.embed(json!({ "text": text }))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteJudge(Client);

impl RemoteJudge {
    pub fn new(endpoint: RemoteEndpoint) -> Self {
        Self(Client::new(endpoint))
    }
}

impl JudgeBackend for RemoteJudge {
    fn judge(
        &self,
        source: &RasterImage,
        edited: &RasterImage,
        instruction: &str,
        criterion: JudgeCriterion,
    ) -> BackendResult<String> {
        let body = json!({
            "source_b64": image_to_b64(source)?,
            "edited_b64": image_to_b64(edited)?,
            "instruction": instruction,
            "criterion": criterion.to_string(),
        });
        let reply = self.0.call(&body, RetryPolicy::Idempotent)?;
        match (reply.get("text"), reply.get("score")) {
            (Some(Value::String(s)), _) => Ok(s.clone()),
            (_, Some(Value::Number(n))) => Ok(n.to_string()),
            _ => Err(BackendError::Protocol("reply lacks text or score".into())),
        }
    }
}
