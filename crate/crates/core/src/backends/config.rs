//! Endpoint configuration: a TOML file with one section per backend, plus
//! `COTCANVAS_*` environment overrides.
//!
//! ```toml
//! [mllm]
//! url = "http://127.0.0.1:9000/chat"
//! key = "secret"
//! timeout_s = 30
//! retries = 2
//! ```
//!
//! Overrides: `COTCANVAS_<SECTION>_URL`, `COTCANVAS_<SECTION>_KEY` per
//! section, and `COTCANVAS_TIMEOUT_S`, `COTCANVAS_RETRIES` for all sections.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::remote::{
    RemoteEmbedding, RemoteEndpoint, RemoteInpaint, RemoteJudge, RemoteMllm, RemoteSegmentation,
};
use super::Backends;

pub const DEFAULT_TIMEOUT_S: f64 = 60.0;
pub const DEFAULT_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Parse(String),
    #[error("no endpoint configured for [{0}]")]
    Missing(&'static str),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    #[serde(default)]
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retries: Option<u32>,
    /// Model identifier reported alongside metrics (embedding section).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl EndpointConfig {
    pub fn endpoint(&self) -> RemoteEndpoint {
        let mut ep = RemoteEndpoint::new(&self.url);
        ep.key = self.key.clone();
        ep.timeout = Duration::from_secs_f64(self.timeout_s.unwrap_or(DEFAULT_TIMEOUT_S));
        ep.retries = self.retries.unwrap_or(DEFAULT_RETRIES);
        ep
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub mllm: Option<EndpointConfig>,
    pub segmentation: Option<EndpointConfig>,
    pub inpaint: Option<EndpointConfig>,
    pub embedding: Option<EndpointConfig>,
    pub judge: Option<EndpointConfig>,
}

const SECTIONS: [&str; 5] = ["mllm", "segmentation", "inpaint", "embedding", "judge"];

impl BackendsConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Read `path` (if given) and apply the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })?)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    fn section_mut(&mut self, name: &str) -> &mut Option<EndpointConfig> {
        match name {
            "mllm" => &mut self.mllm,
            "segmentation" => &mut self.segmentation,
            "inpaint" => &mut self.inpaint,
            "embedding" => &mut self.embedding,
            _ => &mut self.judge,
        }
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let timeout = get("COTCANVAS_TIMEOUT_S")
            .map(|v| v.trim().parse::<f64>().map_err(|_| ConfigError::Parse(format!("COTCANVAS_TIMEOUT_S={v:?}"))))
            .transpose()?;
        let retries = get("COTCANVAS_RETRIES")
            .map(|v| v.trim().parse::<u32>().map_err(|_| ConfigError::Parse(format!("COTCANVAS_RETRIES={v:?}"))))
            .transpose()?;
        for name in SECTIONS {
            let upper = name.to_uppercase();
            let url = get(&format!("COTCANVAS_{upper}_URL"));
            let key = get(&format!("COTCANVAS_{upper}_KEY"));
            let slot = self.section_mut(name);
            if url.is_some() && slot.is_none() {
                *slot = Some(EndpointConfig::default());
            }
            if let Some(ep) = slot.as_mut() {
                if let Some(u) = url {
                    ep.url = u;
                }
                if let Some(k) = key {
                    ep.key = Some(k);
                }
                if let Some(t) = timeout {
                    ep.timeout_s = Some(t);
                }
                if let Some(r) = retries {
                    ep.retries = Some(r);
                }
            }
        }
        Ok(())
    }

    fn require(&self, name: &'static str, ep: &Option<EndpointConfig>) -> Result<RemoteEndpoint, ConfigError> {
        match ep {
            Some(e) if !e.url.trim().is_empty() => Ok(e.endpoint()),
            _ => Err(ConfigError::Missing(name)),
        }
    }

    /// Remote MLLM, segmentation and inpainting adapters.
    pub fn remote_backends(&self) -> Result<Backends, ConfigError> {
        Ok(Backends::new(
            Arc::new(RemoteMllm::new(self.require("mllm", &self.mllm)?)),
            Arc::new(RemoteSegmentation::new(self.require("segmentation", &self.segmentation)?)),
            Arc::new(RemoteInpaint::new(self.require("inpaint", &self.inpaint)?)),
        ))
    }

    pub fn remote_embedding(&self) -> Result<RemoteEmbedding, ConfigError> {
        let ep = self.require("embedding", &self.embedding)?;
        let model = self.embedding.as_ref().and_then(|e| e.model.clone());
        Ok(RemoteEmbedding::new(ep, model))
    }

    pub fn remote_judge(&self) -> Result<RemoteJudge, ConfigError> {
        Ok(RemoteJudge::new(self.require("judge", &self.judge)?))
    }
}
