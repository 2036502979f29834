#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use base64::Engine;
use serde_json::Value;

use cotcanvas::backends::scene::{generate_scene, Shape};
use cotcanvas::codec::encode_image_png;

pub const BIN: &str = env!("CARGO_BIN_EXE_cotcanvas");

pub fn scene_png(seed: u64, spec: &[(&str, Shape)]) -> Vec<u8> {
    encode_image_png(&generate_scene(seed, Some(spec)).unwrap().image).unwrap()
}

pub fn b64(s: &str) -> Vec<u8> {
    base64::engine::general_purpose::STANDARD.decode(s).unwrap()
}

/// Blocking HTTP client that reports every status instead of erroring.
#[derive(Clone)]
pub struct Http {
    agent: ureq::Agent,
    pub base: String,
    pub token: Option<String>,
}

impl Http {
    pub fn new(base: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(std::time::Duration::from_secs(60)))
            .build()
            .into();
        Self { agent, base: base.trim_end_matches('/').to_string(), token: None }
    }

    pub fn with_token(mut self, t: &str) -> Self {
        self.token = Some(t.to_string());
        self
    }

    fn finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<(u16, Vec<u8>), ureq::Error> {
        let mut resp = resp?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().with_config().limit(1 << 30).read_to_vec()?;
        Ok((status, body))
    }

    pub fn try_get(&self, path: &str) -> Result<(u16, Vec<u8>), ureq::Error> {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        Self::finish(req.call())
    }

    pub fn try_post(&self, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>), ureq::Error> {
        let mut req = self.agent.post(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        Self::finish(req.send(body))
    }

    pub fn get(&self, path: &str) -> (u16, Vec<u8>) {
        self.try_get(path).unwrap()
    }

    pub fn post(&self, path: &str, body: &[u8]) -> (u16, Vec<u8>) {
        self.try_post(path, body).unwrap()
    }

    pub fn get_json(&self, path: &str) -> (u16, Value) {
        let (s, b) = self.get(path);
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    pub fn post_json(&self, path: &str, body: &Value) -> (u16, Value) {
        let (s, b) = self.post(path, &serde_json::to_vec(body).unwrap());
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    pub fn create(&self, png: &[u8]) -> String {
        let (s, b) = self.post("/v1/sessions", png);
        assert_eq!(s, 201, "{}", String::from_utf8_lossy(&b));
        serde_json::from_slice::<Value>(&b).unwrap()["session_id"].as_str().unwrap().to_string()
    }
}

/// Serve `app` on an ephemeral port from a background runtime.
pub fn serve_in_process(app: axum::Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(l.local_addr().unwrap()).unwrap();
            axum::serve(l, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

pub fn api_in_process(store: &Path, dilation: u32, token: Option<&str>) -> String {
    use cotcanvas::backends::Backends;
    use cotcanvas::decompose::ClauseLexicon;
    use cotcanvas::pipeline::PipelinePolicy;
    use cotcanvas_app::api::{router, ApiState};
    use cotcanvas_app::service::EditService;
    use cotcanvas_app::store::SessionStore;

    let policy = PipelinePolicy { mask_dilation_px: dilation, ..Default::default() };
    let svc = EditService::open(SessionStore::open(store).unwrap(), Backends::mock(), policy, ClauseLexicon::default())
        .unwrap();
    serve_in_process(router(ApiState { service: Arc::new(svc), token: token.map(str::to_string) }))
}

/// A child process running the binary that announced its address.
pub struct Spawned {
    pub child: Child,
    pub base: String,
}

impl Spawned {
    pub fn start(args: &[&str]) -> Self {
        let mut child = Command::new(BIN)
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn binary");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected first line {line:?}"))
            .to_string();
        Self { child, base }
    }

    /// SIGKILL, no cleanup.
    pub fn kill9(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Spawned {
    fn drop(&mut self) {
        self.kill9();
    }
}
