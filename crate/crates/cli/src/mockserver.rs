//! HTTP server speaking the remote backend wire format, answering with the
//! in-process mocks. Lets the remote adapters run end to end without any
//! model behind them.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use cotcanvas::backends::mock::{Compositor, FixedJudge, MeanPoolEmbedder, MockMllm, OracleSegmenter};
use cotcanvas::backends::{
    BackendError, EmbeddingBackend, InpaintBackend, JudgeBackend, JudgeCriterion, MllmBackend, SegmentationBackend,
};
use cotcanvas::codec::{image_from_b64, image_to_b64, mask_from_b64, mask_to_b64};

pub const ROUTES: [&str; 5] = ["mllm", "segmentation", "inpaint", "embedding", "judge"];

pub struct MockBackends {
    pub mllm: Arc<dyn MllmBackend>,
    pub segmenter: Arc<dyn SegmentationBackend>,
    pub inpainter: Arc<dyn InpaintBackend>,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub judge: Arc<dyn JudgeBackend>,
    hits: [AtomicU64; 5],
}

impl Default for MockBackends {
    fn default() -> Self {
        Self {
            mllm: Arc::new(MockMllm::default()),
            segmenter: Arc::new(OracleSegmenter::default()),
            inpainter: Arc::new(Compositor),
            embedder: Arc::new(MeanPoolEmbedder),
            judge: Arc::new(FixedJudge::default()),
            hits: Default::default(),
        }
    }
}

impl MockBackends {
    pub fn hits(&self) -> Value {
        let mut m = serde_json::Map::new();
        for (name, n) in ROUTES.iter().zip(&self.hits) {
            m.insert(name.to_string(), n.load(Ordering::Relaxed).into());
        }
        Value::Object(m)
    }

    fn handle(&self, route: usize, body: &Value) -> Result<Value, BackendError> {
        self.hits[route].fetch_add(1, Ordering::Relaxed);
        let text = |k: &str| {
            body.get(k)
                .and_then(Value::as_str)
                .ok_or_else(|| BackendError::Argument(format!("missing string field {k:?}")))
        };
        let image = |k: &str| image_from_b64(text(k)?).map_err(BackendError::from);
        match ROUTES[route] {
            "mllm" => {
                let img = body.get("image_b64").map(|_| image("image_b64")).transpose()?;
                Ok(json!({ "text": self.mllm.chat(img.as_ref(), text("prompt")?)? }))
            }
            "segmentation" => {
                let seg = self.segmenter.segment(&image("image_b64")?, text("prompt")?)?;
                let masks = seg.masks.iter().map(mask_to_b64).collect::<Result<Vec<_>, _>>()?;
                Ok(json!({ "text": seg.reply_text, "masks_b64": masks }))
            }
            "inpaint" => {
                let mask = mask_from_b64(text("mask_b64")?)?;
                let out = self.inpainter.inpaint(&image("image_b64")?, &mask, text("prompt")?)?;
                Ok(json!({ "image_b64": image_to_b64(&out)? }))
            }
            "embedding" => {
                let v = match body.get("text").and_then(Value::as_str) {
                    Some(t) => self.embedder.embed_text(t)?,
                    None => self.embedder.embed_image(&image("image_b64")?)?,
                };
                Ok(json!({ "embedding": v }))
            }
            _ => {
                let criterion = match text("criterion")? {
                    "ALIGNMENT" => JudgeCriterion::Alignment,
                    "COHERENCE" => JudgeCriterion::Coherence,
                    other => return Err(BackendError::Argument(format!("unknown criterion {other:?}"))),
                };
                let reply =
                    self.judge.judge(&image("source_b64")?, &image("edited_b64")?, text("instruction")?, criterion)?;
                Ok(json!({ "text": reply }))
            }
        }
    }
}

async fn dispatch(state: Arc<MockBackends>, route: usize, body: axum::body::Bytes) -> Response {
    let res = tokio::task::spawn_blocking(move || {
        let v: Value = serde_json::from_slice(&body).map_err(|e| BackendError::Argument(format!("bad json: {e}")))?;
        state.handle(route, &v)
    })
    .await;
    match res {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e @ (BackendError::Argument(_) | BackendError::Protocol(_) | BackendError::Shape(_)))) => {
            (StatusCode::BAD_REQUEST, e.to_string()).into_response()
        }
        Ok(Err(e)) => (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

pub fn router(state: Arc<MockBackends>) -> Router {
    let mut r = Router::new().route(
        "/stats",
        get(|State(s): State<Arc<MockBackends>>| async move { Json(s.hits()) }),
    );
    for (i, name) in ROUTES.iter().enumerate() {
        r = r.route(
            &format!("/{name}"),
            post(move |State(s): State<Arc<MockBackends>>, body: axum::body::Bytes| dispatch(s, i, body)),
        );
    }
    r.layer(axum::extract::DefaultBodyLimit::max(256 * 1024 * 1024)).with_state(state)
}

/// Backend configuration TOML pointing every section at `base` (e.g. `http://127.0.0.1:9000`).
pub fn config_toml(base: &str) -> String {
    let base = base.trim_end_matches('/');
    let mut out = String::new();
    for name in ROUTES {
        out.push_str(&format!("[{name}]\nurl = \"{base}/{name}\"\n"));
        if name == "embedding" {
            out.push_str("model = \"mock-meanpool-8x8\"\n");
        }
        out.push('\n');
    }
    out
}
