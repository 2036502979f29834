//! Interactive edit sessions over the review state machine, persisted in a
//! [`SessionStore`]. Operations on one session are serialized by its lock;
//! every mutation is written to disk before it is acknowledged.

use std::collections::HashMap;
use std::io;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use base64::Engine;
use serde::Serialize;
use thiserror::Error;

use cotcanvas::backends::{BackendError, Backends};
use cotcanvas::codec::{decode_image_png, decode_image_png_converting, decode_mask_png, encode_image_png, encode_mask_png};
use cotcanvas::decompose::ClauseLexicon;
use cotcanvas::pipeline::{
    Decision, Overrides, PipelineError, PipelinePolicy, ReviewBatch, ReviewError, StepProposal, StepStatus, TraceMeta,
};
use cotcanvas::raster::RasterImage;

use crate::store::{BatchRecord, ProposalRecord, SessionRecord, SessionStore, STORE_SCHEMA};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::NotFound(_) => 404,
            ServiceError::BadRequest(_) => 400,
            ServiceError::Conflict(_) => 409,
            ServiceError::Unprocessable(_) => 422,
            ServiceError::Backend(_) => 502,
            ServiceError::Internal(_) => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Unprocessable(_) => "unprocessable",
            ServiceError::Backend(_) => "backend",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl From<io::Error> for ServiceError {
    fn from(e: io::Error) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

impl From<PipelineError> for ServiceError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Decompose(_)
            | PipelineError::TooManySteps { .. }
            | PipelineError::LocalizationEmpty { .. }
            | PipelineError::Backend(BackendError::Localization { .. }) => ServiceError::Unprocessable(e.to_string()),
            PipelineError::Policy(_) => ServiceError::Internal(e.to_string()),
            _ => ServiceError::Backend(e.to_string()),
        }
    }
}

impl From<ReviewError> for ServiceError {
    fn from(e: ReviewError) -> Self {
        match e {
            ReviewError::NoSuchStep(n) => ServiceError::NotFound(format!("no step {n}")),
            ReviewError::Conflict(m) => ServiceError::Conflict(m),
            ReviewError::InvalidOverride(_) => ServiceError::Unprocessable(e.to_string()),
            ReviewError::Pipeline(p) => p.into(),
        }
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;

#[derive(Debug, Clone)]
struct Session {
    id: String,
    created_unix: u64,
    updated_unix: u64,
    canvas: RasterImage,
    canvas_blob: String,
    history: Vec<TraceMeta>,
    pending: Option<ReviewBatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProposalView {
    pub index: usize,
    pub status: StepStatus,
    pub kind: String,
    pub clause: String,
    pub target_ref: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor_ref: Option<String>,
    pub reasoning: Option<String>,
    pub area_description: Option<String>,
    pub inpaint_prompt: Option<String>,
    pub mask_area: usize,
    pub mask_url: String,
    pub transitions: Vec<StepStatus>,
    pub feedback: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ProposalView {
    fn new(session: &str, p: &StepProposal) -> Self {
        Self {
            index: p.index,
            status: p.status,
            kind: p.sub_prompt.kind.as_str().to_string(),
            clause: p.sub_prompt.raw_clause.clone(),
            target_ref: p.sub_prompt.target_ref.clone(),
            anchor_ref: p.sub_prompt.anchor_ref.clone(),
            reasoning: p.cot_step.as_ref().map(|c| c.reasoning.clone()),
            area_description: p.cot_step.as_ref().and_then(|c| c.area_description.clone()),
            inpaint_prompt: p.cot_step.as_ref().map(|c| c.inpaint_prompt.clone()),
            mask_area: p.mask.area(),
            mask_url: format!("/v1/sessions/{session}/proposals/{}/mask.png", p.index),
            transitions: p.transitions.clone(),
            feedback: p.feedback.clone(),
            note: p.note.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProposalList {
    pub session_id: String,
    pub instruction: Option<String>,
    pub next_step: Option<usize>,
    pub proposals: Vec<ProposalView>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingView {
    pub instruction: String,
    pub next_step: Option<usize>,
    pub trace: TraceMeta,
    pub proposals: Vec<ProposalView>,
}

/// Full session history with every image inlined as base64 PNG.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceView {
    pub session_id: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub history: Vec<TraceMeta>,
    pub pending: Option<PendingView>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn codec_err(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Internal(format!("codec: {e}"))
}

pub struct EditService {
    store: SessionStore,
    backends: Backends,
    policy: PipelinePolicy,
    lexicon: ClauseLexicon,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // a panic inside one request must not wedge the session forever
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl EditService {
    /// Open the store and load every session in it.
    pub fn open(store: SessionStore, backends: Backends, policy: PipelinePolicy, lexicon: ClauseLexicon) -> ServiceResult<Self> {
        let svc = Self { store, backends, policy, lexicon, sessions: Mutex::new(HashMap::new()) };
        let mut map = HashMap::new();
        for id in svc.store.session_ids()? {
            let s = svc.load_session(&id)?;
            map.insert(id, Arc::new(Mutex::new(s)));
        }
        log::info!("loaded {} sessions from {}", map.len(), svc.store.root().display());
        *lock(&svc.sessions) = map;
        Ok(svc)
    }

    pub fn session_count(&self) -> usize {
        lock(&self.sessions).len()
    }

    fn session(&self, id: &str) -> ServiceResult<Arc<Mutex<Session>>> {
        lock(&self.sessions).get(id).cloned().ok_or_else(|| ServiceError::NotFound(format!("no session {id}")))
    }

    fn load_session(&self, id: &str) -> ServiceResult<Session> {
        let rec = self.store.load(id)?;
        let mut get = |r: &str| self.store.get_blob(r);
        let (canvas, _) = decode_image_png_converting(&get(&rec.canvas)?).map_err(codec_err)?;
        let pending = match &rec.pending {
            None => None,
            Some(b) => {
                let trace = b.trace.to_trace(&mut get)?;
                let mut proposals = Vec::with_capacity(b.proposals.len());
                for p in &b.proposals {
                    proposals.push(StepProposal {
                        index: p.index,
                        sub_prompt: p.sub_prompt.clone(),
                        cot_step: p.cot_step.clone(),
                        mask: decode_mask_png(&get(&p.mask)?).map_err(codec_err)?,
                        status: p.status,
                        transitions: p.transitions.clone(),
                        feedback: p.feedback.clone(),
                        note: p.note.clone(),
                    });
                }
                Some(ReviewBatch { instruction: b.instruction.clone(), trace, proposals })
            }
        };
        Ok(Session {
            id: rec.session_id,
            created_unix: rec.created_unix,
            updated_unix: rec.updated_unix,
            canvas,
            canvas_blob: rec.canvas,
            history: rec.history,
            pending,
        })
    }

    fn persist(&self, s: &Session) -> ServiceResult<()> {
        let mut put = |bytes: Vec<u8>, _: &str| self.store.put_blob(&bytes);
        let pending = match &s.pending {
            None => None,
            Some(b) => {
                let trace = TraceMeta::from_trace(&b.trace, None, &mut put)?;
                let mut proposals = Vec::with_capacity(b.proposals.len());
                for p in &b.proposals {
                    proposals.push(ProposalRecord {
                        index: p.index,
                        sub_prompt: p.sub_prompt.clone(),
                        cot_step: p.cot_step.clone(),
                        mask: put(encode_mask_png(&p.mask).map_err(codec_err)?, "mask")?,
                        status: p.status,
                        transitions: p.transitions.clone(),
                        feedback: p.feedback.clone(),
                        note: p.note.clone(),
                    });
                }
                Some(BatchRecord { instruction: b.instruction.clone(), trace, proposals })
            }
        };
        self.store.save(&SessionRecord {
            schema_version: STORE_SCHEMA,
            session_id: s.id.clone(),
            created_unix: s.created_unix,
            updated_unix: s.updated_unix,
            canvas: s.canvas_blob.clone(),
            history: s.history.clone(),
            pending,
        })?;
        Ok(())
    }

    /// Run `f` on a copy of the session, persist the copy, then commit it.
    fn mutate<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> ServiceResult<T>) -> ServiceResult<T> {
        let handle = self.session(id)?;
        let mut guard = lock(&handle);
        let mut next = guard.clone();
        let out = f(&mut next)?;
        next.updated_unix = now_unix();
        self.persist(&next)?;
        *guard = next;
        Ok(out)
    }

    /// New session from uploaded PNG bytes. The bytes are kept as-is as the
    /// first canvas blob, so identical uploads share storage.
    pub fn create_session(&self, png: &[u8]) -> ServiceResult<String> {
        let (canvas, _) = decode_image_png_converting(png)
            .map_err(|e| ServiceError::BadRequest(format!("cannot decode image: {e}")))?;
        let now = now_unix();
        let s = Session {
            id: uuid::Uuid::new_v4().to_string(),
            created_unix: now,
            updated_unix: now,
            canvas,
            canvas_blob: self.store.put_blob(png)?,
            history: Vec::new(),
            pending: None,
        };
        self.persist(&s)?;
        let id = s.id.clone();
        lock(&self.sessions).insert(id.clone(), Arc::new(Mutex::new(s)));
        Ok(id)
    }

    fn list(s: &Session) -> ProposalList {
        ProposalList {
            session_id: s.id.clone(),
            instruction: s.pending.as_ref().map(|b| b.instruction.clone()),
            next_step: s.pending.as_ref().and_then(ReviewBatch::next_step),
            proposals: s
                .pending
                .iter()
                .flat_map(|b| b.proposals.iter().map(|p| ProposalView::new(&s.id, p)))
                .collect(),
        }
    }

    pub fn propose(&self, id: &str, instruction: &str) -> ServiceResult<ProposalList> {
        self.mutate(id, |s| {
            if s.pending.is_some() {
                return Err(ServiceError::Conflict("a proposal batch is already pending".into()));
            }
            let batch = ReviewBatch::propose(&s.canvas, instruction, &self.policy, &self.backends, &self.lexicon)?;
            s.pending = Some(batch);
            Ok(Self::list(s))
        })
    }

    pub fn proposals(&self, id: &str) -> ServiceResult<ProposalList> {
        let h = self.session(id)?;
        let s = lock(&h);
        Ok(Self::list(&s))
    }

    pub fn resolve(&self, id: &str, n: usize, decision: Decision, overrides: Overrides) -> ServiceResult<ProposalView> {
        self.mutate(id, |s| {
            let batch = s
                .pending
                .as_mut()
                .ok_or_else(|| ServiceError::Conflict("no proposal batch is pending".into()))?;
            let view = ProposalView::new(&s.id, batch.resolve(n, decision, overrides, &self.policy, &self.backends)?);
            if decision == Decision::Approve {
                s.canvas = batch.canvas().clone();
                s.canvas_blob = self.store.put_blob(&encode_image_png(&s.canvas).map_err(codec_err)?)?;
                if batch.is_complete() {
                    let mut put = |bytes: Vec<u8>, _: &str| self.store.put_blob(&bytes);
                    let meta = TraceMeta::from_trace(&batch.trace, Some(&self.policy), &mut put)?;
                    s.history.push(meta);
                    s.pending = None;
                }
            }
            Ok(view)
        })
    }

    pub fn canvas_png(&self, id: &str) -> ServiceResult<Vec<u8>> {
        let h = self.session(id)?;
        let blob = lock(&h).canvas_blob.clone();
        Ok(self.store.get_blob(&blob)?)
    }

    pub fn mask_png(&self, id: &str, n: usize) -> ServiceResult<Vec<u8>> {
        let h = self.session(id)?;
        let s = lock(&h);
        let batch = s.pending.as_ref().ok_or_else(|| ServiceError::NotFound("no proposal batch is pending".into()))?;
        let p = batch.proposal(n)?;
        encode_mask_png(&p.mask).map_err(codec_err)
    }

    fn inline(&self, meta: &TraceMeta) -> ServiceResult<TraceMeta> {
        let b64 = |r: &str| -> ServiceResult<String> {
            Ok(base64::engine::general_purpose::STANDARD.encode(self.store.get_blob(r)?))
        };
        let mut out = meta.clone();
        out.initial = b64(&meta.initial)?;
        out.final_image = b64(&meta.final_image)?;
        for s in &mut out.steps {
            s.mask = b64(&s.mask)?;
            s.after = b64(&s.after)?;
        }
        Ok(out)
    }

    pub fn trace(&self, id: &str) -> ServiceResult<TraceView> {
        let h = self.session(id)?;
        let s = lock(&h);
        let history = s.history.iter().map(|m| self.inline(m)).collect::<ServiceResult<Vec<_>>>()?;
        let pending = match &s.pending {
            None => None,
            Some(b) => {
                let mut put = |bytes: Vec<u8>, _: &str| Ok(base64::engine::general_purpose::STANDARD.encode(bytes));
                Some(PendingView {
                    instruction: b.instruction.clone(),
                    next_step: b.next_step(),
                    trace: TraceMeta::from_trace(&b.trace, None, &mut put)?,
                    proposals: b.proposals.iter().map(|p| ProposalView::new(&s.id, p)).collect(),
                })
            }
        };
        Ok(TraceView {
            session_id: s.id.clone(),
            created_unix: s.created_unix,
            updated_unix: s.updated_unix,
            history,
            pending,
        })
    }
}

/// Decode a base64 PNG mask field from a request.
pub fn mask_from_field(b64: &str) -> ServiceResult<cotcanvas::raster::BinaryMask> {
    cotcanvas::codec::mask_from_b64(b64).map_err(|e| ServiceError::BadRequest(format!("mask_b64: {e}")))
}

/// Decode a stored canvas for callers that need pixels.
pub fn decode_canvas(png: &[u8]) -> ServiceResult<RasterImage> {
    decode_image_png(png).or_else(|_| decode_image_png_converting(png).map(|(i, _)| i)).map_err(codec_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cotcanvas::backends::scene::{generate_scene, Shape};

    fn service(dir: &std::path::Path) -> EditService {
        let policy = PipelinePolicy { mask_dilation_px: 0, ..Default::default() };
        EditService::open(SessionStore::open(dir).unwrap(), Backends::mock(), policy, ClauseLexicon::default()).unwrap()
    }

    fn png() -> Vec<u8> {
        let s = generate_scene(4, Some(&[("red", Shape::Square), ("blue", Shape::Circle)])).unwrap();
        encode_image_png(&s.image).unwrap()
    }

    #[test]
    fn session_lifecycle_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        let id = svc.create_session(&png()).unwrap();
        assert_eq!(svc.canvas_png(&id).unwrap(), png());
        let l = svc.propose(&id, "remove the red square and make the blue circle green").unwrap();
        assert_eq!(l.proposals.len(), 2);
        assert!(matches!(svc.propose(&id, "remove the red square"), Err(ServiceError::Conflict(_))));
        svc.resolve(&id, 1, Decision::Approve, Overrides::default()).unwrap();
        let before = serde_json::to_string(&svc.trace(&id).unwrap()).unwrap();
        let canvas = svc.canvas_png(&id).unwrap();
        drop(svc);

        let svc = service(dir.path());
        assert_eq!(serde_json::to_string(&svc.trace(&id).unwrap()).unwrap(), before);
        assert_eq!(svc.canvas_png(&id).unwrap(), canvas);
        svc.resolve(&id, 2, Decision::Approve, Overrides::default()).unwrap();
        let t = svc.trace(&id).unwrap();
        assert_eq!(t.history.len(), 1);
        assert!(t.pending.is_none());
        assert_eq!(svc.proposals(&id).unwrap().proposals.len(), 0);
    }

    #[test]
    fn error_statuses() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        assert_eq!(svc.create_session(b"abc").unwrap_err().status(), 400);
        assert_eq!(svc.proposals("nope").unwrap_err().status(), 404);
        let id = svc.create_session(&png()).unwrap();
        assert_eq!(svc.propose(&id, "sparkle the dog").unwrap_err().status(), 422);
        assert_eq!(svc.resolve(&id, 1, Decision::Approve, Overrides::default()).unwrap_err().status(), 409);
        svc.propose(&id, "remove the red square").unwrap();
        assert_eq!(svc.resolve(&id, 4, Decision::Approve, Overrides::default()).unwrap_err().status(), 404);
        assert_eq!(svc.mask_png(&id, 3).unwrap_err().status(), 404);
    }

    #[test]
    fn identical_uploads_share_a_blob() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        let a = svc.create_session(&png()).unwrap();
        let b = svc.create_session(&png()).unwrap();
        assert_ne!(a, b);
        assert_eq!(SessionStore::open(dir.path()).unwrap().blob_count().unwrap(), 1);
    }
}
