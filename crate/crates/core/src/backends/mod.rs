//! Model-service boundary: MLLM reasoning, segmentation, inpainting,
//! embeddings and judging. Each interface has a remote HTTP adapter and a
//! deterministic offline mock.

pub mod config;
pub mod mock;
pub mod remote;
pub mod scene;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryMask, RasterError, RasterImage};
use crate::types::SEG_MARKER;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },
    #[error("backend returned status {status}: {body_excerpt}")]
    Status { status: u16, body_excerpt: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("cannot localize {reference:?}: {reason}")]
    Localization { reference: String, reason: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport { retryable, .. } => *retryable,
            BackendError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

impl From<RasterError> for BackendError {
    fn from(e: RasterError) -> Self {
        match e {
            RasterError::Shape { .. } => BackendError::Shape(e.to_string()),
            RasterError::Argument(m) => BackendError::Argument(m),
            RasterError::Codec(m) => BackendError::Protocol(m),
        }
    }
}

pub type BackendResult<T> = std::result::Result<T, BackendError>;

pub trait MllmBackend: Send + Sync {
    fn chat(&self, image: Option<&RasterImage>, prompt: &str) -> BackendResult<String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub reply_text: String,
    pub masks: Vec<BinaryMask>,
}

pub trait SegmentationBackend: Send + Sync {
    fn segment(&self, image: &RasterImage, dialogue: &str) -> BackendResult<Segmentation>;
}

pub trait InpaintBackend: Send + Sync {
    fn inpaint(&self, image: &RasterImage, mask: &BinaryMask, prompt: &str)
        -> BackendResult<RasterImage>;
}

pub trait EmbeddingBackend: Send + Sync {
    /// Identifier recorded in report headers.
    fn model_id(&self) -> String;
    fn embed_image(&self, image: &RasterImage) -> BackendResult<Vec<f64>>;
    fn embed_text(&self, text: &str) -> BackendResult<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JudgeCriterion {
    Alignment,
    Coherence,
}

impl fmt::Display for JudgeCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JudgeCriterion::Alignment => "ALIGNMENT",
            JudgeCriterion::Coherence => "COHERENCE",
        })
    }
}

/// Returns the judge's raw reply; parsing and clamping happen in `evalx::judge_score`.
pub trait JudgeBackend: Send + Sync {
    fn judge(
        &self,
        source: &RasterImage,
        edited: &RasterImage,
        instruction: &str,
        criterion: JudgeCriterion,
    ) -> BackendResult<String>;
}

/// Enforces the segmentation contract on any implementation: one mask per
/// marker, each the size of the input image.
pub fn validate_segmentation(image: &RasterImage, seg: &Segmentation) -> BackendResult<()> {
    let markers = seg.reply_text.matches(SEG_MARKER).count();
    if markers != seg.masks.len() {
        return Err(BackendError::Protocol(format!(
            "reply has {markers} {SEG_MARKER} markers but {} masks",
            seg.masks.len()
        )));
    }
    for (i, m) in seg.masks.iter().enumerate() {
        if m.dims() != image.dims() {
            return Err(BackendError::Protocol(format!(
                "mask {i} is {:?} but image is {:?}",
                m.dims(),
                image.dims()
            )));
        }
    }
    Ok(())
}

/// Wraps a segmentation backend with [`validate_segmentation`].
pub struct ValidatedSegmenter<S: ?Sized>(pub Arc<S>);

impl<S: SegmentationBackend + ?Sized> SegmentationBackend for ValidatedSegmenter<S> {
    fn segment(&self, image: &RasterImage, dialogue: &str) -> BackendResult<Segmentation> {
        let seg = self.0.segment(image, dialogue)?;
        validate_segmentation(image, &seg)?;
        Ok(seg)
    }
}

/// The three backends a pipeline run needs.
#[derive(Clone)]
pub struct Backends {
    pub mllm: Arc<dyn MllmBackend>,
    pub segmenter: Arc<dyn SegmentationBackend>,
    pub inpainter: Arc<dyn InpaintBackend>,
}

impl Backends {
    pub fn new(
        mllm: Arc<dyn MllmBackend>,
        segmenter: Arc<dyn SegmentationBackend>,
        inpainter: Arc<dyn InpaintBackend>,
    ) -> Self {
        Self {
            mllm,
            segmenter: Arc::new(ValidatedSegmenter(segmenter)),
            inpainter,
        }
    }

    /// Mock MLLM, oracle segmenter and compositor inpainter.
    pub fn mock() -> Self {
        Self::new(
            Arc::new(mock::MockMllm::default()),
            Arc::new(mock::OracleSegmenter::default()),
            Arc::new(mock::Compositor),
        )
    }
}
