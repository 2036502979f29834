//! Evaluation harness: CLIP-style similarities through an embedding
//! backend, judge scores, the outside-mask fidelity ratio, and report rows.

pub mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EmbeddingBackend, JudgeBackend, JudgeCriterion};
use std::path::Path;

use crate::datagen::{read_dataset, DatasetEntry, DatasetError};
use crate::raster::{outside_mask_identical_ratio, BinaryMask, RasterError, RasterImage};

pub use report::{emit_report, parse_csv_report, Aggregates, MetricReport, ReportFormat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{0} embedding has zero norm")]
    ZeroNorm(&'static str),
    #[error("embedding sizes differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("judge protocol error: reply {0:?} is not an integer")]
    JudgeReply(String),
    #[error(transparent)]
    Shape(#[from] RasterError),
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::DimMismatch(a.len(), b.len()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 {
        return Err(MetricError::ZeroNorm("first"));
    }
    if nb == 0.0 {
        return Err(MetricError::ZeroNorm("second"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Image-image cosine similarity.
pub fn clip_i(source: &RasterImage, edited: &RasterImage, backend: &dyn EmbeddingBackend) -> Result<f64, MetricError> {
    cosine(&backend.embed_image(source)?, &backend.embed_image(edited)?)
}

/// Image-text cosine similarity.
pub fn clip_t(edited: &RasterImage, instruction: &str, backend: &dyn EmbeddingBackend) -> Result<f64, MetricError> {
    cosine(&backend.embed_image(edited)?, &backend.embed_text(instruction)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub score: u8,
    /// The raw reply was outside [0, 100].
    pub clamped: bool,
}

/// Ask the judge and parse its reply as an integer, clamped to [0, 100].
pub fn judge_score(
    source: &RasterImage,
    edited: &RasterImage,
    instruction: &str,
    criterion: JudgeCriterion,
    backend: &dyn JudgeBackend,
) -> Result<JudgeScore, MetricError> {
    let reply = backend.judge(source, edited, instruction, criterion)?;
    let v: i64 = reply
        .trim()
        .parse()
        .map_err(|_| MetricError::JudgeReply(reply.chars().take(40).collect()))?;
    let clamped = !(0..=100).contains(&v);
    if clamped {
        log::warn!("judge {criterion} score {v} clamped to [0, 100]");
    }
    Ok(JudgeScore { score: v.clamp(0, 100) as u8, clamped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub sample_id: String,
    pub source: RasterImage,
    pub edited: RasterImage,
    pub instruction: String,
    pub mask_union: Option<BinaryMask>,
}

impl EvalRecord {
    /// An eval record from a corpus entry; the entry must carry an edited image.
    pub fn from_entry(e: &DatasetEntry) -> Option<Self> {
        Some(Self {
            sample_id: e.sample.sample_id.clone(),
            source: e.sample.source.clone(),
            edited: e.edited.clone()?,
            instruction: e.sample.instruction.as_str().to_string(),
            mask_union: Some(e.sample.mask.clone()),
        })
    }
}

/// Load a dataset directory as an evaluation corpus. Every record must
/// carry an edited image.
pub fn read_eval_corpus(dir: &Path) -> Result<Vec<EvalRecord>, DatasetError> {
    let (entries, _) = read_dataset(dir)?;
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            EvalRecord::from_entry(e).ok_or_else(|| DatasetError::Corrupt {
                path: dir.display().to_string(),
                line: i + 1,
                message: format!("sample {} has no edited image", e.sample.sample_id),
            })
        })
        .collect()
}

/// Outside-mask identical ratio against the dilated mask union, or `None`
/// when the record has no mask (excluded from aggregation).
pub fn fidelity_ratio(record: &EvalRecord, dilation: u32) -> Result<Option<f64>, MetricError> {
    let Some(mask) = &record.mask_union else {
        return Ok(None);
    };
    Ok(Some(outside_mask_identical_ratio(&record.source, &record.edited, &mask.dilate(dilation))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample_id: String,
    pub clip_t: f64,
    pub clip_i: f64,
    pub alignment: u8,
    pub coherence: u8,
    pub fidelity: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn evaluate_record(
    r: &EvalRecord,
    embedder: &dyn EmbeddingBackend,
    judge: &dyn JudgeBackend,
    dilation: u32,
) -> Result<MetricRow, MetricError> {
    if r.source.dims() != r.edited.dims() {
        return Err(RasterError::Shape {
            left_w: r.source.width(),
            left_h: r.source.height(),
            right_w: r.edited.width(),
            right_h: r.edited.height(),
        }
        .into());
    }
    let ali = judge_score(&r.source, &r.edited, &r.instruction, JudgeCriterion::Alignment, judge)?;
    let coh = judge_score(&r.source, &r.edited, &r.instruction, JudgeCriterion::Coherence, judge)?;
    let mut warnings = Vec::new();
    for (name, s) in [("alignment", ali), ("coherence", coh)] {
        if s.clamped {
            warnings.push(format!("{name} score clamped"));
        }
    }
    Ok(MetricRow {
        sample_id: r.sample_id.clone(),
        clip_t: clip_t(&r.edited, &r.instruction, embedder)?,
        clip_i: clip_i(&r.source, &r.edited, embedder)?,
        alignment: ali.score,
        coherence: coh.score,
        fidelity: fidelity_ratio(r, dilation)?,
        warnings,
    })
}

/// Score every record on `workers` threads. Failed samples are listed in
/// the report and excluded from the aggregates.
pub fn evaluate(
    records: &[EvalRecord],
    model: &str,
    embedder: &dyn EmbeddingBackend,
    judge: &dyn JudgeBackend,
    dilation: u32,
    workers: usize,
) -> MetricReport {
    let run = || {
        records
            .par_iter()
            .map(|r| (r.sample_id.clone(), evaluate_record(r, embedder, judge, dilation)))
            .collect::<Vec<_>>()
    };
    let results = match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    };
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (id, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => errors.push((id, e.to_string())),
        }
    }
    errors.sort();
    let mut report = MetricReport::from_rows(model, &embedder.model_id(), rows);
    report.errors = errors;
    report
}
