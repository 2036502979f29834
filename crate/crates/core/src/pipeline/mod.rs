//! The edit orchestrator: decompose, then for each sub-prompt reason,
//! localize and inpaint on the current canvas.

pub mod review;
pub mod trace;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::mock::FEEDBACK_LABEL;
use crate::backends::{BackendError, Backends};
use crate::cotparse::{bind_masks, locate_request, parse_cot, parse_description_reply, CoTError};
use crate::decompose::{classify_clause, decompose_grammar, decompose_llm, ClauseLexicon, DecomposeError};
use crate::raster::{BinaryMask, RasterImage};
use crate::templates::{render_localization, TemplateName};
use crate::types::{
    CoTStep, EditInstruction, EditOpKind, EditTrace, StepProvenance, StepResult, SubPrompt,
};

pub use review::{Decision, Overrides, ReviewBatch, ReviewError, StepProposal, StepStatus};
pub use trace::{read_trace_dir, write_trace_dir, StepMeta, TraceMeta};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decomposer {
    #[default]
    Grammar,
    Llm,
}

/// How segmentation requests are issued for a multi-step edit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SegmentationMode {
    /// One dialogue per step, against the canvas that step edits.
    #[default]
    PerStep,
    /// One dialogue for the whole instruction against the initial canvas.
    Batched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelinePolicy {
    pub use_cot: bool,
    pub use_reprompt: bool,
    pub mask_dilation_px: u32,
    pub max_steps: usize,
    pub decomposer: Decomposer,
    pub segmentation: SegmentationMode,
}

impl Default for PipelinePolicy {
    fn default() -> Self {
        Self {
            use_cot: true,
            use_reprompt: true,
            mask_dilation_px: 2,
            max_steps: 8,
            decomposer: Decomposer::Grammar,
            segmentation: SegmentationMode::PerStep,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error("instruction decomposes into {found} steps, more than the cap of {max}")]
    TooManySteps { found: usize, max: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("cannot parse reasoning reply: {0}")]
    ReasoningParse(String),
    #[error("localization of {reference:?} produced an empty mask")]
    LocalizationEmpty { reference: String },
    #[error(transparent)]
    CoT(#[from] CoTError),
    #[error("invalid policy: {0}")]
    Policy(String),
}

/// A run that stopped early. `trace` holds every step applied before the failure.
#[derive(Debug, Error)]
#[error("{}{error}", failed_step.map(|i| format!("step {}: ", i + 1)).unwrap_or_default())]
pub struct RunFailure {
    pub trace: EditTrace,
    /// 0-based index of the failing step; `None` when decomposition failed.
    pub failed_step: Option<usize>,
    #[source]
    pub error: PipelineError,
}

/// Decompose `instruction` per the policy and enforce the step cap.
pub fn decompose_instruction(
    image: &RasterImage,
    instruction: &str,
    policy: &PipelinePolicy,
    backends: &Backends,
    lexicon: &ClauseLexicon,
) -> Result<Vec<SubPrompt>, PipelineError> {
    if policy.max_steps == 0 {
        return Err(PipelineError::Policy("max_steps must be at least 1".into()));
    }
    let sps = match policy.decomposer {
        Decomposer::Grammar => decompose_grammar(instruction, lexicon)?,
        Decomposer::Llm => decompose_llm(instruction, Some(image), backends.mllm.as_ref(), lexicon)?,
    };
    if sps.len() > policy.max_steps {
        return Err(PipelineError::TooManySteps { found: sps.len(), max: policy.max_steps });
    }
    Ok(sps)
}

/// Localization + description prompt for one sub-prompt, with optional
/// reviewer feedback appended.
pub fn reasoning_prompt(sub_prompt: &SubPrompt, feedback: Option<&str>) -> String {
    let mut p = format!(
        "{}\n{}",
        render_localization(&sub_prompt.raw_clause),
        TemplateName::Description.body()
    );
    if let Some(fb) = feedback.map(str::trim).filter(|f| !f.is_empty()) {
        p.push_str(&format!("\n{FEEDBACK_LABEL} {}", fb.replace('\n', " ")));
    }
    p
}

/// Ask the MLLM for reasoning, area description and re-prompt.
pub fn reason_step(
    image: &RasterImage,
    sub_prompt: &SubPrompt,
    backends: &Backends,
    feedback: Option<&str>,
) -> Result<CoTStep, PipelineError> {
    let reply = backends.mllm.chat(Some(image), &reasoning_prompt(sub_prompt, feedback))?;
    let d = parse_description_reply(&reply);
    let inpaint_prompt = d.reprompt.ok_or_else(|| {
        PipelineError::ReasoningParse(format!(
            "no re-prompt line in reply {:?}",
            reply.chars().take(80).collect::<String>()
        ))
    })?;
    let step = CoTStep {
        index: 1,
        reasoning: d.reasoning,
        area_description: d.area_description,
        seg_index: 0,
        inpaint_prompt,
    };
    step.validate().map_err(|e| PipelineError::ReasoningParse(e.to_string()))?;
    Ok(step)
}

/// Send a locate request and return the union of the masks it binds.
pub(crate) fn segment_request(
    image: &RasterImage,
    text: &str,
    backends: &Backends,
) -> Result<Vec<BinaryMask>, PipelineError> {
    let seg = backends.segmenter.segment(image, &locate_request(text))?;
    let parsed = parse_cot(&seg.reply_text)?;
    Ok(bind_masks(&parsed, seg.masks)?.into_iter().map(|(_, m)| m).collect())
}

pub(crate) fn union_of(image: &RasterImage, masks: &[BinaryMask]) -> Result<BinaryMask, PipelineError> {
    let (w, h) = image.dims();
    let mut acc = BinaryMask::empty(w, h).map_err(BackendError::from)?;
    for m in masks {
        acc = acc.union(m).map_err(BackendError::from)?;
    }
    Ok(acc)
}

pub(crate) fn check_nonempty(kind: EditOpKind, mask: &BinaryMask, reference: &str) -> Result<(), PipelineError> {
    if kind.requires_nonempty_mask() && mask.is_empty() {
        return Err(PipelineError::LocalizationEmpty { reference: reference.to_string() });
    }
    Ok(())
}

/// Localize one sub-prompt on `image`.
pub fn localize_step(
    image: &RasterImage,
    sub_prompt: &SubPrompt,
    backends: &Backends,
) -> Result<BinaryMask, PipelineError> {
    let masks = segment_request(image, &sub_prompt.raw_clause, backends)?;
    let mask = union_of(image, &masks)?;
    check_nonempty(sub_prompt.kind, &mask, &sub_prompt.target_ref)?;
    Ok(mask)
}

/// Dilate the mask per policy and inpaint.
pub fn apply_step(
    image: &RasterImage,
    mask: &BinaryMask,
    inpaint_prompt: &str,
    policy: &PipelinePolicy,
    backends: &Backends,
) -> Result<RasterImage, PipelineError> {
    if mask.dims() != image.dims() {
        return Err(BackendError::Shape(format!(
            "mask is {:?} but image is {:?}",
            mask.dims(),
            image.dims()
        ))
        .into());
    }
    let dilated = mask.dilate(policy.mask_dilation_px);
    let out = backends.inpainter.inpaint(image, &dilated, inpaint_prompt)?;
    if out.dims() != image.dims() {
        return Err(BackendError::Protocol(format!(
            "inpainting returned {:?} for a {:?} image",
            out.dims(),
            image.dims()
        ))
        .into());
    }
    Ok(out)
}

pub(crate) fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

/// Run a full edit. Steps apply in decomposition order, each on the output
/// of the previous one.
pub fn run_edit(
    image: &RasterImage,
    instruction: &str,
    policy: &PipelinePolicy,
    backends: &Backends,
    lexicon: &ClauseLexicon,
) -> Result<EditTrace, RunFailure> {
    let fail = |trace: EditTrace, failed_step, error| RunFailure { trace, failed_step, error };
    if EditInstruction::new(instruction).is_err() {
        return Err(fail(
            EditTrace::new(image.clone(), Vec::new()),
            None,
            DecomposeError::EmptyInstruction.into(),
        ));
    }
    if !policy.use_cot {
        return run_single(image, instruction, policy, backends, lexicon);
    }
    let sps = match decompose_instruction(image, instruction, policy, backends, lexicon) {
        Ok(s) => s,
        Err(e) => return Err(fail(EditTrace::new(image.clone(), Vec::new()), None, e)),
    };
    let mut trace = EditTrace::new(image.clone(), sps.clone());
    let batched = match policy.segmentation {
        SegmentationMode::PerStep => None,
        SegmentationMode::Batched => match segment_request(image, instruction, backends) {
            Ok(m) if m.len() == sps.len() => Some(m),
            Ok(m) => {
                let e = CoTError::Binding { steps: sps.len(), masks: m.len() };
                return Err(fail(trace, Some(0), e.into()));
            }
            Err(e) => return Err(fail(trace, Some(0), e)),
        },
    };
    for (k, sp) in sps.iter().enumerate() {
        let started = Instant::now();
        let canvas = trace.final_image.clone();
        let result = (|| {
            let mut cot = reason_step(&canvas, sp, backends, None)?;
            cot.index = k as u32 + 1;
            cot.seg_index = k;
            let mask = match &batched {
                Some(masks) => {
                    check_nonempty(sp.kind, &masks[k], &sp.target_ref)?;
                    masks[k].clone()
                }
                None => localize_step(&canvas, sp, backends)?,
            };
            let prompt = if policy.use_reprompt {
                cot.inpaint_prompt.clone()
            } else {
                sp.raw_clause.clone()
            };
            let after = apply_step(&canvas, &mask, &prompt, policy, backends)?;
            Ok::<_, PipelineError>(StepResult {
                sub_prompt: sp.clone(),
                cot_step: Some(cot),
                mask,
                inpaint_prompt: prompt,
                image_after: after,
                provenance: StepProvenance::default(),
                elapsed_ms: elapsed_ms(started),
            })
        })();
        match result {
            Ok(step) => trace.push(step),
            Err(e) => return Err(fail(trace, Some(k), e)),
        }
    }
    Ok(trace)
}

/// The whole instruction as one sub-prompt (no-CoT mode).
pub(crate) fn whole_instruction_prompt(text: &str, lexicon: &ClauseLexicon) -> SubPrompt {
    classify_clause(text, lexicon)
        .map(|s| SubPrompt { target_ref: text.to_string(), anchor_ref: None, raw_clause: text.to_string(), ..s })
        .unwrap_or_else(|_| SubPrompt {
            kind: EditOpKind::ChangeObject,
            target_ref: text.to_string(),
            anchor_ref: None,
            raw_clause: text.to_string(),
            fallback: true,
        })
}

/// The no-CoT baseline: one localization and one inpaint with the raw instruction.
fn run_single(
    image: &RasterImage,
    instruction: &str,
    policy: &PipelinePolicy,
    backends: &Backends,
    lexicon: &ClauseLexicon,
) -> Result<EditTrace, RunFailure> {
    let text = instruction.trim();
    let sp = whole_instruction_prompt(text, lexicon);
    let mut trace = EditTrace::new(image.clone(), vec![sp.clone()]);
    let started = Instant::now();
    let result = (|| {
        let masks = segment_request(image, text, backends)?;
        let mask = union_of(image, &masks)?;
        check_nonempty(sp.kind, &mask, text)?;
        let after = apply_step(image, &mask, text, policy, backends)?;
        Ok::<_, PipelineError>((mask, after))
    })();
    match result {
        Ok((mask, after)) => {
            trace.push(StepResult {
                sub_prompt: sp,
                cot_step: None,
                mask,
                inpaint_prompt: text.to_string(),
                image_after: after,
                provenance: StepProvenance::default(),
                elapsed_ms: elapsed_ms(started),
            });
            Ok(trace)
        }
        Err(error) => Err(RunFailure { trace, failed_step: Some(0), error }),
    }
}
