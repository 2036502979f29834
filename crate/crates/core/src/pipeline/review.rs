//! Human review of an edit: every step is proposed (reasoned and localized,
//! not inpainted), then approved or rejected one at a time.
//!
//! Status moves PROPOSED → APPROVED → APPLIED, or PROPOSED → REJECTED →
//! PROPOSED when a rejection re-runs reasoning with the reviewer's feedback.
//! Steps apply strictly in order, and after each application the later
//! proposals are re-localized against the new canvas.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    apply_step, check_nonempty, decompose_instruction, elapsed_ms, localize_step, reason_step, segment_request,
    union_of, whole_instruction_prompt, PipelineError, PipelinePolicy,
};
use crate::backends::Backends;
use crate::decompose::{ClauseLexicon, DecomposeError};
use crate::raster::{BinaryMask, RasterImage};
use crate::types::{CoTStep, EditInstruction, EditTrace, StepProvenance, StepResult, SubPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepStatus {
    Proposed,
    Approved,
    Rejected,
    Applied,
}

impl StepStatus {
    pub fn can_become(self, next: StepStatus) -> bool {
        use StepStatus::*;
        matches!(
            (self, next),
            (Proposed, Approved) | (Approved, Applied) | (Proposed, Rejected) | (Rejected, Proposed)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Approve,
    Reject,
}

/// Reviewer input for a decision. `mask` and `inpaint_prompt` apply to
/// APPROVE, `feedback` to REJECT.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mask: Option<BinaryMask>,
    pub inpaint_prompt: Option<String>,
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepProposal {
    /// 1-based.
    pub index: usize,
    pub sub_prompt: SubPrompt,
    pub cot_step: Option<CoTStep>,
    pub mask: BinaryMask,
    pub status: StepStatus,
    /// Every status this step has held, starting with PROPOSED.
    pub transitions: Vec<StepStatus>,
    pub feedback: Vec<String>,
    /// Why reasoning or localization is missing or stale.
    pub note: Option<String>,
}

impl StepProposal {
    fn new(index: usize, sub_prompt: SubPrompt, cot_step: Option<CoTStep>, mask: BinaryMask) -> Self {
        Self {
            index,
            sub_prompt,
            cot_step,
            mask,
            status: StepStatus::Proposed,
            transitions: vec![StepStatus::Proposed],
            feedback: Vec::new(),
            note: None,
        }
    }

    fn set_status(&mut self, next: StepStatus) -> Result<(), ReviewError> {
        if !self.status.can_become(next) {
            return Err(ReviewError::Conflict(format!(
                "step {} is {:?} and cannot become {:?}",
                self.index, self.status, next
            )));
        }
        self.status = next;
        self.transitions.push(next);
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("no step {0}")]
    NoSuchStep(usize),
    #[error("{0}")]
    Conflict(String),
    #[error("invalid override: {0}")]
    InvalidOverride(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewBatch {
    pub instruction: String,
    /// Starts at the canvas the batch was proposed on; grows as steps apply.
    pub trace: EditTrace,
    pub proposals: Vec<StepProposal>,
}

/// Reason about and localize one step on `canvas`, numbering it `k` (0-based).
fn plan_step(
    canvas: &RasterImage,
    sp: &SubPrompt,
    k: usize,
    policy: &PipelinePolicy,
    backends: &Backends,
    feedback: Option<&str>,
) -> Result<(Option<CoTStep>, BinaryMask), PipelineError> {
    if !policy.use_cot {
        let mask = union_of(canvas, &segment_request(canvas, &sp.raw_clause, backends)?)?;
        check_nonempty(sp.kind, &mask, &sp.raw_clause)?;
        return Ok((None, mask));
    }
    let mut cot = reason_step(canvas, sp, backends, feedback)?;
    cot.index = k as u32 + 1;
    cot.seg_index = k;
    let mask = localize_step(canvas, sp, backends)?;
    Ok((Some(cot), mask))
}

impl ReviewBatch {
    /// Decompose and plan every step on `canvas` without inpainting. A later
    /// step that cannot be planned yet (it may reference something an
    /// earlier step creates) gets an empty mask and a note; it is planned
    /// again once the steps before it are applied.
    pub fn propose(
        canvas: &RasterImage,
        instruction: &str,
        policy: &PipelinePolicy,
        backends: &Backends,
        lexicon: &ClauseLexicon,
    ) -> Result<Self, PipelineError> {
        let text = EditInstruction::new(instruction).map_err(|_| DecomposeError::EmptyInstruction)?;
        let sps = if policy.use_cot {
            decompose_instruction(canvas, text.as_str(), policy, backends, lexicon)?
        } else {
            vec![whole_instruction_prompt(text.as_str().trim(), lexicon)]
        };
        let (w, h) = canvas.dims();
        let mut proposals = Vec::with_capacity(sps.len());
        for (k, sp) in sps.iter().enumerate() {
            match plan_step(canvas, sp, k, policy, backends, None) {
                Ok((cot, mask)) => proposals.push(StepProposal::new(k + 1, sp.clone(), cot, mask)),
                Err(e) if k > 0 => {
                    let mut p = StepProposal::new(k + 1, sp.clone(), None, BinaryMask::empty(w, h).expect("canvas dims"));
                    p.note = Some(format!("not planned yet: {e}"));
                    proposals.push(p);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            instruction: text.as_str().to_string(),
            trace: EditTrace::new(canvas.clone(), sps),
            proposals,
        })
    }

    pub fn canvas(&self) -> &RasterImage {
        &self.trace.final_image
    }

    /// 1-based index of the first step not yet applied.
    pub fn next_step(&self) -> Option<usize> {
        self.proposals.iter().find(|p| p.status != StepStatus::Applied).map(|p| p.index)
    }

    pub fn is_complete(&self) -> bool {
        self.next_step().is_none()
    }

    pub fn proposal(&self, n: usize) -> Result<&StepProposal, ReviewError> {
        n.checked_sub(1).and_then(|i| self.proposals.get(i)).ok_or(ReviewError::NoSuchStep(n))
    }

    pub fn resolve(
        &mut self,
        n: usize,
        decision: Decision,
        overrides: Overrides,
        policy: &PipelinePolicy,
        backends: &Backends,
    ) -> Result<&StepProposal, ReviewError> {
        let p = self.proposal(n)?;
        if p.status != StepStatus::Proposed {
            return Err(ReviewError::Conflict(format!("step {n} is {:?}, not PROPOSED", p.status)));
        }
        match decision {
            Decision::Approve => self.approve(n, overrides, policy, backends)?,
            Decision::Reject => self.reject(n, overrides.feedback, policy, backends)?,
        }
        self.proposal(n)
    }

    fn approve(
        &mut self,
        n: usize,
        overrides: Overrides,
        policy: &PipelinePolicy,
        backends: &Backends,
    ) -> Result<(), ReviewError> {
        if self.next_step() != Some(n) {
            return Err(ReviewError::Conflict(format!(
                "step {n} cannot be approved before step {}",
                self.next_step().unwrap_or(0)
            )));
        }
        let canvas = self.canvas().clone();
        let p = &self.proposals[n - 1];
        if let Some(m) = &overrides.mask {
            if m.dims() != canvas.dims() {
                return Err(ReviewError::InvalidOverride(format!(
                    "mask is {:?} but the canvas is {:?}",
                    m.dims(),
                    canvas.dims()
                )));
            }
        }
        let mask = overrides.mask.clone().unwrap_or_else(|| p.mask.clone());
        if p.sub_prompt.kind.requires_nonempty_mask() && mask.is_empty() {
            return Err(ReviewError::InvalidOverride(format!(
                "step {n} has an empty mask; supply a mask override"
            )));
        }
        let prompt = match (&overrides.inpaint_prompt, &p.cot_step) {
            (Some(o), _) if o.trim().is_empty() => {
                return Err(ReviewError::InvalidOverride("inpaint prompt is empty".into()))
            }
            (Some(o), _) => o.trim().to_string(),
            (None, Some(cot)) if policy.use_reprompt => cot.inpaint_prompt.clone(),
            _ => p.sub_prompt.raw_clause.clone(),
        };
        let started = Instant::now();
        let after = apply_step(&canvas, &mask, &prompt, policy, backends)?;
        let p = &mut self.proposals[n - 1];
        p.set_status(StepStatus::Approved)?;
        p.set_status(StepStatus::Applied)?;
        let step = StepResult {
            sub_prompt: p.sub_prompt.clone(),
            cot_step: p.cot_step.clone(),
            mask,
            inpaint_prompt: prompt,
            image_after: after,
            provenance: StepProvenance {
                mask_override: overrides.mask.is_some(),
                prompt_override: overrides.inpaint_prompt.is_some(),
            },
            elapsed_ms: elapsed_ms(started),
        };
        self.trace.push(step);
        self.refresh_after(n, policy, backends);
        Ok(())
    }

    /// Re-plan the open steps after `n` against the current canvas.
    fn refresh_after(&mut self, n: usize, policy: &PipelinePolicy, backends: &Backends) {
        let canvas = self.canvas().clone();
        for p in self.proposals.iter_mut().skip(n) {
            if p.status != StepStatus::Proposed {
                continue;
            }
            let fb = p.feedback.last().map(String::as_str);
            match plan_step(&canvas, &p.sub_prompt, p.index - 1, policy, backends, fb) {
                Ok((cot, mask)) => {
                    p.cot_step = cot;
                    p.mask = mask;
                    p.note = None;
                }
                Err(e) => p.note = Some(format!("could not re-plan on the current canvas: {e}")),
            }
        }
    }

    fn reject(
        &mut self,
        n: usize,
        feedback: Option<String>,
        policy: &PipelinePolicy,
        backends: &Backends,
    ) -> Result<(), ReviewError> {
        let feedback = feedback.map(|f| f.trim().to_string()).filter(|f| !f.is_empty());
        // plan first so a failed re-plan leaves the batch untouched
        let sp = &self.proposals[n - 1].sub_prompt;
        let (cot, mask) = plan_step(self.canvas(), sp, n - 1, policy, backends, feedback.as_deref())?;
        let p = &mut self.proposals[n - 1];
        p.set_status(StepStatus::Rejected)?;
        if let Some(f) = feedback {
            p.feedback.push(f);
        }
        p.set_status(StepStatus::Proposed)?;
        p.cot_step = cot;
        p.mask = mask;
        p.note = None;
        Ok(())
    }
}
