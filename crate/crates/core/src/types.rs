//! Domain types shared across decomposition, CoT coding, the pipeline and
//! the data tooling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryMask, RasterImage};

/// The literal marker requesting one segmentation mask.
pub const SEG_MARKER: &str = "[SEG]";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid {what}: {reason}")]
pub struct ValidationError {
    pub what: &'static str,
    pub reason: String,
}

impl ValidationError {
    pub fn new(what: &'static str, reason: impl Into<String>) -> Self {
        Self {
            what,
            reason: reason.into(),
        }
    }
}

/// Atomic editing operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EditOpKind {
    Add,
    Remove,
    ChangeObject,
    ChangeAttribute,
    ChangeBackground,
}

impl EditOpKind {
    pub const ALL: [EditOpKind; 5] = [
        EditOpKind::Add,
        EditOpKind::Remove,
        EditOpKind::ChangeObject,
        EditOpKind::ChangeAttribute,
        EditOpKind::ChangeBackground,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EditOpKind::Add => "ADD",
            EditOpKind::Remove => "REMOVE",
            EditOpKind::ChangeObject => "CHANGE_OBJECT",
            EditOpKind::ChangeAttribute => "CHANGE_ATTRIBUTE",
            EditOpKind::ChangeBackground => "CHANGE_BACKGROUND",
        }
    }

    pub fn is_change(self) -> bool {
        matches!(
            self,
            EditOpKind::ChangeObject | EditOpKind::ChangeAttribute | EditOpKind::ChangeBackground
        )
    }

    /// Every kind but ADD must localize to a nonempty region.
    pub fn requires_nonempty_mask(self) -> bool {
        self != EditOpKind::Add
    }
}

impl fmt::Display for EditOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EditOpKind {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EditOpKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ValidationError::new("edit kind", format!("unknown kind {s:?}")))
    }
}

/// One single-operation editing step produced by decomposition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubPrompt {
    pub kind: EditOpKind,
    pub target_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_ref: Option<String>,
    pub raw_clause: String,
    /// Set when the kind could not be classified and fell back to a default.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

impl SubPrompt {
    pub fn new(
        kind: EditOpKind,
        target_ref: impl Into<String>,
        anchor_ref: Option<String>,
        raw_clause: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        let sp = Self {
            kind,
            target_ref: target_ref.into(),
            anchor_ref,
            raw_clause: raw_clause.into(),
            fallback: false,
        };
        sp.validate()?;
        Ok(sp)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.target_ref.trim().is_empty() {
            return Err(ValidationError::new("sub-prompt", "empty target reference"));
        }
        if self.anchor_ref.is_some() && self.kind != EditOpKind::Add {
            return Err(ValidationError::new(
                "sub-prompt",
                format!("anchor reference on a {} operation", self.kind),
            ));
        }
        Ok(())
    }
}

/// A complex editing instruction; never blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EditInstruction(String);

impl EditInstruction {
    pub fn new(text: impl Into<String>) -> Result<Self, ValidationError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ValidationError::new("instruction", "instruction is empty"));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for EditInstruction {
    type Error = ValidationError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<EditInstruction> for String {
    fn from(i: EditInstruction) -> String {
        i.0
    }
}

impl fmt::Display for EditInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One reasoning step of a segmentation-in-CoT reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTStep {
    /// 1-based position in the reply.
    pub index: u32,
    pub reasoning: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area_description: Option<String>,
    /// 0-based position of this step's marker; binds to the mask list.
    pub seg_index: usize,
    pub inpaint_prompt: String,
}

impl CoTStep {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.inpaint_prompt.trim().is_empty() {
            return Err(ValidationError::new("cot step", "empty inpainting prompt"));
        }
        if self.inpaint_prompt.contains(SEG_MARKER) {
            return Err(ValidationError::new(
                "cot step",
                "inpainting prompt contains the segmentation marker",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoTWarning {
    /// The preamble enumerates a different number of items than there are steps.
    CountMismatch { declared: usize, found: usize },
}

/// A parsed segmentation-in-CoT reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTResponse {
    pub steps: Vec<CoTStep>,
    pub raw_text: String,
    /// Opaque text before the first step header (the decomposition recap).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preamble: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<CoTWarning>,
}

/// The five-part training sample: source, instruction, mask, target and CoT reply.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSample {
    pub sample_id: String,
    pub source: RasterImage,
    pub instruction: EditInstruction,
    pub mask: BinaryMask,
    pub target: RasterImage,
    pub cot: CoTResponse,
}

impl EditSample {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.source.dims() != self.target.dims() {
            return Err(ValidationError::new(
                "sample",
                format!(
                    "source is {:?} but target is {:?}",
                    self.source.dims(),
                    self.target.dims()
                ),
            ));
        }
        if self.mask.dims() != self.source.dims() {
            return Err(ValidationError::new(
                "sample",
                format!(
                    "mask is {:?} but source is {:?}",
                    self.mask.dims(),
                    self.source.dims()
                ),
            ));
        }
        if self.cot.steps.is_empty() {
            return Err(ValidationError::new("sample", "CoT response has no steps"));
        }
        if self.sample_id.is_empty() {
            return Err(ValidationError::new("sample", "empty sample id"));
        }
        Ok(())
    }
}

/// Where the mask and prompt applied in a step came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepProvenance {
    #[serde(default)]
    pub mask_override: bool,
    #[serde(default)]
    pub prompt_override: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub sub_prompt: SubPrompt,
    pub cot_step: Option<CoTStep>,
    /// The localized mask, before any dilation.
    pub mask: BinaryMask,
    pub inpaint_prompt: String,
    pub image_after: RasterImage,
    pub provenance: StepProvenance,
    pub elapsed_ms: u64,
}

/// Ordered record of one full pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTrace {
    pub initial: RasterImage,
    pub sub_prompts: Vec<SubPrompt>,
    pub steps: Vec<StepResult>,
    pub final_image: RasterImage,
}

impl EditTrace {
    pub fn new(initial: RasterImage, sub_prompts: Vec<SubPrompt>) -> Self {
        Self {
            final_image: initial.clone(),
            initial,
            sub_prompts,
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, step: StepResult) {
        self.final_image = step.image_after.clone();
        self.steps.push(step);
    }

    /// Union of every applied mask, or an empty mask when no step ran.
    pub fn mask_union(&self) -> BinaryMask {
        let (w, h) = self.initial.dims();
        let mut acc = BinaryMask::empty(w, h).expect("image dims are positive");
        for s in &self.steps {
            acc = acc.union(&s.mask).expect("step masks match the canvas");
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_prompt_invariants() {
        assert!(SubPrompt::new(EditOpKind::Add, "a dog", Some("the sofa".into()), "add a dog on the sofa").is_ok());
        assert!(SubPrompt::new(EditOpKind::Remove, "the dog", Some("the sofa".into()), "x").is_err());
        assert!(SubPrompt::new(EditOpKind::Remove, "  ", None, "remove").is_err());
    }

    #[test]
    fn instruction_rejects_blank() {
        assert!(EditInstruction::new("   \n").is_err());
        assert!(EditInstruction::new("").is_err());
        assert_eq!(EditInstruction::new("add a hat").unwrap().as_str(), "add a hat");
        assert!(serde_json::from_str::<EditInstruction>("\" \"").is_err());
    }

    #[test]
    fn kind_round_trips_through_text() {
        for k in EditOpKind::ALL {
            assert_eq!(k.as_str().parse::<EditOpKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert!("CHANGE".parse::<EditOpKind>().is_err());
    }

    #[test]
    fn cot_step_rejects_marker_in_prompt() {
        let step = CoTStep {
            index: 1,
            reasoning: String::new(),
            area_description: None,
            seg_index: 0,
            inpaint_prompt: "a [SEG] hat".into(),
        };
        assert!(step.validate().is_err());
    }
}
